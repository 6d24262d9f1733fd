"""Discrete-time MIMO feedback-linearizable test plants.

Each built-in plant has a known relative-degree vector, an origin
equilibrium and, for validation purposes, a closed-form oracle for the
synthetic input that drives the chain-of-integrators form of the dynamics.
The controller never touches the plant internals; they exist to generate
data and to verify predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .lifting import Trajectory


@dataclass(frozen=True)
class PlantModel:
    """Immutable description of a discrete-time plant.

    Attributes:
        name: Registry identifier.
        n: State dimension (equals the sum of the relative degrees).
        m: Input and output dimension.
        d: Relative degree of each output channel.
        f: State transition map, (x, u) -> next state.
        h: Output map, x -> outputs.
        phi_true: Optional oracle for the synthetic input as a function of
            (u, lifted state); used only by tests and constant estimation.
        input_box: Component-wise input bounds (lo, hi).
    """

    name: str
    n: int
    m: int
    d: tuple
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    phi_true: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    input_box: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(int(di) for di in self.d))
        if sum(self.d) != self.n:
            raise ValueError("relative degrees must sum to the state dimension")
        if len(self.d) != self.m:
            raise ValueError("one relative degree per output channel required")
        if any(di < 1 for di in self.d):
            raise ValueError("relative degrees must be >= 1")
        if self.input_box is None:
            box = (-5.0 * np.ones(self.m), 5.0 * np.ones(self.m))
        else:
            box = (
                np.asarray(self.input_box[0], dtype=float).ravel(),
                np.asarray(self.input_box[1], dtype=float).ravel(),
            )
        if box[0].shape != (self.m,) or box[1].shape != (self.m,):
            raise ValueError("input box bounds must have one entry per input")
        if np.any(box[0] >= 0) or np.any(box[1] <= 0):
            raise ValueError("origin must lie in the interior of the input box")
        object.__setattr__(self, "input_box", box)

    @property
    def d_max(self) -> int:
        return max(self.d)


def _check_vector(v, size: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).ravel()
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def step(plant: PlantModel, x, u) -> np.ndarray:
    """Advance the plant one step: returns f(x, u)."""
    x = _check_vector(x, plant.n, "state")
    u = _check_vector(u, plant.m, "input")
    with np.errstate(over="ignore", invalid="ignore"):
        nxt = np.asarray(plant.f(x, u), dtype=float).ravel()
    if not np.all(np.isfinite(nxt)):
        raise ValueError(
            f"plant {plant.name} state became non-finite (diverging run; "
            "reduce the excitation amplitude or shorten the horizon)"
        )
    return nxt


def output(plant: PlantModel, x) -> np.ndarray:
    """Measure the plant output h(x)."""
    x = _check_vector(x, plant.n, "state")
    return np.asarray(plant.h(x), dtype=float).ravel()


def simulate(plant: PlantModel, x0, u_seq) -> Trajectory:
    """Run the plant open loop and record a noise-free trajectory.

    A length-N input sequence determines output channel ``i`` exactly up to
    sample ``N + d_i - 1`` (an input needs ``d_i`` steps to reach output
    ``i``), so exactly those samples are returned.  The recursion is
    continued past the last applied input by holding it constant; the held
    values cannot influence any retained sample.
    """
    x0 = _check_vector(x0, plant.n, "x0")
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None]
    if u_seq.ndim != 2 or u_seq.shape[0] < 1 or u_seq.shape[1] != plant.m:
        raise ValueError(f"u_seq must be a nonempty (N, {plant.m}) array")
    n_inputs = u_seq.shape[0]
    total = n_inputs + plant.d_max
    ys = np.empty((total, plant.m))
    x = x0
    for k in range(total):
        ys[k] = output(plant, x)
        if k < total - 1:
            u_k = u_seq[min(k, n_inputs - 1)]
            x = step(plant, x, u_k)
    y_channels = tuple(ys[: n_inputs + di, i] for i, di in enumerate(plant.d))
    return Trajectory(u=u_seq, y=y_channels, d=plant.d)


def lift_state(plant: PlantModel, x) -> np.ndarray:
    """Lifted state of the plant at state ``x``.

    The window samples ``y_i[k .. k+d_i-1]`` do not depend on any input
    applied from time ``k`` on, so they are read off a zero-input rollout.
    """
    x = _check_vector(x, plant.n, "state")
    windows = [[] for _ in range(plant.m)]
    xk = x
    for j in range(plant.d_max):
        yk = output(plant, xk)
        for i, di in enumerate(plant.d):
            if j < di:
                windows[i].append(yk[i])
        if j < plant.d_max - 1:
            xk = step(plant, xk, np.zeros(plant.m))
    return np.concatenate([np.asarray(w) for w in windows])


def true_phi(plant: PlantModel, u, xi) -> np.ndarray:
    """Evaluate the plant's synthetic-input oracle at (u, lifted state)."""
    if plant.phi_true is None:
        raise NotImplementedError(f"plant {plant.name} provides no phi oracle")
    u = _check_vector(u, plant.m, "input")
    xi = _check_vector(xi, plant.n, "lifted state")
    return np.asarray(plant.phi_true(u, xi), dtype=float).ravel()


def relative_degree_deltas(
    plant: PlantModel, x, u, delta: float = 1e-6
) -> np.ndarray:
    """Output sensitivities to an input perturbation at time 0.

    Returns an array of shape (m_inputs, d_max + 1, m_outputs) whose entry
    (j, k, i) is |y_i[k](u + delta * e_j) - y_i[k](u)| for a rollout that
    applies the perturbed input once and zeros afterwards.  By definition of
    the relative degree, output ``i`` must be insensitive for k < d_i and
    sensitive at k = d_i for at least one input direction.
    """
    x = _check_vector(x, plant.n, "state")
    u = _check_vector(u, plant.m, "input")
    horizon = plant.d_max + 1

    def rollout(u0):
        xk = x
        ys = []
        for k in range(horizon):
            ys.append(output(plant, xk))
            uk = u0 if k == 0 else np.zeros(plant.m)
            xk = step(plant, xk, uk)
        return np.asarray(ys)

    base = rollout(u)
    deltas = np.empty((plant.m, horizon, plant.m))
    for j in range(plant.m):
        perturbed = rollout(u + delta * np.eye(plant.m)[j])
        deltas[j] = np.abs(perturbed - base)
    return deltas


# --- Built-in plants ------------------------------------------------------
#
# P1 is chosen so the default monomial dictionary {xi1^2, xi2, u} decomposes
# its synthetic input exactly; P2 adds a sine term that the same dictionary
# cannot represent; P3 is MIMO with distinct relative degrees (2, 1); LTI1
# is a pure chain of integrators whose synthetic input is the raw input.


def _p1_f(x, u):
    return np.array([x[1], 0.8 * x[1] + 0.2 * x[0] ** 2 + u[0]])


def _p1_h(x):
    return np.array([x[0]])


def _p1_phi(u, xi):
    return np.array([0.2 * xi[0] ** 2 + 0.8 * xi[1] + u[0]])


def _p2_f(x, u):
    return np.array(
        [x[1], 0.8 * x[1] + 0.2 * x[0] ** 2 + 0.1 * np.sin(x[0]) + u[0]]
    )


def _p2_phi(u, xi):
    return np.array(
        [0.2 * xi[0] ** 2 + 0.1 * np.sin(xi[0]) + 0.8 * xi[1] + u[0]]
    )


def _p3_f(x, u):
    return np.array(
        [
            x[1],
            0.15 * x[0] ** 2 + 0.1 * x[2] + u[0],
            0.5 * x[2] + 0.1 * x[0] * x[1] + u[1],
        ]
    )


def _p3_h(x):
    return np.array([x[0], x[2]])


def _p3_phi(u, xi):
    # Lifted coordinates: xi = (y1_k, y1_{k+1}, y2_k) = (x1, x2, x3).
    return np.array(
        [
            0.15 * xi[0] ** 2 + 0.1 * xi[2] + u[0],
            0.5 * xi[2] + 0.1 * xi[0] * xi[1] + u[1],
        ]
    )


def _lti1_f(x, u):
    return np.array([x[1], u[0]])


def _lti1_phi(u, xi):
    return np.array([u[0]])


def builtin_plants() -> dict:
    """Registry of the named built-in plants."""
    return {
        "P1": PlantModel(
            name="P1", n=2, m=1, d=(2,), f=_p1_f, h=_p1_h, phi_true=_p1_phi
        ),
        "P2": PlantModel(
            name="P2", n=2, m=1, d=(2,), f=_p2_f, h=_p1_h, phi_true=_p2_phi
        ),
        "P3": PlantModel(
            name="P3", n=3, m=2, d=(2, 1), f=_p3_f, h=_p3_h, phi_true=_p3_phi
        ),
        "LTI1": PlantModel(
            name="LTI1", n=2, m=1, d=(2,), f=_lti1_f, h=_p1_h, phi_true=_lti1_phi
        ),
    }


def get_plant(name: str) -> PlantModel:
    registry = builtin_plants()
    try:
        return registry[name]
    except KeyError:
        raise KeyError(
            f"unknown plant {name!r}; available: {sorted(registry)}"
        ) from None
