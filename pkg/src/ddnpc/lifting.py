"""Trajectories, lifted states, Hankel matrices and excitation certificates.

The lifted state stacks, for every output channel, a window of consecutive
output samples whose length equals that channel's relative degree.  All
window bookkeeping in the package goes through this module so the index
conventions live in exactly one place:

* a trajectory with ``N`` inputs stores ``N + d_i`` samples of output ``i``,
* the lifted state at time ``k`` exists for every ``k`` in ``[0, N]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import PersistencyError

# Singular values below RANK_RTOL * sigma_max count as zero in rank tests.
RANK_RTOL = 1e-9


def _as_sequence_matrix(seq: Sequence, name: str = "seq") -> np.ndarray:
    """Coerce a sequence of eta-vectors (or scalars) to an (N, eta) array."""
    z = np.asarray(seq, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty sequence of vectors")
    return z


@dataclass(frozen=True)
class HankelMatrix:
    """Dense Hankel matrix of a vector sequence.

    Attributes:
        matrix: The (eta * depth, N - depth + 1) dense array; block row ``j``
            of column ``c`` holds the sequence element at index ``j + c``.
        depth: Number of block rows.
        eta: Dimension of one sequence element.
    """

    matrix: np.ndarray
    depth: int
    eta: int

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    @property
    def block_height(self) -> int:
        return self.matrix.shape[0]


def build_hankel(seq: Sequence, depth: int) -> HankelMatrix:
    """Build the depth-L Hankel matrix of a sequence of eta-vectors.

    Args:
        seq: Sequence of N vectors in R^eta (scalars are treated as eta = 1).
        depth: Number of stacked block rows L, with 1 <= L <= N.

    Returns:
        HankelMatrix of shape (eta * L, N - L + 1).
    """
    z = _as_sequence_matrix(seq)
    n_samples, eta = z.shape
    if not 1 <= depth <= n_samples:
        raise ValueError(
            f"Hankel depth must satisfy 1 <= depth <= {n_samples}, got {depth}"
        )
    width = n_samples - depth + 1
    matrix = np.empty((eta * depth, width))
    for j in range(depth):
        matrix[j * eta : (j + 1) * eta, :] = z[j : j + width].T
    return HankelMatrix(matrix=matrix, depth=depth, eta=eta)


@dataclass(frozen=True)
class PeCertificate:
    """Outcome of a persistency-of-excitation rank test."""

    satisfied: bool
    rank: int
    sigma_min: float
    order: int
    eta: int
    required_rank: int

    def to_dict(self) -> dict:
        return {
            "satisfied": bool(self.satisfied),
            "rank": int(self.rank),
            "sigma_min": float(self.sigma_min),
            "order": int(self.order),
            "eta": int(self.eta),
            "required_rank": int(self.required_rank),
        }


def is_persistently_exciting(seq: Sequence, order: int) -> PeCertificate:
    """Test persistency of excitation of a vector sequence.

    A sequence is persistently exciting of the given order when its Hankel
    matrix of that depth has full row rank.  The rank is computed from the
    singular values with the relative threshold ``RANK_RTOL``; ``sigma_min``
    reports the smallest of the first ``eta * order`` singular values (0.0
    when the matrix is too narrow to be full row rank), which is the margin
    consumed by robustness arguments.
    """
    hankel = build_hankel(seq, order)
    required = hankel.eta * order
    svals = np.linalg.svd(hankel.matrix, compute_uv=False)
    smax = svals[0] if svals.size else 0.0
    if smax == 0.0:
        rank = 0
    else:
        rank = int(np.sum(svals > RANK_RTOL * smax))
    sigma_min = float(svals[required - 1]) if svals.size >= required else 0.0
    return PeCertificate(
        satisfied=(rank == required),
        rank=rank,
        sigma_min=sigma_min,
        order=order,
        eta=hankel.eta,
        required_rank=required,
    )


@dataclass(frozen=True)
class Trajectory:
    """Recorded input/output run of a plant.

    Attributes:
        u: (N, m) applied inputs.
        y: One array per output channel; channel ``i`` has ``N + d[i]``
            samples (the extra samples are determined by the N inputs because
            output ``i`` reacts to an input only after ``d[i]`` steps).
        d: Relative degree of each output channel.
        noisy: Whether the stored outputs carry measurement noise.
        w_star_used: Noise bound applied when the trajectory was perturbed
            (0.0 for noise-free data).
        seed: RNG seed of the noise draw; None for noise-free data.
    """

    u: np.ndarray
    y: tuple
    d: tuple
    noisy: bool = False
    w_star_used: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if u.shape[0] == 1 and u.shape[1] > 1 and len(self.d) == 1:
            u = u.T
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "d", tuple(int(di) for di in self.d))
        object.__setattr__(
            self, "y", tuple(np.asarray(yi, dtype=float).ravel() for yi in self.y)
        )
        if len(self.y) != len(self.d):
            raise ValueError("one output channel per relative degree required")
        if self.u.shape[1] != len(self.d):
            raise ValueError("input dimension must match number of channels")
        n_inputs = self.u.shape[0]
        for i, (yi, di) in enumerate(zip(self.y, self.d)):
            if di < 1:
                raise ValueError("relative degrees must be >= 1")
            if yi.shape[0] != n_inputs + di:
                raise ValueError(
                    f"channel {i} must store N + d_i = {n_inputs + di} samples, "
                    f"got {yi.shape[0]}"
                )
        if self.noisy and self.w_star_used < 0:
            raise ValueError("noise bound must be nonnegative")

    @property
    def n_inputs(self) -> int:
        return self.u.shape[0]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def n(self) -> int:
        return int(sum(self.d))

    @property
    def d_max(self) -> int:
        return max(self.d)


def lift_sequence(traj: Trajectory, k_range: Iterable[int]) -> np.ndarray:
    """Stack output windows into lifted states for the requested time indices.

    The lifted state at time ``k`` concatenates, channel by channel, the
    output samples ``y_i[k : k + d_i]``.  Valid indices are ``0 <= k <= N``.

    Returns:
        (K, n) array, one lifted state per row.
    """
    ks = list(k_range)
    out = np.empty((len(ks), traj.n))
    for row, k in enumerate(ks):
        if k < 0 or k > traj.n_inputs:
            raise IndexError(
                f"lifted state index {k} outside [0, {traj.n_inputs}]"
            )
        pieces = [traj.y[i][k : k + di] for i, di in enumerate(traj.d)]
        out[row] = np.concatenate(pieces)
    return out


def add_noise(traj: Trajectory, w_star: float, seed: int) -> Trajectory:
    """Perturb every output sample by i.i.d. uniform noise on [-w*, w*].

    Inputs are left untouched.  The draw order is fixed (channel by channel)
    so a given seed always produces the same trajectory.
    """
    if w_star < 0:
        raise ValueError("noise bound w_star must be nonnegative")
    if traj.noisy:
        raise ValueError("trajectory already carries noise")
    rng = np.random.default_rng(seed)
    noisy_y = tuple(
        yi + rng.uniform(-w_star, w_star, size=yi.shape) for yi in traj.y
    )
    return Trajectory(
        u=traj.u.copy(),
        y=noisy_y,
        d=traj.d,
        noisy=True,
        w_star_used=float(w_star),
        seed=int(seed),
    )


def nominal_representation_residual(
    data, dictionary, test, depth: int, require_pe: bool = False
) -> float:
    """Residual of representing a test window by Hankel columns of the data.

    Solves, in least squares, for a column combination that reproduces the
    stacked basis evaluations and lifted states of a fresh length-``depth``
    window from the depth-``depth`` basis Hankel and the depth-``depth + 1``
    state Hankel of the recorded data.  A residual at noise level certifies
    the exact trajectory representation; a large residual falsifies the
    window as a plant trajectory.

    The formal excitation precondition (basis sequence persistently exciting
    of order ``depth + n``) is enforced only on request: when the dictionary
    decomposes the plant exactly, its evaluation sequence on clean data
    satisfies the plant recursion linearly, capping the Hankel rank below
    full for any order above one even though the representation spans every
    plant window, so the nominal exact case would always be rejected.

    Args:
        data: Noise-free recorded trajectory (N inputs).
        dictionary: Basis dictionary used for the lifted representation.
        test: Noise-free trajectory of window length ``depth``.
        depth: Window length L of the test trajectory.
        require_pe: Raise PersistencyError when the excitation certificate
            fails instead of proceeding.

    Returns:
        2-norm of the least-squares residual.
    """
    from .basis import evaluate_sequence  # local import to avoid a cycle

    if data.noisy or test.noisy:
        raise ValueError("representation residual requires noise-free data")
    if test.n_inputs != depth:
        raise ValueError(f"test window must have exactly {depth} inputs")

    psi_data = evaluate_sequence(dictionary, data, range(data.n_inputs)).T
    cert = is_persistently_exciting(psi_data, depth + data.n)
    if require_pe and not cert.satisfied:
        raise PersistencyError(
            f"basis sequence not persistently exciting of order "
            f"{depth + data.n} (rank {cert.rank} < {cert.required_rank})"
        )
    xi_data = lift_sequence(data, range(data.n_inputs + 1))

    h_psi = build_hankel(psi_data, depth).matrix
    h_xi = build_hankel(xi_data, depth + 1).matrix

    psi_test = evaluate_sequence(dictionary, test, range(depth)).T.ravel()
    xi_test = lift_sequence(test, range(depth + 1)).ravel()

    stacked = np.vstack([h_psi, h_xi])
    rhs = np.concatenate([psi_test, xi_test])
    alpha, *_ = np.linalg.lstsq(stacked, rhs, rcond=None)
    return float(np.linalg.norm(stacked @ alpha - rhs))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Serialize a trajectory as CSV plus a metadata sidecar.

    The CSV has header ``k,u_1..u_m,y_1..y_m`` and one row per time index;
    the trailing output-only rows leave the input cells empty, and channels
    that end earlier leave their cells empty as well.  Noise metadata that
    the table cannot carry goes to ``<path>.meta.json``.
    """
    path = Path(path)
    m = traj.m
    n_rows = traj.n_inputs + traj.d_max
    header = (
        ["k"]
        + [f"u_{j + 1}" for j in range(m)]
        + [f"y_{j + 1}" for j in range(m)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(n_rows):
            row = [k]
            for j in range(m):
                row.append(repr(traj.u[k, j]) if k < traj.n_inputs else "")
            for j in range(m):
                yj = traj.y[j]
                row.append(repr(yj[k]) if k < yj.shape[0] else "")
            writer.writerow(row)
    meta = {
        "d": list(traj.d),
        "noisy": traj.noisy,
        "w_star_used": traj.w_star_used,
        "seed": traj.seed,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2))


def read_trajectory_csv(path) -> Trajectory:
    """Load a trajectory written by :func:`write_trajectory_csv`."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    m = sum(1 for name in header if name.startswith("u_"))
    u_rows, y_cols = [], [[] for _ in range(m)]
    for row in rows:
        u_cells = row[1 : 1 + m]
        if all(cell != "" for cell in u_cells):
            u_rows.append([float(c) for c in u_cells])
        for j in range(m):
            cell = row[1 + m + j]
            if cell != "":
                y_cols[j].append(float(cell))
    n_inputs = len(u_rows)
    d = tuple(len(col) - n_inputs for col in y_cols)
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Trajectory(
        u=np.asarray(u_rows),
        y=tuple(np.asarray(col) for col in y_cols),
        d=tuple(meta.get("d", d)),
        noisy=bool(meta.get("noisy", False)),
        w_star_used=float(meta.get("w_star_used", 0.0)),
        seed=meta.get("seed"),
    )
