"""Basis-function dictionaries, coefficient fitting and constant estimation.

The data-driven scheme replaces the unknown nonlinearity mapping
(input, lifted state) to the chain-driving synthetic input by a linear
combination of chosen basis functions.  This module owns the dictionary
representation, the regression that recovers the coefficient matrix from
shifted output samples, and the sampling estimators for every scalar
constant the controller consumes.

All "known constants" are estimated by sampling with fixed inflation
factors (1.5 for the approximation-error bound, 1.25 for Lipschitz-type
gains).  Sampling can under-estimate a true supremum; the inflation biases
the estimates toward validity and the reports flag the estimation method.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import FitError, RankDeficientError
from .lifting import Trajectory, add_noise, build_hankel, lift_sequence

EPS_STAR_INFLATION = 1.5
LIPSCHITZ_INFLATION = 1.25
EPS_STAR_ZERO_THRESHOLD = 1e-7
RANK_TOL = 1e-10


class Dictionary:
    """Monomial dictionary evaluated on stacked (input, lifted state) pairs.

    Attributes:
        m: Input dimension.
        n: Lifted-state dimension.
        exponents: (r, m + n) integer array; row ``j`` gives the exponents of
            basis function ``j`` in the variables (u_1..u_m, xi_1..xi_n).
    """

    def __init__(self, m: int, n: int, exponents):
        self.m = int(m)
        self.n = int(n)
        exps = np.asarray(exponents, dtype=int)
        if exps.ndim != 2 or exps.shape[1] != self.m + self.n:
            raise ValueError(
                f"exponent table must have {self.m + self.n} columns"
            )
        if exps.shape[0] == 0:
            raise ValueError("dictionary must contain at least one function")
        self.exponents = exps

    @property
    def r(self) -> int:
        return self.exponents.shape[0]

    @property
    def labels(self) -> list:
        names = [f"u{j + 1}" for j in range(self.m)] + [
            f"xi{j + 1}" for j in range(self.n)
        ]
        out = []
        for row in self.exponents:
            parts = [
                name if e == 1 else f"{name}^{e}"
                for name, e in zip(names, row)
                if e > 0
            ]
            out.append("*".join(parts) if parts else "1")
        return out

    def __call__(self, u, xi) -> np.ndarray:
        u = np.asarray(u, dtype=float).ravel()
        xi = np.asarray(xi, dtype=float).ravel()
        if u.shape != (self.m,) or xi.shape != (self.n,):
            raise ValueError(
                f"expected input of dim {self.m} and lifted state of dim "
                f"{self.n}, got {u.shape} and {xi.shape}"
            )
        z = np.concatenate([u, xi])
        return np.prod(z[None, :] ** self.exponents, axis=1)

    def eval_many(self, u_block: np.ndarray, xi_block: np.ndarray) -> np.ndarray:
        """Vectorized evaluation: (K, m) and (K, n) blocks -> (r, K) matrix."""
        z = np.hstack([np.atleast_2d(u_block), np.atleast_2d(xi_block)])
        return np.prod(z[None, :, :] ** self.exponents[:, None, :], axis=2)

    @property
    def descriptor(self) -> dict:
        return {
            "kind": "monomial",
            "m": self.m,
            "n": self.n,
            "exponents": self.exponents.tolist(),
            "labels": self.labels,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "Dictionary":
        if desc.get("kind") != "monomial":
            raise ValueError(f"unsupported dictionary kind {desc.get('kind')!r}")
        return cls(m=desc["m"], n=desc["n"], exponents=desc["exponents"])

    def check_independence(
        self, omega_box, n_samples: int = 500, seed: int = 0
    ) -> float:
        """Smallest singular value of sampled evaluations (scaled).

        Raises RankDeficientError when the basis functions are numerically
        dependent over the sampling box.
        """
        lo, hi = omega_box
        rng = np.random.default_rng(seed)
        zs = rng.uniform(lo, hi, size=(n_samples, self.m + self.n))
        mat = self.eval_many(zs[:, : self.m], zs[:, self.m :])
        svals = np.linalg.svd(mat, compute_uv=False)
        ratio = float(svals[-1] / svals[0])
        if ratio < 1e-10:
            raise RankDeficientError(
                f"basis functions numerically dependent over the box "
                f"(sigma_min/sigma_max = {ratio:.3e})"
            )
        return ratio


def monomial_exponents(
    m: int, n: int, max_degree: int, drop: Iterable[tuple] = ()
) -> np.ndarray:
    """All monomial exponent rows of total degree 1..max_degree."""
    dropset = {tuple(row) for row in drop}
    rows = []
    for total in range(1, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(m + n), total):
            row = [0] * (m + n)
            for idx in combo:
                row[idx] += 1
            if tuple(row) not in dropset:
                rows.append(row)
    return np.asarray(rows, dtype=int)


def shift_duplicate_monomials(m: int, n: int, d: Sequence[int], max_degree: int):
    """Monomials whose evaluation sequence duplicates a time shift of another.

    Window coordinates other than the first sample of each channel are time
    shifts of their predecessor, so a monomial built only from such interior
    coordinates (and no input) evaluates, along any trajectory, to a shifted
    copy of the same monomial in the decremented coordinates.  Keeping both
    makes the basis-sequence Hankel structurally rank deficient, which rules
    out persistency of excitation of any order above one.
    """
    starts = np.cumsum([0] + list(d))[:-1]
    first_slots = {m + int(s) for s in starts}
    duplicates = []
    for row in monomial_exponents(m, n, max_degree):
        support = {idx for idx, e in enumerate(row) if e > 0}
        if support and all(idx >= m and idx not in first_slots for idx in support):
            duplicates.append(tuple(row))
    return duplicates


def default_dictionary(plant) -> Dictionary:
    """Default dictionary per built-in plant."""
    m, n = plant.m, plant.n
    if plant.name in ("P1", "P2"):
        # {xi1^2, xi2, u}
        return Dictionary(m, n, [[0, 2, 0], [0, 0, 1], [1, 0, 0]])
    if plant.name == "LTI1":
        return Dictionary(m, n, [[1, 0, 0]])
    # Monomials of total degree <= 2, pruned of shift duplicates.
    drop = shift_duplicate_monomials(m, n, plant.d, 2)
    return Dictionary(m, n, monomial_exponents(m, n, 2, drop=drop))


def evaluate(dictionary: Dictionary, u, xi) -> np.ndarray:
    """Pointwise dictionary evaluation."""
    return dictionary(u, xi)


def evaluate_sequence(
    dictionary: Dictionary, traj: Trajectory, k_range: Iterable[int]
) -> np.ndarray:
    """Evaluate the dictionary along a trajectory: returns an (r, K) matrix."""
    ks = list(k_range)
    if any(k < 0 or k >= traj.n_inputs for k in ks):
        raise IndexError("basis evaluation needs an input at every index")
    xi = lift_sequence(traj, ks)
    return dictionary.eval_many(traj.u[ks], xi)


@dataclass(frozen=True)
class DictionaryConstants:
    """Scalar constants consumed by the robust controller.

    Attributes:
        eps_star: Uniform bound on the basis approximation error.
        k_psi: Lipschitz gain of the basis functions in the lifted state.
        k_xi: Lipschitz gain of the synthetic input in the lifted state.
        k_w: Gain from the noise bound to the noise-induced evaluation error.
        g_matrix: Fitted (m, r) coefficient matrix.
        g_dagger_inf_norm: Infinity norm of its right inverse.
        omega_box: (lo, hi) arrays over stacked (input, lifted state) space
            on which every constant was estimated.
    """

    eps_star: float
    k_psi: float
    k_xi: float
    k_w: float
    g_matrix: np.ndarray
    g_dagger_inf_norm: float
    omega_box: tuple

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.g_matrix, dtype=float))
        object.__setattr__(self, "g_matrix", g)
        lo = np.asarray(self.omega_box[0], dtype=float).ravel()
        hi = np.asarray(self.omega_box[1], dtype=float).ravel()
        object.__setattr__(self, "omega_box", (lo, hi))
        for name in ("eps_star", "k_psi", "k_xi", "k_w", "g_dagger_inf_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def g_inf_norm(self) -> float:
        return float(np.abs(self.g_matrix).sum(axis=1).max())

    def to_dict(self) -> dict:
        return {
            "eps_star": float(self.eps_star),
            "k_psi": float(self.k_psi),
            "k_xi": float(self.k_xi),
            "k_w": float(self.k_w),
            "g_matrix": self.g_matrix.tolist(),
            "g_dagger_inf_norm": float(self.g_dagger_inf_norm),
            "g_inf_norm": self.g_inf_norm,
            "omega_box": [self.omega_box[0].tolist(), self.omega_box[1].tolist()],
            "estimation_note": (
                "sampling estimates with fixed inflation factors; may "
                "under-estimate true suprema outside the sampled box"
            ),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DictionaryConstants":
        return cls(
            eps_star=data["eps_star"],
            k_psi=data["k_psi"],
            k_xi=data["k_xi"],
            k_w=data["k_w"],
            g_matrix=np.asarray(data["g_matrix"]),
            g_dagger_inf_norm=data["g_dagger_inf_norm"],
            omega_box=(
                np.asarray(data["omega_box"][0]),
                np.asarray(data["omega_box"][1]),
            ),
        )


def shifted_targets(traj: Trajectory, k_range: Iterable[int]) -> np.ndarray:
    """Observable synthetic-input samples: v_{i,k} = y_i[k + d_i].

    Returns an (m, K) matrix of targets read off the stored outputs.
    """
    ks = list(k_range)
    out = np.empty((traj.m, len(ks)))
    for i, di in enumerate(traj.d):
        out[i] = traj.y[i][[k + di for k in ks]]
    return out


def fit_coefficients(dictionary: Dictionary, data: Trajectory) -> np.ndarray:
    """Fit the coefficient matrix by ridge-regularized least squares.

    The targets are the d_i-step-ahead output samples, which equal the
    synthetic input driving the chain form, so one linear regression per
    output row recovers the coefficients.  The ridge weight is
    ``1e-8 * trace(Psi Psi^T) / r`` for numerical conditioning.

    Raises:
        FitError: If there are not enough samples or the feature matrix is
            numerically rank deficient (names the deficient directions).
    """
    n_samples = data.n_inputs
    if n_samples <= dictionary.r:
        raise FitError(
            f"need more than r = {dictionary.r} samples, got {n_samples}"
        )
    psi = evaluate_sequence(dictionary, data, range(n_samples))
    targets = shifted_targets(data, range(n_samples))
    svals = np.linalg.svd(psi, compute_uv=False)
    if svals[-1] < RANK_TOL * svals[0]:
        u_left, s, _ = np.linalg.svd(psi, full_matrices=False)
        labels = dictionary.labels
        deficient = []
        for idx in np.where(s < RANK_TOL * s[0])[0]:
            weights = u_left[:, idx]
            top = np.argsort(-np.abs(weights))[:3]
            deficient.append(
                " + ".join(f"{weights[j]:+.3f}*{labels[j]}" for j in top)
            )
        raise FitError(
            "feature matrix rank deficient along: " + "; ".join(deficient)
        )
    gram = psi @ psi.T
    ridge = 1e-8 * np.trace(gram) / dictionary.r
    g = np.linalg.solve(gram + ridge * np.eye(dictionary.r), psi @ targets.T).T
    return g


def estimate_eps_star(
    dictionary: Dictionary, g_matrix: np.ndarray, validation: Trajectory
) -> float:
    """Bound the basis approximation error from a noise-free validation run.

    Returns 1.5x the largest absolute residual of the shifted-output
    identity; values below 1e-7 are reported as exactly zero.
    """
    if validation.noisy:
        raise ValueError("eps_star estimation requires noise-free validation")
    psi = evaluate_sequence(dictionary, validation, range(validation.n_inputs))
    targets = shifted_targets(validation, range(validation.n_inputs))
    resid = np.abs(targets - np.atleast_2d(g_matrix) @ psi)
    eps = EPS_STAR_INFLATION * float(resid.max()) if resid.size else 0.0
    return 0.0 if eps < EPS_STAR_ZERO_THRESHOLD else eps


def estimate_lipschitz(
    func: Callable[[np.ndarray, np.ndarray], np.ndarray],
    m: int,
    omega_box,
    n_samples: int = 2000,
    seed: int = 0,
) -> float:
    """Estimate a Lipschitz gain in the lifted state over a box.

    Samples pairs of lifted states at a shared input and maximizes the
    finite-difference ratio ``||g(u, xi') - g(u, xi)||_inf / ||xi' - xi||_inf``.
    Half the pairs span the box (captures the global secant ratio), half are
    small perturbations (captures the local derivative supremum).  The
    maximum is inflated by 1.25 and the draw is deterministic per seed.

    Args:
        func: Map (u, xi) -> vector whose gain in xi is estimated.
        m: Input dimension (the first ``m`` box coordinates are inputs).
        omega_box: (lo, hi) arrays over stacked (input, lifted state) space.
        n_samples: Number of sampled pairs.
        seed: RNG seed.
    """
    lo, hi = (np.asarray(b, dtype=float).ravel() for b in omega_box)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("omega box must be nondegenerate")
    u_lo, u_hi = lo[:m], hi[:m]
    xi_lo, xi_hi = lo[m:], hi[m:]
    local_scale = 1e-3 * float(np.max(xi_hi - xi_lo))
    rng = np.random.default_rng(seed)
    best = 0.0
    for trial in range(n_samples):
        u = rng.uniform(u_lo, u_hi)
        xi_a = rng.uniform(xi_lo, xi_hi)
        if trial % 2 == 0:
            xi_b = rng.uniform(xi_lo, xi_hi)
        else:
            xi_b = np.clip(
                xi_a + rng.uniform(-local_scale, local_scale, size=xi_a.shape),
                xi_lo,
                xi_hi,
            )
        h_inf = float(np.max(np.abs(xi_b - xi_a)))
        if h_inf == 0.0:
            continue
        diff = np.asarray(func(u, xi_b), dtype=float) - np.asarray(
            func(u, xi_a), dtype=float
        )
        best = max(best, float(np.max(np.abs(diff))) / h_inf)
    return LIPSCHITZ_INFLATION * best


def estimate_k_w(
    dictionary: Dictionary,
    g_matrix: np.ndarray,
    data: Trajectory,
    w_star: float,
    n_trials: int = 20,
    seed: int = 0,
) -> float:
    """Estimate the gain from the noise bound to the evaluation error.

    Draws noise realizations on the recorded trajectory and maximizes
    ``||G (Psi(u, xi) - Psi(u, xi_noisy))||_inf / w*``.  The approximation
    error evaluated at the clean point is realized as the observable plant
    residual and cancels, so the estimate covers the dictionary-induced part
    of the noise error; the 1.25 inflation absorbs the remainder.
    """
    if w_star < 0:
        raise ValueError("w_star must be nonnegative")
    if data.noisy:
        raise ValueError("k_w estimation starts from noise-free data")
    if w_star == 0:
        warnings.warn("w_star = 0: returning K_w = 0", stacklevel=2)
        return 0.0
    g = np.atleast_2d(np.asarray(g_matrix, dtype=float))
    ks = range(data.n_inputs)
    psi_clean = evaluate_sequence(dictionary, data, ks)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_trials):
        noisy = add_noise(data, w_star, seed=int(rng.integers(2**63 - 1)))
        psi_noisy = evaluate_sequence(dictionary, noisy, ks)
        delta = g @ (psi_clean - psi_noisy)
        best = max(best, float(np.max(np.abs(delta))) / w_star)
    return LIPSCHITZ_INFLATION * best


def g_dagger_inf_norm(g_matrix: np.ndarray) -> float:
    """Infinity norm of the right inverse G^T (G G^T)^{-1}.

    Raises:
        RankDeficientError: If the coefficient matrix is not full row rank
            (reports the offending smallest singular value).
    """
    g = np.atleast_2d(np.asarray(g_matrix, dtype=float))
    svals = np.linalg.svd(g, compute_uv=False)
    if svals[-1] < RANK_TOL * max(svals[0], 1.0):
        raise RankDeficientError(
            f"coefficient matrix not full row rank (sigma_min = {svals[-1]:.3e})"
        )
    g_dagger = g.T @ np.linalg.inv(g @ g.T)
    return float(np.abs(g_dagger).sum(axis=1).max())


def compute_c_pe(
    data: Trajectory, dictionary: Dictionary, depth: int, d_max: int
) -> float:
    """Squared spectral norm of the pseudo-inverse of the stacked data matrix.

    Stacks the depth-(L + d_max) Hankel of the basis evaluations on the
    recorded (possibly noisy) data over the single-block Hankel of the first
    ``N - L - d_max + 1`` lifted states, and returns ``1 / sigma_min^2`` of
    the stack.  Small values certify that trajectory combinations with small
    coefficient norm exist.
    """
    n_samples = data.n_inputs
    width = n_samples - depth - d_max + 1
    if width < 1:
        raise ValueError("data too short for the requested depth")
    psi = evaluate_sequence(dictionary, data, range(n_samples)).T
    h_psi = build_hankel(psi, depth + d_max).matrix
    xi = lift_sequence(data, range(width))
    h_xi = build_hankel(xi, 1).matrix
    stacked = np.vstack([h_psi, h_xi])
    svals = np.linalg.svd(stacked, compute_uv=False)
    rows = stacked.shape[0]
    if rows > stacked.shape[1] or svals[rows - 1] < RANK_TOL * svals[0]:
        raise RankDeficientError(
            f"stacked data matrix not full row rank "
            f"(sigma_min = {svals[min(rows, len(svals)) - 1]:.3e})"
        )
    return float(1.0 / svals[rows - 1] ** 2)


def omega_box_from_data(traj: Trajectory, margin: float = 0.25) -> tuple:
    """Bounding box of the visited (input, lifted state) samples, inflated.

    The margin widens each side by the given fraction of the span (with an
    absolute floor) so that constants estimated on the box remain valid for
    nearby closed-loop excursions.
    """
    xi = lift_sequence(traj, range(traj.n_inputs))
    z = np.hstack([traj.u, xi])
    lo = z.min(axis=0)
    hi = z.max(axis=0)
    span = np.maximum(hi - lo, 0.5)
    return (lo - margin * span, hi + margin * span)
