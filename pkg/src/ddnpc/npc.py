"""Robust data-driven predictive control program: assembly and SQP solve.

One program instance predicts inputs over the horizon and outputs over the
horizon extended by each channel's relative degree, ties the predictions to
columns of two data Hankel matrices through a slack variable, pins the past
window to recorded measurements, forces the terminal lifted state to zero,
bounds the slack by the uncertainty-dependent expression, and keeps inputs
in their box.  The nonlinearity enters only through the basis evaluations
on predicted (input, lifted state) pairs; an SQP loop replaces them by
first-order expansions and delegates each subproblem to the interior-point
QP solver.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import Dictionary, DictionaryConstants, evaluate_sequence
from .errors import PersistencyError
from .lifting import (
    PeCertificate,
    Trajectory,
    build_hankel,
    is_persistently_exciting,
    lift_sequence,
)
from . import qp as qpmod

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITERS = "max-iters"


@dataclass(frozen=True)
class NpcConfig:
    """Tuning of one predictive-control program.

    Attributes:
        horizon: Prediction horizon L (must be >= the largest relative degree).
        lambda_alpha: Weight on the squared column-combination norm, scaled
            at solve time by max(eps_star, w_star).
        lambda_sigma: Weight on the squared slack norm.
        Q, R: Positive-definite output and input stage-cost matrices.
        u_setpoint, y_setpoint: Equilibrium targeted by the stage cost.
        input_box: Component-wise input bounds (lo, hi).
        sqp_max_iters, sqp_tol: SQP iteration cap and step-norm tolerance.
        qp_tol: KKT tolerance of the embedded QP solver.
        fd_step: Forward-difference step for basis Jacobians.
        alpha_reg_rel: Floor on the alpha quadratic weight, relative to
            lambda_sigma, keeping the subproblems strictly convex when
            max(eps_star, w_star) = 0 (selects the minimum-norm combination;
            the reported cost never includes the floor term).
        l1_penalty_rel: Tiny linear weight, relative to lambda_sigma, on the
            l1 epigraph auxiliaries so they pin down |alpha| exactly.
    """

    horizon: int
    Q: np.ndarray
    R: np.ndarray
    input_box: tuple
    lambda_alpha: float = 1e3
    lambda_sigma: float = 1e3
    u_setpoint: np.ndarray = None
    y_setpoint: np.ndarray = None
    sqp_max_iters: int = 50
    sqp_tol: float = 1e-7
    qp_tol: float = 1e-8
    fd_step: float = 1e-6
    alpha_reg_rel: float = 1e-11
    l1_penalty_rel: float = 1e-12

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        m = R.shape[0]
        for name, mat in (("Q", Q), ("R", R)):
            if mat.shape != (m, m):
                raise ValueError(f"{name} must be ({m}, {m})")
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None
        us = (
            np.zeros(m)
            if self.u_setpoint is None
            else np.asarray(self.u_setpoint, dtype=float).ravel()
        )
        ys = (
            np.zeros(m)
            if self.y_setpoint is None
            else np.asarray(self.y_setpoint, dtype=float).ravel()
        )
        object.__setattr__(self, "u_setpoint", us)
        object.__setattr__(self, "y_setpoint", ys)
        lo = np.asarray(self.input_box[0], dtype=float).ravel()
        hi = np.asarray(self.input_box[1], dtype=float).ravel()
        object.__setattr__(self, "input_box", (lo, hi))
        if us.shape != (m,) or ys.shape != (m,):
            raise ValueError("setpoints must match the input/output dimension")
        if np.any(us <= lo) or np.any(us >= hi):
            raise ValueError("input setpoint must lie strictly inside the box")
        if self.lambda_alpha <= 0 or self.lambda_sigma <= 0:
            raise ValueError("regularization weights must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def m(self) -> int:
        return self.R.shape[0]


def default_config(plant, horizon: int, **overrides) -> NpcConfig:
    """Identity-weighted configuration for a built-in plant."""
    m = plant.m
    base = dict(
        horizon=horizon,
        Q=np.eye(m),
        R=np.eye(m),
        input_box=plant.input_box,
    )
    base.update(overrides)
    return NpcConfig(**base)


@dataclass
class NpcProblemData:
    """Data side of one program instance.

    ``hankel_psi`` holds depth-(L + d_max) windows of the basis evaluations
    on the recorded data, ``hankel_xi`` depth-(L + d_max + 1) windows of the
    recorded lifted states; their widths must agree.  The past window stores
    the last d_max applied inputs and noisy output measurements.
    """

    hankel_psi: np.ndarray
    hankel_xi: np.ndarray
    constants: DictionaryConstants
    w_star: float
    d: tuple
    u_past: np.ndarray
    y_past: np.ndarray
    pe_certificate: PeCertificate

    def __post_init__(self):
        self.d = tuple(int(di) for di in self.d)
        self.u_past = np.atleast_2d(np.asarray(self.u_past, dtype=float))
        self.y_past = np.atleast_2d(np.asarray(self.y_past, dtype=float))
        if self.hankel_psi.shape[1] != self.hankel_xi.shape[1]:
            raise ValueError("Hankel blocks must have equal widths")
        d_max = max(self.d)
        m = len(self.d)
        if self.u_past.shape != (d_max, m) or self.y_past.shape != (d_max, m):
            raise ValueError(f"past window must be ({d_max}, {m})")
        if self.w_star < 0:
            raise ValueError("w_star must be nonnegative")

    def with_past(self, u_past, y_past) -> "NpcProblemData":
        return replace(self, u_past=u_past, y_past=y_past)


def build_problem_data(
    data: Trajectory,
    dictionary: Dictionary,
    constants: DictionaryConstants,
    config: NpcConfig,
    w_star: float,
    u_past=None,
    y_past=None,
    require_pe: Optional[bool] = None,
) -> NpcProblemData:
    """Assemble the Hankel blocks and excitation certificate from data.

    The basis sequence is tested for persistency of excitation of order
    L + d_max + n and the certificate is attached to the returned data.  By
    default the check is enforced exactly when some uncertainty is present
    (noise bound or approximation error positive): in the doubly nominal
    case an exact dictionary evaluated on its own clean data reproduces the
    plant recursion linearly, which caps the Hankel rank below full for any
    order above one, so formal excitation is unattainable there while the
    trajectory representation itself still spans every plant window.  Pass
    ``require_pe`` to force either behaviour.
    """
    L = config.horizon
    d_max = data.d_max
    n = data.n
    if L < d_max:
        raise ValueError(f"horizon {L} must be at least d_max = {d_max}")
    psi_seq = evaluate_sequence(dictionary, data, range(data.n_inputs)).T
    cert = is_persistently_exciting(psi_seq, L + d_max + n)
    if require_pe is None:
        require_pe = max(constants.eps_star, w_star) > 0
    if not cert.satisfied:
        message = (
            f"data not persistently exciting of order {L + d_max + n} "
            f"(rank {cert.rank} < {cert.required_rank})"
        )
        if require_pe:
            raise PersistencyError(message)
        warnings.warn(message, stacklevel=2)
    hankel_psi = build_hankel(psi_seq, L + d_max).matrix
    xi_seq = lift_sequence(data, range(data.n_inputs + 1))
    hankel_xi = build_hankel(xi_seq, L + d_max + 1).matrix
    m = data.m
    if u_past is None:
        u_past = np.zeros((d_max, m))
    if y_past is None:
        y_past = np.zeros((d_max, m))
    return NpcProblemData(
        hankel_psi=hankel_psi,
        hankel_xi=hankel_xi,
        constants=constants,
        w_star=float(w_star),
        d=data.d,
        u_past=u_past,
        y_past=y_past,
        pe_certificate=cert,
    )


def stage_cost(config: NpcConfig, u_bar_k, y_bar_k) -> float:
    """Quadratic penalty on the deviation from the setpoints."""
    du = np.asarray(u_bar_k, dtype=float).ravel() - config.u_setpoint
    dy = np.asarray(y_bar_k, dtype=float).ravel() - config.y_setpoint
    return float(du @ config.R @ du + dy @ config.Q @ dy)


def slack_bound_rhs(
    constants: DictionaryConstants, w_star: float, alpha_l1: float
) -> float:
    """Admissible per-step slack magnitude for a given combination norm."""
    if alpha_l1 < 0:
        raise ValueError("alpha_l1 must be nonnegative")
    return float(
        constants.k_psi * w_star
        + (constants.eps_star + constants.k_w * w_star)
        * constants.g_dagger_inf_norm
        * (1.0 + alpha_l1)
    )


@dataclass
class NpcSolution:
    """Solution of one program instance.

    ``u_bar`` covers prediction steps -d_max..L-1 (the first d_max rows are
    the pinned past window); ``y_bar[i]`` covers -d_max..L+d_i-1 with the
    last d_i entries equal to zero by the terminal constraint.  ``cost`` is
    the program objective recomputed from the returned variables.
    """

    u_bar: np.ndarray
    y_bar: tuple
    alpha: np.ndarray
    sigma_psi: np.ndarray
    sigma_xi: np.ndarray
    cost: float
    status: str
    kkt_residual: float
    sqp_iters: int
    d: tuple
    horizon: int
    merit_trace: list = field(default_factory=list)

    @property
    def d_max(self) -> int:
        return max(self.d)

    @property
    def sigma(self) -> np.ndarray:
        return np.concatenate([self.sigma_psi, self.sigma_xi])

    @property
    def sigma_inf(self) -> float:
        return float(np.max(np.abs(self.sigma))) if self.sigma.size else 0.0

    @property
    def alpha_l1(self) -> float:
        return float(np.sum(np.abs(self.alpha)))

    @property
    def alpha_l2(self) -> float:
        return float(np.linalg.norm(self.alpha))

    @property
    def u_applied(self) -> np.ndarray:
        """First d_max predicted inputs, the ones a receding horizon applies."""
        return self.u_bar[self.d_max : 2 * self.d_max]

    def y_bar_at(self, i: int, k: int) -> float:
        """Predicted output of channel i at prediction step k."""
        return float(self.y_bar[i][k + self.d_max])


class NpcProblem:
    """Assembled program: variable layout, constant blocks, linearization."""

    def __init__(self, data: NpcProblemData, config: NpcConfig, dictionary: Dictionary):
        self.data = data
        self.config = config
        self.dictionary = dictionary
        self.d = data.d
        self.m = len(self.d)
        self.n = sum(self.d)
        self.d_max = max(self.d)
        self.r = dictionary.r
        self.L = config.horizon
        if self.L < self.d_max:
            raise ValueError("horizon must be at least d_max")
        if dictionary.m != self.m or dictionary.n != self.n:
            raise ValueError("dictionary dimensions do not match the data")
        self.width = data.hankel_psi.shape[1]
        L, m, n, r, d_max = self.L, self.m, self.n, self.r, self.d_max
        if data.hankel_psi.shape[0] != r * (L + d_max):
            raise ValueError("basis Hankel depth does not match the horizon")
        if data.hankel_xi.shape[0] != n * (L + d_max + 1):
            raise ValueError("state Hankel depth does not match the horizon")

        self.n_u = L * m
        self.n_y = L * m
        self.n_sigma_psi = r * (L + d_max)
        self.n_sigma_xi = n * (L + d_max + 1)
        self.n_sigma = self.n_sigma_psi + self.n_sigma_xi
        self.n_alpha = self.width
        self.n_aux = self.width
        self.n_vars = self.n_u + self.n_y + self.n_alpha + self.n_sigma + self.n_aux
        o = 0
        self.sl_u = slice(o, o + self.n_u)
        o += self.n_u
        self.sl_y = slice(o, o + self.n_y)
        o += self.n_y
        self.sl_alpha = slice(o, o + self.n_alpha)
        o += self.n_alpha
        self.sl_sigma = slice(o, o + self.n_sigma)
        self.sl_sigma_psi = slice(o, o + self.n_sigma_psi)
        self.sl_sigma_xi = slice(o + self.n_sigma_psi, o + self.n_sigma)
        o += self.n_sigma
        self.sl_aux = slice(o, o + self.n_aux)

        self._build_output_alias()
        self._build_objective()
        self._build_linear_equalities()
        self._build_inequalities()

    # -- constant structure -------------------------------------------------

    def _y_entry(self, i: int, tau: int):
        """Predicted output of channel i at step tau: variable column or value."""
        if tau < 0:
            return None, self.data.y_past[tau + self.d_max, i]
        if tau < self.L:
            return tau * self.m + i, 0.0
        return None, 0.0  # terminal constraint pins these to zero

    def _build_output_alias(self):
        """Selection map from free outputs to stacked lifted states."""
        L, n, d_max = self.L, self.n, self.d_max
        rows = n * (L + d_max + 1)
        self.S_y = np.zeros((rows, self.n_y))
        self.xi_const = np.zeros(rows)
        starts = np.cumsum([0] + list(self.d))[:-1]
        for k in range(-d_max, L + 1):
            base = (k + d_max) * n
            for i, di in enumerate(self.d):
                for j in range(di):
                    row = base + starts[i] + j
                    col, value = self._y_entry(i, k + j)
                    if col is None:
                        self.xi_const[row] = value
                    else:
                        self.S_y[row, col] = 1.0

    def _build_objective(self):
        cfg = self.config
        L, m = self.L, self.m
        self.uncertainty = max(self.data.constants.eps_star, self.data.w_star)
        self.alpha_weight = max(
            cfg.lambda_alpha * self.uncertainty, cfg.alpha_reg_rel * cfg.lambda_sigma
        )
        self.aux_penalty = cfg.l1_penalty_rel * cfg.lambda_sigma
        P = np.zeros((self.n_vars, self.n_vars))
        q = np.zeros(self.n_vars)
        for k in range(L):
            iu = self.sl_u.start + k * m
            iy = self.sl_y.start + k * m
            P[iu : iu + m, iu : iu + m] = 2.0 * cfg.R
            P[iy : iy + m, iy : iy + m] = 2.0 * cfg.Q
            q[iu : iu + m] = -2.0 * cfg.R @ cfg.u_setpoint
            q[iy : iy + m] = -2.0 * cfg.Q @ cfg.y_setpoint
        idx = np.arange(self.sl_alpha.start, self.sl_alpha.stop)
        P[idx, idx] = 2.0 * self.alpha_weight
        idx = np.arange(self.sl_sigma.start, self.sl_sigma.stop)
        P[idx, idx] = 2.0 * cfg.lambda_sigma
        q[self.sl_aux] = self.aux_penalty
        self.P0 = P
        self.q0 = q
        self.obj_const = float(
            L * (cfg.u_setpoint @ cfg.R @ cfg.u_setpoint)
            + L * (cfg.y_setpoint @ cfg.Q @ cfg.y_setpoint)
        )

    def _build_linear_equalities(self):
        """Lifted-state block of the data-consistency constraint (linear)."""
        rows = self.n_sigma_xi
        A = np.zeros((rows, self.n_vars))
        A[:, self.sl_y] = self.S_y
        A[:, self.sl_sigma_xi] = np.eye(rows)
        A[:, self.sl_alpha] = -self.data.hankel_xi
        self.A_xi = A
        self.b_xi = -self.xi_const

    def _build_inequalities(self):
        c = self.data.constants
        w_star = self.data.w_star
        c1 = (c.eps_star + c.k_w * w_star) * c.g_dagger_inf_norm
        c0 = c.k_psi * w_star + c1
        self.slack_c0, self.slack_c1 = c0, c1
        self.sigma_forced_zero = c0 == 0.0

        blocks_G, blocks_h = [], []
        # l1 epigraph: +-alpha <= aux
        for sign in (+1.0, -1.0):
            Gb = np.zeros((self.n_alpha, self.n_vars))
            idx = np.arange(self.n_alpha)
            Gb[idx, self.sl_alpha.start + idx] = sign
            Gb[idx, self.sl_aux.start + idx] = -1.0
            blocks_G.append(Gb)
            blocks_h.append(np.zeros(self.n_alpha))
        if not self.sigma_forced_zero:
            # +-sigma_j <= c0 + c1 * sum(aux)
            for sign in (+1.0, -1.0):
                Gb = np.zeros((self.n_sigma, self.n_vars))
                idx = np.arange(self.n_sigma)
                Gb[idx, self.sl_sigma.start + idx] = sign
                Gb[:, self.sl_aux] = -c1
                blocks_G.append(Gb)
                blocks_h.append(np.full(self.n_sigma, c0))
        lo, hi = self.config.input_box
        Gb = np.zeros((self.n_u, self.n_vars))
        idx = np.arange(self.n_u)
        Gb[idx, self.sl_u.start + idx] = 1.0
        blocks_G.append(Gb)
        blocks_h.append(np.tile(hi, self.L))
        Gb = np.zeros((self.n_u, self.n_vars))
        Gb[idx, self.sl_u.start + idx] = -1.0
        blocks_G.append(Gb)
        blocks_h.append(np.tile(-lo, self.L))
        self.G_ineq = np.vstack(blocks_G)
        self.h_ineq = np.concatenate(blocks_h)

        if self.sigma_forced_zero:
            A = np.zeros((self.n_sigma, self.n_vars))
            idx = np.arange(self.n_sigma)
            A[idx, self.sl_sigma.start + idx] = 1.0
            self.A_sigma_zero = A
        else:
            self.A_sigma_zero = np.zeros((0, self.n_vars))

    # -- evaluation helpers --------------------------------------------------

    def u_all(self, z: np.ndarray) -> np.ndarray:
        """Predicted inputs for steps -d_max..L-1 as an (L + d_max, m) array."""
        free = z[self.sl_u].reshape(self.L, self.m)
        return np.vstack([self.data.u_past, free])

    def xi_all(self, z: np.ndarray) -> np.ndarray:
        """Predicted lifted states for steps -d_max..L as (L + d_max + 1, n)."""
        flat = self.S_y @ z[self.sl_y] + self.xi_const
        return flat.reshape(self.L + self.d_max + 1, self.n)

    def psi_stack(self, z: np.ndarray) -> np.ndarray:
        """Basis evaluations on the predicted pairs, stacked to r(L + d_max)."""
        u_all = self.u_all(z)
        xi_all = self.xi_all(z)
        out = np.empty(self.n_sigma_psi)
        for j in range(self.L + self.d_max):
            out[j * self.r : (j + 1) * self.r] = self.dictionary(u_all[j], xi_all[j])
        return out

    def equality_residuals(self, z: np.ndarray) -> np.ndarray:
        """True (nonlinear) residuals of the data-consistency constraint."""
        h_alpha_psi = self.data.hankel_psi @ z[self.sl_alpha]
        res_psi = self.psi_stack(z) + z[self.sl_sigma_psi] - h_alpha_psi
        res_xi = self.A_xi @ z - self.b_xi
        res = [res_psi, res_xi]
        if self.sigma_forced_zero:
            res.append(z[self.sl_sigma])
        return np.concatenate(res)

    def objective_qp(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P0 @ z + self.q0 @ z + self.obj_const)

    def objective_true(self, z: np.ndarray) -> float:
        """Program cost recomputed literally from the variables."""
        cfg = self.config
        u = z[self.sl_u].reshape(self.L, self.m)
        y = z[self.sl_y].reshape(self.L, self.m)
        total = sum(stage_cost(cfg, u[k], y[k]) for k in range(self.L))
        total += cfg.lambda_alpha * self.uncertainty * float(
            z[self.sl_alpha] @ z[self.sl_alpha]
        )
        total += cfg.lambda_sigma * float(z[self.sl_sigma] @ z[self.sl_sigma])
        return float(total)

    def merit(self, z: np.ndarray, penalty: float) -> float:
        viol = float(np.sum(np.abs(self.equality_residuals(z))))
        viol += float(np.sum(np.maximum(self.G_ineq @ z - self.h_ineq, 0.0)))
        return self.objective_qp(z) + penalty * viol

    # -- linearization -------------------------------------------------------

    def qp_at(self, z_lin: np.ndarray) -> qpmod.QpProblem:
        """Convex subproblem with the basis map expanded around ``z_lin``."""
        L, m, n, r, d_max = self.L, self.m, self.n, self.r, self.d_max
        h = self.config.fd_step
        u_all = self.u_all(z_lin)
        xi_all = self.xi_all(z_lin)
        A1 = np.zeros((self.n_sigma_psi, self.n_vars))
        b1 = np.zeros(self.n_sigma_psi)
        y0 = z_lin[self.sl_y]
        for j in range(L + d_max):
            k = j - d_max
            rows = slice(j * r, (j + 1) * r)
            u_j, xi_j = u_all[j], xi_all[j]
            base = self.dictionary(u_j, xi_j)
            J_xi = np.empty((r, n))
            for c in range(n):
                xi_p = xi_j.copy()
                xi_p[c] += h
                J_xi[:, c] = (self.dictionary(u_j, xi_p) - base) / h
            S_k = self.S_y[j * n : (j + 1) * n, :]
            A1[rows, self.sl_y] = J_xi @ S_k
            rhs = -base + J_xi @ (S_k @ y0)
            if k >= 0:
                J_u = np.empty((r, m))
                for c in range(m):
                    u_p = u_j.copy()
                    u_p[c] += h
                    J_u[:, c] = (self.dictionary(u_p, xi_j) - base) / h
                cols = slice(
                    self.sl_u.start + k * m, self.sl_u.start + (k + 1) * m
                )
                A1[rows, cols] = J_u
                rhs = rhs + J_u @ u_j
            idx = np.arange(j * r, (j + 1) * r)
            A1[idx, self.sl_sigma_psi.start + idx] = 1.0
            A1[rows, self.sl_alpha] = -self.data.hankel_psi[rows, :]
            b1[rows] = rhs
        A = np.vstack([A1, self.A_xi, self.A_sigma_zero])
        b = np.concatenate(
            [b1, self.b_xi, np.zeros(self.A_sigma_zero.shape[0])]
        )
        return qpmod.QpProblem(
            P=self.P0, q=self.q0, A=A, b=b, G=self.G_ineq, h=self.h_ineq
        )

    # -- starting points -----------------------------------------------------

    def _alpha_least_squares(self, z: np.ndarray) -> np.ndarray:
        stacked = np.vstack([self.data.hankel_psi, self.data.hankel_xi])
        rhs = np.concatenate(
            [self.psi_stack(z), self.S_y @ z[self.sl_y] + self.xi_const]
        )
        alpha, *_ = np.linalg.lstsq(stacked, rhs, rcond=None)
        return alpha

    def _with_consistent_tail(self, z: np.ndarray) -> np.ndarray:
        """Fill alpha/sigma/aux from the current input-output guess."""
        z = z.copy()
        alpha = self._alpha_least_squares(z)
        z[self.sl_alpha] = alpha
        sigma_psi = self.data.hankel_psi @ alpha - self.psi_stack(z)
        sigma_xi = self.data.hankel_xi @ alpha - (
            self.S_y @ z[self.sl_y] + self.xi_const
        )
        if self.sigma_forced_zero:
            sigma_psi = np.zeros_like(sigma_psi)
            sigma_xi = np.zeros_like(sigma_xi)
        z[self.sl_sigma_psi] = sigma_psi
        z[self.sl_sigma_xi] = sigma_xi
        z[self.sl_aux] = np.abs(alpha)
        return z

    def initial_point(self, init: Optional[NpcSolution] = None) -> np.ndarray:
        z = np.zeros(self.n_vars)
        cfg = self.config
        u0 = np.tile(cfg.u_setpoint, self.L)
        y0 = np.tile(cfg.y_setpoint, self.L)
        if init is not None and init.d == self.d and init.horizon == self.L:
            d_max, m = self.d_max, self.m
            u_shift = np.tile(cfg.u_setpoint, (self.L, 1))
            u_shift[: self.L - d_max] = init.u_bar[2 * d_max :]
            u0 = u_shift.ravel()
            y_shift = np.tile(cfg.y_setpoint, (self.L, 1))
            for tau in range(self.L):
                for i in range(m):
                    src = tau + d_max
                    if src <= self.L + self.d[i] - 1:
                        y_shift[tau, i] = init.y_bar_at(i, src)
            y0 = y_shift.ravel()
        z[self.sl_u] = u0
        z[self.sl_y] = y0
        return self._with_consistent_tail(z)

    # -- solution extraction ---------------------------------------------------

    def extract_solution(
        self, z: np.ndarray, status: str, kkt: float, iters: int, merit_trace
    ) -> NpcSolution:
        """Package variables; the slack is recomputed as the exact residual."""
        z = z.copy()
        alpha = z[self.sl_alpha]
        sigma_psi = self.data.hankel_psi @ alpha - self.psi_stack(z)
        sigma_xi = self.data.hankel_xi @ alpha - (
            self.S_y @ z[self.sl_y] + self.xi_const
        )
        z[self.sl_sigma_psi] = sigma_psi
        z[self.sl_sigma_xi] = sigma_xi
        u_bar = self.u_all(z)
        y_free = z[self.sl_y].reshape(self.L, self.m)
        y_bar = []
        for i, di in enumerate(self.d):
            chan = np.empty(self.L + self.d_max + di)
            for k in range(-self.d_max, self.L + di):
                col, const = self._y_entry(i, k)
                chan[k + self.d_max] = const if col is None else y_free[k, i]
            y_bar.append(chan)
        return NpcSolution(
            u_bar=u_bar,
            y_bar=tuple(y_bar),
            alpha=alpha,
            sigma_psi=sigma_psi,
            sigma_xi=sigma_xi,
            cost=self.objective_true(z),
            status=status,
            kkt_residual=kkt,
            sqp_iters=iters,
            d=self.d,
            horizon=self.L,
            merit_trace=merit_trace,
        )


def assemble(
    data: NpcProblemData, config: NpcConfig, dictionary: Dictionary
) -> NpcProblem:
    """Build one program instance from its data and configuration."""
    return NpcProblem(data, config, dictionary)


def solve(problem: NpcProblem, init: Optional[NpcSolution] = None) -> NpcSolution:
    """SQP iteration around the embedded convex QP solver.

    Each subproblem expands the basis map to first order at the current
    iterate; steps are accepted under an l1-penalty merit line search and the
    loop stops when the full step is below the step tolerance.  The returned
    slack is the exact constraint residual at the final iterate and the
    reported cost is the program objective recomputed from the variables.
    """
    cfg = problem.config
    z = problem.initial_point(init)
    penalty = 10.0
    merit_trace = []
    kkt = np.inf
    status = STATUS_MAX_ITERS
    accepted = 0
    for _ in range(cfg.sqp_max_iters):
        subproblem = problem.qp_at(z)
        qsol = qpmod.solve_qp(subproblem, tol=cfg.qp_tol)
        if qsol.status == qpmod.INFEASIBLE:
            return problem.extract_solution(
                z, STATUS_INFEASIBLE, np.inf, accepted, merit_trace
            )
        if qsol.status not in (qpmod.OPTIMAL, qpmod.MAX_ITERS):
            return problem.extract_solution(
                z, STATUS_MAX_ITERS, qsol.kkt_residual, accepted, merit_trace
            )
        kkt = qsol.kkt_residual
        step = qsol.x - z
        step_norm = float(np.max(np.abs(step))) if step.size else 0.0
        if step_norm < cfg.sqp_tol:
            status = STATUS_OPTIMAL
            break
        mult = 1.0
        if qsol.y.size:
            mult = max(mult, float(np.max(np.abs(qsol.y))))
        if qsol.z.size:
            mult = max(mult, float(np.max(np.abs(qsol.z))))
        penalty = max(penalty, 2.0 * mult + 1.0)
        phi0 = problem.merit(z, penalty)
        grad_f = problem.P0 @ z + problem.q0
        viol0 = phi0 - problem.objective_qp(z)
        descent = float(grad_f @ step) - viol0
        descent = min(descent, -1e-16)
        t = 1.0
        accepted_step = False
        for _ls in range(30):
            phi_t = problem.merit(z + t * step, penalty)
            if phi_t <= phi0 + 1e-4 * t * descent:
                merit_trace.append((phi0, phi_t))
                z = z + t * step
                accepted = accepted + 1
                accepted_step = True
                break
            t *= 0.5
        if not accepted_step:
            # No merit progress possible: either converged to tolerance or stuck.
            res = float(np.max(np.abs(problem.equality_residuals(z))))
            status = STATUS_OPTIMAL if res <= 1e2 * cfg.sqp_tol else STATUS_MAX_ITERS
            break
    else:
        status = STATUS_MAX_ITERS
    return problem.extract_solution(z, status, kkt, accepted, merit_trace)


def write_solution_csv(solution: NpcSolution, path) -> None:
    """Per-solve dump: prediction table plus a scalar footer."""
    path = Path(path)
    m = len(solution.d)
    d_max = solution.d_max
    L = solution.horizon
    r_rows = solution.sigma_psi.size // (L + d_max)
    n = solution.sigma_xi.size // (L + d_max + 1)
    header = (
        ["k"]
        + [f"u_bar_{i + 1}" for i in range(m)]
        + [f"y_bar_{i + 1}" for i in range(m)]
        + ["sigma_inf_norm"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(-d_max, L + d_max):
            row = [k]
            for i in range(m):
                row.append(repr(solution.u_bar[k + d_max, i]) if k < L else "")
            for i in range(m):
                if k < L + solution.d[i]:
                    row.append(repr(solution.y_bar_at(i, k)))
                else:
                    row.append("")
            pieces = []
            if -d_max <= k < L:
                j = k + d_max
                pieces.append(solution.sigma_psi[j * r_rows : (j + 1) * r_rows])
            if -d_max <= k <= L:
                j = k + d_max
                pieces.append(solution.sigma_xi[j * n : (j + 1) * n])
            if pieces:
                row.append(repr(float(np.max(np.abs(np.concatenate(pieces))))))
            else:
                row.append("")
            writer.writerow(row)
        writer.writerow([])
        writer.writerow(["J", "alpha_l1", "alpha_l2", "kkt", "iters", "status"])
        writer.writerow(
            [
                repr(solution.cost),
                repr(solution.alpha_l1),
                repr(solution.alpha_l2),
                repr(solution.kkt_residual),
                solution.sqp_iters,
                solution.status,
            ]
        )
