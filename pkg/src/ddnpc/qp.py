"""Dense convex quadratic programming via a primal-dual interior point method.

Solves
    min  0.5 x' P x + q' x
    s.t. A x = b,   G x <= h,
with P positive semidefinite.  The solver is a Mehrotra predictor-corrector
with an active-set polish pass that drives the KKT residuals to solver
tolerance on well-scaled desk problems.  Equality inconsistency is detected
up front; inequality infeasibility is certified by a phase-1 slack
minimization when the main iteration stalls.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERS = "max_iters"

_REG = 1e-12
_DIVERGENCE_NORM = 1e9


@dataclass
class QpProblem:
    """One convex QP instance; empty constraint blocks may be None."""

    P: np.ndarray
    q: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        nx = self.q.size
        if self.P.shape != (nx, nx):
            raise ValueError("P must be square and match q")
        if self.A is None or np.size(self.A) == 0:
            self.A = np.zeros((0, nx))
            self.b = np.zeros(0)
        else:
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
            self.b = np.asarray(self.b, dtype=float).ravel()
        if self.G is None or np.size(self.G) == 0:
            self.G = np.zeros((0, nx))
            self.h = np.zeros(0)
        else:
            self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
            self.h = np.asarray(self.h, dtype=float).ravel()
        if self.A.shape[1] != nx or self.A.shape[0] != self.b.size:
            raise ValueError("equality block dimensions inconsistent")
        if self.G.shape[1] != nx or self.G.shape[0] != self.h.size:
            raise ValueError("inequality block dimensions inconsistent")

    @property
    def nx(self) -> int:
        return self.q.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpSolution:
    """Primal-dual point with its KKT residuals."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    iterations: int
    objective: float
    residuals: dict = field(default_factory=dict)

    @property
    def kkt_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else np.inf


def _residuals(prob: QpProblem, x, y, z, s) -> dict:
    stat = prob.P @ x + prob.q
    if prob.A.shape[0]:
        stat = stat + prob.A.T @ y
    if prob.G.shape[0]:
        stat = stat + prob.G.T @ z
    res = {"stationarity": float(np.max(np.abs(stat)))}
    res["eq"] = (
        float(np.max(np.abs(prob.A @ x - prob.b))) if prob.A.shape[0] else 0.0
    )
    if prob.G.shape[0]:
        slack = prob.G @ x - prob.h
        res["ineq"] = float(max(0.0, np.max(slack)))
        res["dual_sign"] = float(max(0.0, -np.min(z)))
        res["comp"] = float(np.max(np.abs(z * slack)))
    else:
        res["ineq"] = 0.0
        res["dual_sign"] = 0.0
        res["comp"] = 0.0
    return res


def _step_length(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in (0, 1] keeping v + alpha * dv nonnegative."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _solve_kkt(M, A, rhs_x, rhs_y, delta):
    nx = M.shape[0]
    p = A.shape[0]
    K = np.zeros((nx + p, nx + p))
    K[:nx, :nx] = M + delta * np.eye(nx)
    if p:
        K[:nx, nx:] = A.T
        K[nx:, :nx] = A
        K[nx:, nx:] = -delta * np.eye(p)
    rhs = np.concatenate([rhs_x, rhs_y])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:nx], sol[nx:]


def _polish(prob: QpProblem, x, y, z, tol: float):
    """Re-solve the KKT system on the guessed active set.

    Returns a polished (x, y, z, s) or None when the guess is inconsistent.
    """
    mi = prob.G.shape[0]
    s_guess = prob.h - prob.G @ x if mi else np.zeros(0)
    active = np.where(z > np.maximum(s_guess, 0.0))[0] if mi else np.array([], int)
    nx, p, na = prob.nx, prob.A.shape[0], active.size
    G_a = prob.G[active]
    K = np.zeros((nx + p + na, nx + p + na))
    K[:nx, :nx] = prob.P
    K[:nx, nx : nx + p] = prob.A.T
    K[:nx, nx + p :] = G_a.T
    K[nx : nx + p, :nx] = prob.A
    K[nx + p :, :nx] = G_a
    rhs = np.concatenate([-prob.q, prob.b, prob.h[active]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x_p = sol[:nx]
    y_p = sol[nx : nx + p]
    z_p = np.zeros(mi)
    z_p[active] = sol[nx + p :]
    if np.any(z_p < -tol):
        return None
    z_p = np.maximum(z_p, 0.0)
    s_p = prob.h - prob.G @ x_p if mi else np.zeros(0)
    if mi and np.min(s_p) < -tol:
        return None
    return x_p, y_p, z_p, np.maximum(s_p, 0.0)


def _equality_consistent(A, b, tol) -> bool:
    if A.shape[0] == 0:
        return True
    x_ls, *_ = np.linalg.lstsq(A, b, rcond=None)
    return float(np.max(np.abs(A @ x_ls - b))) <= tol * (
        1.0 + float(np.max(np.abs(b))) if b.size else 1.0
    )


def _solve_equality_qp(prob: QpProblem, tol: float) -> QpSolution:
    nx, p = prob.nx, prob.A.shape[0]
    K = np.zeros((nx + p, nx + p))
    K[:nx, :nx] = prob.P
    if p:
        K[:nx, nx:] = prob.A.T
        K[nx:, :nx] = prob.A
    rhs = np.concatenate([-prob.q, prob.b])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x, y = sol[:nx], sol[nx:]
    res = _residuals(prob, x, y, np.zeros(0), np.zeros(0))
    status = OPTIMAL
    if res["stationarity"] > max(tol, 1e-7 * (1.0 + float(np.max(np.abs(prob.q))))):
        # Feasible (equalities consistent) but stationarity unattainable:
        # the objective decreases without bound along a null direction.
        status = UNBOUNDED
    return QpSolution(
        x=x,
        y=y,
        z=np.zeros(0),
        s=np.zeros(0),
        status=status,
        iterations=0,
        objective=prob.objective(x),
        residuals=res,
    )


def solve_qp(
    prob: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 100,
    _allow_phase1: bool = True,
) -> QpSolution:
    """Solve a convex QP to the requested absolute KKT tolerance.

    The returned status is one of ``optimal`` (all KKT residuals at or below
    ``tol``), ``infeasible`` (constraints shown inconsistent), ``unbounded``
    (objective decreases without bound), or ``max_iters``.  The method is
    deterministic: equal inputs give bit-identical outputs.
    """
    nx, p, mi = prob.nx, prob.A.shape[0], prob.G.shape[0]

    if not _equality_consistent(prob.A, prob.b, 1e-9):
        return QpSolution(
            x=np.zeros(nx),
            y=np.zeros(p),
            z=np.zeros(mi),
            s=np.zeros(mi),
            status=INFEASIBLE,
            iterations=0,
            objective=np.nan,
            residuals={},
        )
    if mi == 0:
        return _solve_equality_qp(prob, tol)

    P, q, A, b, G, h = prob.P, prob.q, prob.A, prob.b, prob.G, prob.h
    delta = _REG * (1.0 + float(np.max(np.abs(P))))

    # Starting point: equality-regularized stationary guess, unit slacks
    # pushed out to cover any initial inequality violation.
    x, _ = _solve_kkt(P + np.eye(nx), A, -q, b, delta)
    y = np.zeros(p)
    r0 = G @ x - h
    s = np.maximum(1.0, 1.5 * np.abs(r0))
    z = np.ones(mi)

    best = None
    status = MAX_ITERS
    it = 0
    for it in range(1, max_iter + 1):
        if not (
            np.all(np.isfinite(x))
            and np.all(np.isfinite(s))
            and np.all(np.isfinite(z))
            and np.min(s) > 0
        ):
            if best is not None:
                _, x, y, z, s = best
            break
        rd = P @ x + q + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = float(s @ z) / mi
        res_now = max(
            float(np.max(np.abs(rd))),
            float(np.max(np.abs(rp))) if p else 0.0,
            float(np.max(np.abs(rg))),
        )
        if best is None or res_now + mu < best[0]:
            best = (res_now + mu, x.copy(), y.copy(), z.copy(), s.copy())
        if res_now <= tol and mu <= 0.1 * tol:
            status = OPTIMAL
            break
        if (
            float(np.max(np.abs(x))) > _DIVERGENCE_NORM
            and prob.objective(x) < -_DIVERGENCE_NORM
        ):
            status = UNBOUNDED
            break

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            d = z / s
            M = P + (G.T * d) @ G
        if not np.all(np.isfinite(M)):
            break
        base_rhs = -rd - G.T @ (d * rg) + G.T @ z

        dx, dy = _solve_kkt(M, A, base_rhs, -rp, delta)
        ds = -rg - G @ dx
        dz = d * rg + d * (G @ dx) - z
        a_p = _step_length(s, ds)
        a_d = _step_length(z, dz)
        mu_aff = float((s + a_p * ds) @ (z + a_d * dz)) / mi
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            corr = (sigma * mu - ds * dz) / s
        if not np.all(np.isfinite(corr)):
            break
        dx, dy = _solve_kkt(M, A, base_rhs - G.T @ corr, -rp, delta)
        ds = -rg - G @ dx
        dz = d * rg + d * (G @ dx) - z + corr

        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(ds))):
            break
        tau = 0.995 if mu > 1e-6 else 0.9995
        a_p = min(1.0, tau * _step_length(s, ds))
        a_d = min(1.0, tau * _step_length(z, dz))
        x = x + a_p * dx
        s = s + a_p * ds
        y = y + a_d * dy
        z = z + a_d * dz

    if status == MAX_ITERS and best is not None:
        _, x, y, z, s = best

    polished = _polish(prob, x, y, z, tol)
    if polished is not None:
        x_p, y_p, z_p, s_p = polished
        res_p = _residuals(prob, x_p, y_p, z_p, s_p)
        res_c = _residuals(prob, x, y, z, s)
        if max(res_p.values()) <= max(res_c.values()):
            x, y, z, s = x_p, y_p, z_p, s_p
            if max(res_p.values()) <= tol:
                status = OPTIMAL

    res = _residuals(prob, x, y, z, s)
    if status == OPTIMAL and max(res.values()) > tol:
        status = MAX_ITERS

    if status == MAX_ITERS and _allow_phase1:
        verdict = _phase1_verdict(prob, tol)
        if verdict is not None:
            status = verdict

    return QpSolution(
        x=x,
        y=y,
        z=z,
        s=s,
        status=status,
        iterations=it,
        objective=prob.objective(x),
        residuals=res,
    )


def _phase1_verdict(prob: QpProblem, tol: float) -> Optional[str]:
    """Distinguish infeasibility from numerical stall via slack minimization.

    Minimizes the total inequality violation subject to the equalities; a
    strictly positive optimum certifies that no feasible point exists.
    """
    nx, mi = prob.nx, prob.G.shape[0]
    reg = 1e-8
    P1 = reg * np.eye(nx + mi)
    q1 = np.concatenate([np.zeros(nx), np.ones(mi)])
    A1 = np.hstack([prob.A, np.zeros((prob.A.shape[0], mi))])
    G1 = np.vstack(
        [
            np.hstack([prob.G, -np.eye(mi)]),
            np.hstack([np.zeros((mi, nx)), -np.eye(mi)]),
        ]
    )
    h1 = np.concatenate([prob.h, np.zeros(mi)])
    sol = solve_qp(
        QpProblem(P=P1, q=q1, A=A1, b=prob.b, G=G1, h=h1),
        tol=max(tol, 1e-9),
        _allow_phase1=False,
    )
    if sol.status != OPTIMAL:
        return None
    violation = float(np.sum(sol.x[nx:]))
    scale = 1.0 + float(np.max(np.abs(prob.h))) if mi else 1.0
    return INFEASIBLE if violation > 1e-6 * scale else None
