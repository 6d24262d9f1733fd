"""Receding-horizon loop, deviation-bound verification and stability sweeps.

The controller solves the predictive program every d_max plant steps and
applies the first d_max optimal inputs.  Each step logs the clean and noisy
lifted states, the optimal cost, a Lyapunov value, the solution norms the
robustness bounds consume, and the margin of the open-loop output-deviation
bound verified against a clean rollout of the optimal input sequence.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import npc, plants
from .basis import Dictionary, DictionaryConstants
from .lifting import Trajectory


def poly_p(k: int, gain: float) -> float:
    """Geometric accumulation 1 + K + ... + K^k of a Lipschitz gain."""
    if k < 0:
        raise ValueError("polynomial order must be nonnegative")
    if gain < 0:
        raise ValueError("gain must be nonnegative")
    if abs(gain - 1.0) < 1e-12:
        return float(k + 1)
    return float((gain ** (k + 1) - 1.0) / (gain - 1.0))


def lemma1_bound(
    k: int,
    d_i: int,
    d_max: int,
    constants: DictionaryConstants,
    w_star: float,
    alpha_l1: float,
    sigma_inf: float,
    g_inf_norm: float,
) -> float:
    """Bound on the open-loop output deviation at prediction step k.

    The polynomial accumulation of the state Lipschitz gain multiplies the
    uncertainty budget: approximation error amplified by the combination
    norm, noise carried through the data and the window, and the slack
    magnitude scaled by the coefficient-matrix norm.
    """
    power = k + d_max - d_i
    bracket = (
        constants.eps_star * (1.0 + alpha_l1)
        + (1.0 + constants.k_w) * w_star * alpha_l1
        + (1.0 + g_inf_norm) * sigma_inf
    )
    return poly_p(power, constants.k_xi) * bracket


def verify_lemma1(
    plant: plants.PlantModel,
    x_t,
    solution: npc.NpcSolution,
    constants: DictionaryConstants,
    w_star: float,
):
    """Margins of the deviation bound for one solved step.

    Simulates the full optimal input sequence open loop from the true state,
    measures the per-channel deviation from the predicted outputs over
    prediction steps 0..L+d_i-1, and returns ``bound - measured`` per entry
    (one array per channel).  A negative margin is a bound violation.
    """
    horizon = solution.horizon
    rollout = plants.simulate(plant, x_t, solution.u_bar[solution.d_max :])
    g_inf = constants.g_inf_norm
    margins = []
    deviations = []
    for i, d_i in enumerate(plant.d):
        measured = np.abs(
            rollout.y[i] - solution.y_bar[i][solution.d_max :]
        )
        bound = np.array(
            [
                lemma1_bound(
                    k,
                    d_i,
                    solution.d_max,
                    constants,
                    w_star,
                    solution.alpha_l1,
                    solution.sigma_inf,
                    g_inf,
                )
                for k in range(horizon + d_i)
            ]
        )
        margins.append(bound - measured)
        deviations.append(measured)
    return margins, deviations


@dataclass
class ClosedLoopStep:
    """Log of one controller invocation and the d_max plant steps it drives."""

    t: int
    x_t: np.ndarray
    xi_clean: np.ndarray
    xi_noisy: Optional[np.ndarray]
    u_applied: Optional[np.ndarray]
    cost: float
    lyapunov: float
    alpha_l1: float
    alpha_l2: float
    sigma_inf: float
    feasible: bool
    kkt_residual: float
    sqp_iters: int
    solve_ms: float
    lemma1_min_margin: float
    deviation_max: float
    u_bar: Optional[np.ndarray] = None
    y_bar: Optional[tuple] = None
    margins: Optional[list] = None

    @property
    def xi_norm(self) -> float:
        return float(np.linalg.norm(self.xi_clean))


@dataclass
class ClosedLoopRecord:
    """Per-step log of one receding-horizon run."""

    plant_name: str
    d: tuple
    horizon: int
    w_star: float
    seed: int
    c3: float
    n_steps: int
    steps: list = field(default_factory=list)
    status: str = "completed"

    @property
    def d_max(self) -> int:
        return max(self.d)

    def signature(self) -> tuple:
        """Deterministic content of the record (wall times excluded)."""
        rows = []
        for s in self.steps:
            rows.append(
                (
                    s.t,
                    tuple(s.x_t.tolist()),
                    tuple(s.xi_clean.tolist()),
                    tuple(s.xi_noisy.tolist()) if s.xi_noisy is not None else None,
                    tuple(s.u_applied.ravel().tolist())
                    if s.u_applied is not None
                    else None,
                    s.cost,
                    s.lyapunov,
                    s.alpha_l1,
                    s.sigma_inf,
                    s.feasible,
                    s.lemma1_min_margin,
                )
            )
        return (self.plant_name, self.status, tuple(rows))

    def to_dict(self) -> dict:
        steps = []
        for s in self.steps:
            steps.append(
                {
                    "t": s.t,
                    "x_t": s.x_t.tolist(),
                    "xi_clean": s.xi_clean.tolist(),
                    "xi_noisy": None
                    if s.xi_noisy is None
                    else s.xi_noisy.tolist(),
                    "u_applied": None
                    if s.u_applied is None
                    else s.u_applied.tolist(),
                    "J": s.cost,
                    "V": s.lyapunov,
                    "alpha_l1": s.alpha_l1,
                    "alpha_l2": s.alpha_l2,
                    "sigma_inf": s.sigma_inf,
                    "feasible": s.feasible,
                    "kkt": s.kkt_residual,
                    "sqp_iters": s.sqp_iters,
                    "solve_ms": s.solve_ms,
                    "lemma1_min_margin": s.lemma1_min_margin,
                    "deviation_max": s.deviation_max,
                    "u_bar": None if s.u_bar is None else s.u_bar.tolist(),
                    "y_bar": None
                    if s.y_bar is None
                    else [yi.tolist() for yi in s.y_bar],
                }
            )
        return {
            "plant": self.plant_name,
            "d": list(self.d),
            "horizon": self.horizon,
            "w_star": self.w_star,
            "seed": self.seed,
            "c3": self.c3,
            "n_steps": self.n_steps,
            "status": self.status,
            "steps": steps,
        }


def run_closed_loop(
    plant: plants.PlantModel,
    dictionary: Dictionary,
    constants: DictionaryConstants,
    data: Trajectory,
    config: npc.NpcConfig,
    x0,
    w_star: float,
    seed: int,
    n_steps: int,
    c3: float = 1.0,
    require_pe: Optional[bool] = None,
    verify_bound: bool = True,
) -> ClosedLoopRecord:
    """Run the d_max-step receding-horizon loop.

    A d_max-step zero-input warm-up from ``x0`` fills the first past window.
    At every multiple of d_max the program is assembled with the latest
    window, solved (warm started from the shifted previous solution), the
    first d_max optimal inputs are applied, and the step is logged.  On an
    infeasible or failed solve the step is recorded and the loop halts with
    status ``infeasible``.  Runs with equal arguments produce bit-identical
    records apart from wall-clock timings.
    """
    d_max = plant.d_max
    if n_steps < d_max or n_steps % d_max != 0:
        raise ValueError(f"n_steps must be a positive multiple of d_max = {d_max}")
    rng = np.random.default_rng(seed)
    base_data = npc.build_problem_data(
        data, dictionary, constants, config, w_star, require_pe=require_pe
    )
    record = ClosedLoopRecord(
        plant_name=plant.name,
        d=plant.d,
        horizon=config.horizon,
        w_star=float(w_star),
        seed=int(seed),
        c3=float(c3),
        n_steps=int(n_steps),
    )

    def measure(x):
        y = plants.output(plant, x)
        noise = rng.uniform(-w_star, w_star, size=plant.m)
        return y + noise

    x = np.asarray(x0, dtype=float).ravel()
    u_window = []
    y_window = []
    for _ in range(d_max):
        y_window.append(measure(x))
        u_window.append(np.zeros(plant.m))
        x = plants.step(plant, x, np.zeros(plant.m))

    previous = None
    for solve_idx in range(n_steps // d_max):
        t = solve_idx * d_max
        x_t = x.copy()
        xi_clean = plants.lift_state(plant, x_t)
        pdata = base_data.with_past(np.asarray(u_window), np.asarray(y_window))
        problem = npc.assemble(pdata, config, dictionary)
        t0 = time.perf_counter()
        solution = npc.solve(problem, init=previous)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        feasible = solution.status == npc.STATUS_OPTIMAL
        if not feasible:
            record.steps.append(
                ClosedLoopStep(
                    t=t,
                    x_t=x_t,
                    xi_clean=xi_clean,
                    xi_noisy=None,
                    u_applied=None,
                    cost=np.nan,
                    lyapunov=np.nan,
                    alpha_l1=np.nan,
                    alpha_l2=np.nan,
                    sigma_inf=np.nan,
                    feasible=False,
                    kkt_residual=solution.kkt_residual,
                    sqp_iters=solution.sqp_iters,
                    solve_ms=solve_ms,
                    lemma1_min_margin=np.nan,
                    deviation_max=np.nan,
                )
            )
            record.status = "infeasible"
            break

        if verify_bound and plant.phi_true is not None:
            margins, deviations = verify_lemma1(
                plant, x_t, solution, constants, w_star
            )
            min_margin = float(min(np.min(mi) for mi in margins))
            dev_max = float(max(np.max(di) for di in deviations))
        else:
            margins, min_margin, dev_max = None, np.nan, np.nan

        u_applied = solution.u_applied.copy()
        new_y = []
        for j in range(d_max):
            new_y.append(measure(x))
            x = plants.step(plant, x, u_applied[j])
        xi_noisy_parts = []
        for i, di in enumerate(plant.d):
            xi_noisy_parts.append([new_y[j][i] for j in range(di)])
        xi_noisy = np.concatenate([np.asarray(p) for p in xi_noisy_parts])
        u_window = list(u_applied)
        y_window = new_y

        record.steps.append(
            ClosedLoopStep(
                t=t,
                x_t=x_t,
                xi_clean=xi_clean,
                xi_noisy=xi_noisy,
                u_applied=u_applied,
                cost=solution.cost,
                lyapunov=solution.cost + c3 * float(xi_clean @ xi_clean),
                alpha_l1=solution.alpha_l1,
                alpha_l2=solution.alpha_l2,
                sigma_inf=solution.sigma_inf,
                feasible=True,
                kkt_residual=solution.kkt_residual,
                sqp_iters=solution.sqp_iters,
                solve_ms=solve_ms,
                lemma1_min_margin=min_margin,
                deviation_max=dev_max,
                u_bar=solution.u_bar.copy(),
                y_bar=tuple(yi.copy() for yi in solution.y_bar),
                margins=margins,
            )
        )
        previous = solution
    return record


@dataclass
class StabilityReport:
    """Aggregated sweep outcome over an (eps*, w*) grid of cells."""

    cells: list
    w_star_monotone: dict
    eps_star_monotone: dict
    plateau_steps: int

    def to_dict(self) -> dict:
        return {
            "cells": self.cells,
            "w_star_monotone": self.w_star_monotone,
            "eps_star_monotone": self.eps_star_monotone,
            "plateau_steps": self.plateau_steps,
            "lyapunov_note": (
                "V_t uses the identity state weighting; c3 as configured"
            ),
        }


def _plateau(record: ClosedLoopRecord, plateau_steps: int) -> float:
    vs = [s.lyapunov for s in record.steps if s.feasible]
    tail = vs[-plateau_steps:] if len(vs) >= plateau_steps else vs
    return float(np.mean(tail))


def _contraction_ratio(record: ClosedLoopRecord, plateau: float) -> float:
    """Largest V ratio across consecutive solves outside the terminal plateau."""
    vs = [s.lyapunov for s in record.steps if s.feasible]
    threshold = max(50.0 * plateau, 1e-14)
    ratios = [
        vs[i + 1] / vs[i]
        for i in range(len(vs) - 1)
        if vs[i] > threshold
    ]
    return float(max(ratios)) if ratios else np.nan


def estimate_beta(
    cell_records: dict,
    plateau_steps: int = 5,
    min_runs: int = 5,
) -> StabilityReport:
    """Summarize closed-loop sweeps into plateau sizes and verdicts.

    ``cell_records`` maps (eps_star_value, w_star_value) to the list of
    records of that cell (one per seed).  Each cell reports the median and
    maximum terminal lifted-state norm, the median plateau of the Lyapunov
    value (the mean of its last ``plateau_steps`` solves), the feasibility
    rate and the worst observed contraction ratio.  Cells with feasibility
    failures or fewer than ``min_runs`` completed runs are flagged and
    excluded from the monotonicity verdicts along each grid axis.
    """
    cells = []
    for (eps_value, w_value), records in sorted(cell_records.items()):
        if not records:
            raise ValueError(f"cell ({eps_value}, {w_value}) has no runs")
        completed = [r for r in records if r.status == "completed"]
        feasibility = len(completed) / len(records)
        plateaus = [_plateau(r, plateau_steps) for r in completed]
        terminal_norms = [
            r.steps[-1].xi_norm for r in completed if r.steps
        ]
        ratios = [
            _contraction_ratio(r, p) for r, p in zip(completed, plateaus)
        ]
        ratios = [rho for rho in ratios if np.isfinite(rho)]
        usable = len(completed) >= min_runs and feasibility == 1.0
        cells.append(
            {
                "eps_star": float(eps_value),
                "w_star": float(w_value),
                "runs": len(records),
                "completed": len(completed),
                "feasibility_rate": feasibility,
                "beta_hat": float(np.median(plateaus)) if plateaus else np.nan,
                "terminal_xi_median": float(np.median(terminal_norms))
                if terminal_norms
                else np.nan,
                "terminal_xi_max": float(np.max(terminal_norms))
                if terminal_norms
                else np.nan,
                "rho_hat": float(np.max(ratios)) if ratios else np.nan,
                "usable": usable,
            }
        )

    def axis_verdicts(key_fixed: str, key_varied: str) -> dict:
        verdicts = {}
        fixed_values = sorted({c[key_fixed] for c in cells})
        for fv in fixed_values:
            row = [c for c in cells if c[key_fixed] == fv and c["usable"]]
            row.sort(key=lambda c: c[key_varied])
            if len(row) < 2:
                continue
            betas = [c["beta_hat"] for c in row]
            verdicts[repr(fv)] = all(
                b2 >= b1 - 1e-12 for b1, b2 in zip(betas, betas[1:])
            )
        return verdicts

    return StabilityReport(
        cells=cells,
        w_star_monotone=axis_verdicts("eps_star", "w_star"),
        eps_star_monotone=axis_verdicts("w_star", "eps_star"),
        plateau_steps=plateau_steps,
    )
