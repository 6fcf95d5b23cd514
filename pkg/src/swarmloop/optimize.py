"""Nonlinear least-squares solvers over the factor graph.

solve_lm: Levenberg-Marquardt on the damped normal equations, sparse
factorization, right-multiplicative pose retraction, additive scale updates
with positivity enforced by step rejection.

solve_gnc: graduated non-convexity with a truncated-least-squares loss on
loop factors only; odometry and priors stay quadratic.  Alternates TLS
weight updates with weighted LM solves while annealing mu.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import chi2

from .graph import (
    FactorGraph,
    LoopFactor,
    ScaledLoopFactor,
    VariableKey,
    factor_info,
    factor_residual,
)
from .se3 import Pose


class GaugeError(Exception):
    """A pose-connected component has no prior; the problem is unanchored."""


@dataclass
class GncConfig:
    mu_update_factor: float = 1.4
    inlier_cost_threshold: float = float(chi2.ppf(0.99, df=6))
    max_outer_iterations: int = 50

    def __post_init__(self):
        if self.mu_update_factor <= 1.0:
            raise ValueError("mu_update_factor must be > 1")


@dataclass
class SolverConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    absolute_tolerance: float = 1e-15
    relative_tolerance: float = 1e-9
    gnc: GncConfig = field(default_factory=GncConfig)

    def __post_init__(self):
        if self.absolute_tolerance <= 0 or self.relative_tolerance <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolveReport:
    final_cost: float = 0.0
    iterations: int = 0
    cost_trace: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False
    gnc_weights: Optional[Dict[int, float]] = None

    def csv_row(self) -> str:
        return f"{self.final_cost:.17g},{self.iterations},{self.wall_time * 1e3:.3f}"


def _check_gauge(graph: FactorGraph) -> None:
    from .graph import PriorFactor

    anchored = {f.key for f in graph.factors if isinstance(f, PriorFactor)}
    for comp in graph.pose_components():
        if not (comp & anchored):
            raise GaugeError(f"pose component without prior anchor: {sorted(comp)[:3]}...")


def _index_variables(graph: FactorGraph) -> Tuple[List[VariableKey], Dict[VariableKey, int], int]:
    keys = graph.sorted_keys()
    offsets = {}
    off = 0
    for k in keys:
        offsets[k] = off
        off += k.dim()
    return keys, offsets, off


class _LinearizationPlan:
    """Precomputed sparsity structure: per-factor stacked column indices and
    the flattened (row, col) triplet positions of its dense block J^T W J."""

    def __init__(self, graph, offsets):
        self.per_factor = []
        rows, cols = [], []
        for f in graph.factors:
            idxs = np.concatenate(
                [np.arange(offsets[k], offsets[k] + k.dim()) for k in f.keys()]
            )
            self.per_factor.append(idxs)
            rows.append(np.repeat(idxs, len(idxs)))
            cols.append(np.tile(idxs, len(idxs)))
        self.rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        self.cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        self.sizes = [len(i) ** 2 for i in self.per_factor]


def _linearize(graph, est, offsets, dim, loop_weights, plan):
    """Assemble the Gauss-Newton system H dx = -g and the current cost."""
    g = np.zeros(dim)
    cost = 0.0
    vals = []
    for idx, f in enumerate(graph.factors):
        w = 1.0
        if loop_weights is not None and isinstance(f, (LoopFactor, ScaledLoopFactor)):
            w = loop_weights.get(idx, 1.0)
        if w == 0.0:
            vals.append(np.zeros(plan.sizes[idx]))
            continue
        r, jacs = factor_residual(f, est, jacobians=True)
        info = factor_info(f)
        cost += w * float(r @ info @ r)
        J = np.hstack([np.atleast_2d(j) for j in jacs])
        winfo = w * info
        JtW = J.T @ winfo
        g[plan.per_factor[idx]] += JtW @ r
        vals.append((JtW @ J).ravel())
    data = np.concatenate(vals) if vals else np.zeros(0)
    H = sp.csc_matrix((data, (plan.rows, plan.cols)), shape=(dim, dim))
    return H, g, cost


def _retract_all(est, keys, offsets, dx):
    new = dict(est)
    for k in keys:
        o = offsets[k]
        if k.kind == "pose":
            new[k] = est[k].retract(dx[o : o + 6])
        else:
            new[k] = float(est[k]) + float(dx[o])
    return new


def _total_cost(graph, est, loop_weights):
    return graph.total_cost(est, loop_weights)


def solve_lm(
    graph: FactorGraph,
    cfg: SolverConfig = None,
    loop_weights: Optional[Dict[int, float]] = None,
    initial: Optional[Dict[VariableKey, object]] = None,
) -> Tuple[Dict[VariableKey, object], SolveReport]:
    """Levenberg-Marquardt over the graph; returns (estimates, report)."""
    cfg = cfg or SolverConfig()
    _check_gauge(graph)
    t0 = time.perf_counter()

    keys, offsets, dim = _index_variables(graph)
    plan = _LinearizationPlan(graph, offsets)
    est = dict(initial) if initial is not None else dict(graph.variables)
    lam = cfg.initial_damping
    report = SolveReport()

    cost = _total_cost(graph, est, loop_weights)
    report.cost_trace.append(cost)

    for it in range(cfg.max_iterations):
        try:
            H, g, _ = _linearize(graph, est, offsets, dim, loop_weights, plan)
        except ValueError:
            break  # nonpositive scale slipped in; report non-convergence
        if np.linalg.norm(g) < cfg.absolute_tolerance:
            report.converged = True
            break
        accepted = False
        for _attempt in range(20):
            damped = (H + lam * sp.eye(dim, format="csc")).tocsc()
            try:
                dx = spla.splu(damped).solve(-g)
            except RuntimeError:
                lam *= cfg.damping_up
                continue
            candidate = _retract_all(est, keys, offsets, dx)
            # scale positivity is enforced by step rejection
            if any(
                k.kind == "scale" and candidate[k] <= 0.0 for k in keys
            ):
                lam *= cfg.damping_up
                continue
            new_cost = _total_cost(graph, candidate, loop_weights)
            if new_cost < cost:
                est = candidate
                lam = max(lam * cfg.damping_down, 1e-15)
                report.iterations += 1
                accepted = True
                improvement = cost - new_cost
                cost = new_cost
                report.cost_trace.append(cost)
                if improvement < cfg.absolute_tolerance or (
                    cost > 0 and improvement / cost < cfg.relative_tolerance
                ):
                    report.converged = True
                break
            lam *= cfg.damping_up
        if not accepted:
            report.converged = True  # no descent direction left
            break
        if report.converged:
            break

    report.final_cost = cost
    report.wall_time = time.perf_counter() - t0
    if not report.cost_trace:
        report.cost_trace.append(cost)
    return est, report


def _loop_sq_residuals(graph, est) -> Dict[int, float]:
    out = {}
    for idx in graph.loop_factor_indices():
        f = graph.factors[idx]
        r = factor_residual(f, est)
        out[idx] = float(r @ factor_info(f) @ r)
    return out


def _tls_weight(r2: float, c2: float, mu: float) -> float:
    if r2 <= mu / (mu + 1.0) * c2:
        return 1.0
    if r2 >= (mu + 1.0) / mu * c2:
        return 0.0
    return float(np.sqrt(c2 * mu * (mu + 1.0) / r2) - mu)


def solve_gnc(
    graph: FactorGraph,
    cfg: SolverConfig = None,
) -> Tuple[Dict[VariableKey, object], SolveReport]:
    """GNC-TLS on loop factors: anneal mu, alternating weight updates and
    weighted LM solves.  Reduces to solve_lm when no loop residual exceeds
    the inlier threshold."""
    cfg = cfg or SolverConfig()
    gnc = cfg.gnc
    c2 = gnc.inlier_cost_threshold
    t0 = time.perf_counter()

    loop_idx = graph.loop_factor_indices()
    weights = {i: 1.0 for i in loop_idx}
    est, report = solve_lm(graph, cfg, loop_weights=weights)
    if not loop_idx:
        report.gnc_weights = {}
        report.wall_time = time.perf_counter() - t0
        return est, report

    r2 = _loop_sq_residuals(graph, est)
    r2_max = max(r2.values())
    if r2_max <= c2:
        report.gnc_weights = weights
        report.wall_time = time.perf_counter() - t0
        return est, report

    mu = max(c2 / (2.0 * r2_max - c2), 1e-6)
    iterations = report.iterations
    trace = list(report.cost_trace)
    # warm-started inner solves only need a handful of LM steps each
    inner_cfg = SolverConfig(
        max_iterations=min(cfg.max_iterations, 15),
        initial_damping=cfg.initial_damping,
        damping_up=cfg.damping_up,
        damping_down=cfg.damping_down,
        absolute_tolerance=cfg.absolute_tolerance,
        relative_tolerance=cfg.relative_tolerance,
        gnc=gnc,
    )
    for _outer in range(gnc.max_outer_iterations):
        new_weights = {i: _tls_weight(r2[i], c2, mu) for i in loop_idx}
        delta = max(abs(new_weights[i] - weights[i]) for i in loop_idx)
        weights = new_weights
        est, rep = solve_lm(graph, inner_cfg, loop_weights=weights, initial=est)
        iterations += rep.iterations
        trace.extend(rep.cost_trace)
        r2 = _loop_sq_residuals(graph, est)
        mu *= gnc.mu_update_factor
        if delta < 1e-6 and _outer > 0:
            break
        if mu > 1e6:
            break

    final = SolveReport(
        final_cost=_total_cost(graph, est, weights),
        iterations=iterations,
        cost_trace=trace,
        wall_time=time.perf_counter() - t0,
        converged=True,
        gnc_weights=weights,
    )
    return est, final
