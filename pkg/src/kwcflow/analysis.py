"""Numerical exercises of the scheme's structural guarantees.

This module provides the independent tiny-grid oracle for the angle step,
refinement and continuity studies over time-step and regularization
ladders, maximum-principle scans, and the twin-run stability check with its
exponential envelope.  Everything here re-derives what it needs from grid
and model definitions; none of it reuses the production solvers' internals,
so the comparisons are genuine cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .grid import Field, Grid, build_grid, inner_h, norm_h, norm_v
from .model import Model, ModelConstants, gamma_eps, make_truncation, preset
from .stepper import RunResult, interpolate, simulate, theta_step


@dataclass
class StudyReport:
    """Ladder study outcome: per-level metrics plus a monotonicity verdict."""

    kind: str
    ladder: tuple
    rows: tuple
    rates: tuple
    passed: bool
    notes: str = ""

    def __post_init__(self):
        diffs = np.diff(np.asarray(self.ladder, dtype=float))
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("study ladder must be strictly monotone")


@dataclass
class StabilityReport:
    """Twin-run distance series against its exponential envelope.

    The envelope constant uses a numerically estimated embedding constant,
    so it is a heuristic bound, and is labeled as such in ``notes``.
    """

    delta: float
    c3: float
    embedding_const_sq: float
    t: np.ndarray
    j: np.ndarray
    envelope: np.ndarray
    passed: bool
    notes: str = "envelope is heuristic: embedding constant estimated numerically"


def paired_convergence_check(a_seq, b_seq, a_lim: float, b_lim: float,
                             tol: float = 1e-9) -> dict:
    """Split-limit checker for two sequences whose sum converges.

    If the tails of ``a_seq`` and ``b_seq`` stay above their limits while the
    tail of the sum stays below the summed limit, both sequences must
    converge individually; the checker verifies the hypotheses and reports
    the final deviations.
    """
    a = np.asarray(a_seq, dtype=float)
    b = np.asarray(b_seq, dtype=float)
    tail = max(1, len(a) // 2)
    ta, tb = a[-tail:], b[-tail:]
    hypotheses_ok = bool(
        np.min(ta) >= a_lim - tol
        and np.min(tb) >= b_lim - tol
        and np.max(ta + tb) <= a_lim + b_lim + tol
    )
    return {
        "hypotheses_ok": hypotheses_ok,
        "concluded": hypotheses_ok,
        "dev_a": abs(float(a[-1]) - a_lim),
        "dev_b": abs(float(b[-1]) - b_lim),
    }


def estimate_embedding_const_sq(grid: Grid, n_samples: int = 200,
                                seed: int = 11) -> float:
    """Sampled maximum of |f|_{L4}^2 / |f|_V^2 over random nodal fields."""
    rng = np.random.default_rng(seed)
    w = grid.node_weights
    best = 0.0
    for _ in range(n_samples):
        vals = rng.standard_normal(grid.node_count)
        f = Field(grid, vals)
        l4_sq = math.sqrt(float(np.dot(w, vals**4)))
        best = max(best, l4_sq / norm_v(f) ** 2)
    return best


# ---------------------------------------------------------------------------
# Independent angle-step oracle (dense, tiny grids only)
# ---------------------------------------------------------------------------

class _DenseThetaObjective:
    """Dense re-derivation of the angle-step functional for small grids."""

    def __init__(self, eta_prev: Field, theta_prev: Field, v_i: Field,
                 model: Model):
        grid = eta_prev.grid
        consts = model.constants
        tau = consts.tau
        self.grid = grid
        self.eps = consts.eps
        self.theta_prev = theta_prev.values.copy()
        w = grid.node_weights
        a0 = np.asarray(model.funcs.alpha0(model.trunc.clamp(eta_prev.values)),
                        dtype=float)
        self.q = (np.diag(w * a0 / tau)
                  + (consts.nu**2 / tau) * grid.stiffness.toarray())
        self.lin = w * v_i.values
        self.cellw = np.maximum(
            grid.cell_volume * grid.average_to_cells(
                model.trunc.alpha_m(eta_prev.values)), 0.0)
        self.gmats = [g.toarray() for g in grid.grad_matrices]
        self.b = self.q @ self.theta_prev + self.lin

    def grad_cells(self, x):
        return np.stack([g @ x for g in self.gmats])

    def value(self, x, smoothing: Optional[float] = None) -> float:
        eps = self.eps if smoothing is None else smoothing
        d = x - self.theta_prev
        y = self.grad_cells(x)
        gam = np.sqrt(eps * eps + np.sum(y * y, axis=0))
        return (0.5 * float(d @ (self.q @ d)) - float(self.lin @ x)
                + float(np.dot(self.cellw, gam)))

    def gradient(self, x, smoothing: Optional[float] = None):
        eps = self.eps if smoothing is None else smoothing
        y = self.grad_cells(x)
        gam = np.sqrt(eps * eps + np.sum(y * y, axis=0))
        safe = np.where(gam > 0.0, gam, 1.0)
        slope = np.where(gam > 0.0, self.cellw / safe, 0.0)
        out = self.q @ (x - self.theta_prev) - self.lin
        for g, comp in zip(self.gmats, y):
            out += g.T @ (slope * comp)
        return out

    def hessian(self, x, smoothing: Optional[float] = None):
        eps = self.eps if smoothing is None else smoothing
        y = self.grad_cells(x)
        gam = np.sqrt(eps * eps + np.sum(y * y, axis=0))
        h = self.q.copy()
        dim = self.grid.dim
        for c in range(self.grid.cell_count):
            if self.cellw[c] == 0.0 or gam[c] == 0.0:
                continue
            gc = np.stack([g[c] for g in self.gmats])  # (dim, n)
            yc = y[:, c]
            block = (np.eye(dim) / gam[c]
                     - np.outer(yc, yc) / gam[c] ** 3) * self.cellw[c]
            h += gc.T @ block @ gc
        return h


def _damped_newton(obj: _DenseThetaObjective, x0, smoothing, max_iter=80):
    x = x0.copy()
    fx = obj.value(x, smoothing)
    g = obj.gradient(x, smoothing)
    scale = 1.0 + float(np.linalg.norm(g))
    for _ in range(max_iter):
        if float(np.linalg.norm(g)) <= 1e-14 * scale:
            break
        h = obj.hessian(x, smoothing)
        try:
            d = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        improved = False
        for _ in range(40):
            x_try = x + step * d
            f_try = obj.value(x_try, smoothing)
            if f_try <= fx - 1e-4 * step * float(g @ d) * (-1.0):
                x, fx = x_try, f_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        g = obj.gradient(x, smoothing)
    return x


def _active_set_polish(obj: _DenseThetaObjective, x):
    """Exact endgame for the unregularized flux: pin flat cells, solve, certify.

    Returns the polished point when the stationarity system and the dual
    ball constraints certify optimality, else None.
    """
    y = obj.grad_cells(x)
    mag = np.sqrt(np.sum(y * y, axis=0))
    live = obj.cellw > 0.0
    threshold = 1e-5 * (1.0 + float(np.max(mag, initial=0.0)))
    active = live & (mag <= threshold)
    inactive = live & ~active

    n = x.shape[0]
    if np.any(active):
        rows = [g[c] for c in np.nonzero(active)[0] for g in obj.gmats]
        c_mat = np.asarray(rows)
        z = scipy.linalg.null_space(c_mat)
        if z.size == 0:
            return None
    else:
        z = np.eye(n)

    def reduced(x_full):
        y_full = obj.grad_cells(x_full)
        gam = np.sqrt(np.sum(y_full * y_full, axis=0))
        if np.any(gam[inactive] < 1e-12 * (1.0 + threshold)):
            return None, None, None
        val = (0.5 * float((x_full - obj.theta_prev)
                           @ (obj.q @ (x_full - obj.theta_prev)))
               - float(obj.lin @ x_full)
               + float(np.dot(obj.cellw[inactive], gam[inactive])))
        grad = obj.q @ (x_full - obj.theta_prev) - obj.lin
        hess = obj.q.copy()
        dim = obj.grid.dim
        for c in np.nonzero(inactive)[0]:
            gc = np.stack([g[c] for g in obj.gmats])
            yc = y_full[:, c]
            grad += obj.cellw[c] * (gc.T @ (yc / gam[c]))
            if dim > 1:
                block = (np.eye(dim) / gam[c]
                         - np.outer(yc, yc) / gam[c] ** 3) * obj.cellw[c]
                hess += gc.T @ block @ gc
        return val, grad, hess

    xi = z.T @ x
    x_full = z @ xi
    for _ in range(60):
        val, grad, hess = reduced(x_full)
        if val is None:
            return None
        g_red = z.T @ grad
        if float(np.linalg.norm(g_red)) <= 1e-13 * (1.0 + abs(val)):
            break
        h_red = z.T @ hess @ z
        try:
            d = np.linalg.solve(h_red, -g_red)
        except np.linalg.LinAlgError:
            return None
        step, ok = 1.0, False
        for _ in range(40):
            xi_try = xi + step * d
            res = reduced(z @ xi_try)
            if res[0] is not None and res[0] < val:
                xi = xi_try
                x_full = z @ xi
                ok = True
                break
            step *= 0.5
        if not ok:
            break

    # certify stationarity: remaining gradient must be carried by feasible
    # multipliers on the pinned cells
    _, grad, _ = reduced(x_full)
    if grad is None:
        return None
    if not np.any(active):
        return x_full if float(np.linalg.norm(grad)) <= 1e-10 * (1.0 + float(np.linalg.norm(obj.b))) else None
    b_rows = np.asarray([obj.cellw[c] * g[c]
                         for c in np.nonzero(active)[0] for g in obj.gmats])
    lam, *_ = np.linalg.lstsq(b_rows.T, -grad, rcond=None)
    resid = float(np.linalg.norm(b_rows.T @ lam + grad))
    if resid > 1e-9 * (1.0 + float(np.linalg.norm(grad))):
        return None
    dim = obj.grid.dim
    lam = lam.reshape(-1, dim)
    if np.any(np.sqrt(np.sum(lam * lam, axis=1)) > 1.0 + 1e-9):
        return None
    return x_full


def theta_step_oracle(eta_prev: Field, theta_prev: Field, v_i: Field,
                      model: Model, grid: Optional[Grid] = None, *,
                      seed: int = 0, n_descent: int = 2000,
                      n_starts: int = 3) -> Field:
    """Independent dense minimizer of the angle-step functional.

    Multi-start subgradient descent with diminishing steps, then a
    high-accuracy polish: direct damped Newton when the flux is regularized,
    and smoothing continuation plus a certified pinned-cell solve when it is
    not.  Small grids only; the production solver is never invoked.
    """
    grid = grid or eta_prev.grid
    if grid.node_count > 12:
        raise ValueError("oracle is restricted to grids with at most 12 nodes")
    obj = _DenseThetaObjective(eta_prev, theta_prev, v_i, model)
    rng = np.random.default_rng(seed)

    if np.all(obj.cellw == 0.0):
        return Field(grid, np.linalg.solve(obj.q, obj.b))

    spread = 1.0 + float(np.max(np.abs(theta_prev.values)))
    starts = [theta_prev.values.copy()]
    starts += [theta_prev.values + spread * rng.standard_normal(grid.node_count)
               for _ in range(n_starts)]

    step0 = 1.0 / (1.0 + float(np.linalg.norm(obj.q, 2)))
    candidates = []
    for x0 in starts:
        x = x0.copy()
        best_x, best_f = x.copy(), obj.value(x)
        for k in range(n_descent):
            g = obj.gradient(x)
            x = x - (step0 / math.sqrt(k + 1.0)) * g
            fx = obj.value(x)
            if fx < best_f:
                best_x, best_f = x.copy(), fx
        candidates.append(best_x)

    polished = []
    for x in candidates:
        if obj.eps > 0.0:
            polished.append(_damped_newton(obj, x, smoothing=None))
        else:
            for delta in np.geomspace(1e-2, 1e-9, 8):
                x = _damped_newton(obj, x, smoothing=delta)
            exact = _active_set_polish(obj, x)
            if exact is None:
                for delta in np.geomspace(1e-10, 1e-13, 4):
                    x = _damped_newton(obj, x, smoothing=delta)
                polished.append(x)
            else:
                polished.append(exact)

    best = min(polished, key=obj.value)
    return Field(grid, best)


def theta_objective(eta_prev: Field, theta_prev: Field, v_i: Field,
                    model: Model, candidate: Field) -> float:
    """Value of the angle-step functional at a candidate (for comparisons)."""
    obj = _DenseThetaObjective(eta_prev, theta_prev, v_i, model)
    return obj.value(candidate.values)


def oracle_suite(n_instances: int = 100, seed: int = 2024,
                 eps_values: Sequence[float] = (0.0, 0.01, 1.0), *,
                 inner_tol: float = 1e-13, tol_v: float = 1e-6,
                 tol_obj: float = 1e-9) -> StudyReport:
    """Random tiny-instance comparison of the production step vs the oracle."""
    rng = np.random.default_rng(seed)
    grid = build_grid(1, [1.0], [4])
    _, funcs = preset("default")
    trunc = make_truncation(funcs, 2.5)
    rows = []
    worst_v = worst_obj = 0.0
    for i in range(n_instances):
        eps = float(eps_values[i % len(eps_values)])
        consts = ModelConstants(mu=1.0, nu=1.0, eps=eps, t_final=1.0,
                                tau=float(rng.uniform(0.05, 0.3)),
                                delta_star=1.0)
        model = Model(consts, funcs, trunc, tol_inner=inner_tol)
        eta_prev = Field(grid, rng.uniform(-1.5, 1.5, grid.node_count))
        theta_prev = Field(grid, rng.uniform(-1.0, 1.0, grid.node_count))
        v_i = Field(grid, 0.5 * rng.standard_normal(grid.node_count))
        main = theta_step(eta_prev, theta_prev, v_i, model)
        oracle = theta_step_oracle(eta_prev, theta_prev, v_i, model,
                                   seed=seed + i)
        diff = Field(grid, main.values - oracle.values)
        v_dist = norm_v(diff)
        obj_gap = abs(theta_objective(eta_prev, theta_prev, v_i, model, main)
                      - theta_objective(eta_prev, theta_prev, v_i, model,
                                        oracle))
        worst_v = max(worst_v, v_dist)
        worst_obj = max(worst_obj, obj_gap)
        rows.append({"instance": i, "eps": eps, "tau": consts.tau,
                     "v_distance": v_dist, "objective_gap": obj_gap,
                     "ok": v_dist <= tol_v and obj_gap <= tol_obj})
    passed = all(r["ok"] for r in rows)
    return StudyReport(
        kind="oracle", ladder=(float(n_instances), 0.0), rows=tuple(rows),
        rates=(), passed=passed,
        notes=f"worst V distance {worst_v:.3e}, worst objective gap "
              f"{worst_obj:.3e} over {n_instances} instances",
    )


# ---------------------------------------------------------------------------
# Ladder studies
# ---------------------------------------------------------------------------

def _sup_h_distance(run_a: RunResult, run_b: RunResult, t_max: float):
    """Sup over time of the H-distance between the linear interpolants."""
    times = set()
    for r in (run_a, run_b):
        tau = r.model.constants.tau
        times.update(i * tau for i in range(r.n_steps + 1))
    times.add(t_max)
    times = sorted(t for t in times if t <= t_max + 1e-12)
    sup_eta = sup_theta = 0.0
    for t in times:
        ea, ta = interpolate(run_a, "linear", t)
        eb, tb = interpolate(run_b, "linear", t)
        sup_eta = max(sup_eta, norm_h(Field(ea.grid, ea.values - eb.values)))
        sup_theta = max(sup_theta, norm_h(Field(ta.grid, ta.values - tb.values)))
    return sup_eta, sup_theta


def _dissipation_split(run: RunResult) -> tuple[float, float]:
    c0 = run.model.constants.c0
    tau = run.model.constants.tau
    a = b = 0.0
    for prev, curr in zip(run.states[:-1], run.states[1:]):
        a += (c0 / tau) * norm_v(Field(run.grid, curr.eta.values - prev.eta.values)) ** 2
        b += (c0 / tau) * norm_v(Field(run.grid, curr.theta.values - prev.theta.values)) ** 2
    return a, b


def tau_refinement_study(config, tau_ladder: Sequence[float]) -> StudyReport:
    """Cauchy refinement study in the time step on a shared grid and data."""
    ladder = tuple(float(t) for t in tau_ladder)
    assembled = config.assemble()
    t_final = assembled.model.constants.t_final
    runs = []
    for tau in ladder:
        model = replace(assembled.model,
                        constants=assembled.model.constants.with_(tau=tau))
        runs.append(simulate(assembled.grid, model, assembled.eta0,
                             assembled.theta0, assembled.forcing))

    rows = []
    for coarse, fine, tau_c, tau_f in zip(runs[:-1], runs[1:],
                                          ladder[:-1], ladder[1:]):
        sup_eta, sup_theta = _sup_h_distance(coarse, fine, t_final)
        rows.append({"tau_coarse": tau_c, "tau_fine": tau_f,
                     "sup_eta_h": sup_eta, "sup_theta_h": sup_theta})

    rates = []
    for a, b in zip(rows[:-1], rows[1:]):
        rates.append({
            "eta": math.log2(a["sup_eta_h"] / b["sup_eta_h"])
            if b["sup_eta_h"] > 0 else math.inf,
            "theta": math.log2(a["sup_theta_h"] / b["sup_theta_h"])
            if b["sup_theta_h"] > 0 else math.inf,
        })

    sup_eta_seq = [r["sup_eta_h"] for r in rows]
    sup_theta_seq = [r["sup_theta_h"] for r in rows]
    stationary = max(sup_eta_seq + sup_theta_seq, default=0.0) <= 1e-13
    decreasing = all(a > b for a, b in zip(sup_eta_seq, sup_eta_seq[1:])) and \
        all(a > b for a, b in zip(sup_theta_seq, sup_theta_seq[1:]))
    passed = stationary or decreasing

    notes = []
    bound_ok = True
    splits = [_dissipation_split(r) for r in runs]
    for run_result in runs:
        total = sum(r.dissipation for r in run_result.reports)
        budget = (run_result.reports[0].f_prev if run_result.reports else 0.0) \
            + sum(r.forcing_rhs for r in run_result.reports) \
            + sum(r.tol for r in run_result.reports)
        bound_ok &= total <= budget
    notes.append(f"dissipation uniformly budgeted: {bound_ok}")
    if len(splits) >= 2:
        verdict = paired_convergence_check(
            [s[0] for s in splits], [s[1] for s in splits],
            splits[-1][0], splits[-1][1],
            tol=1e-6 * (1.0 + splits[-1][0] + splits[-1][1]))
        notes.append(f"split-limit check concluded: {verdict['concluded']}")

    return StudyReport(kind="tau", ladder=ladder, rows=tuple(rows),
                       rates=tuple(rates), passed=passed,
                       notes="; ".join(notes))


def eps_continuity_study(config, eps_ladder: Sequence[float],
                         data_perturbations=None) -> StudyReport:
    """Continuous-dependence study in the regularization (and data) ladder."""
    ladder = tuple(float(e) for e in eps_ladder)
    assembled = config.assemble()
    consts = assembled.model.constants
    t_final = consts.t_final
    base = simulate(assembled.grid, assembled.model, assembled.eta0,
                    assembled.theta0, assembled.forcing)
    sample_times = [0.0, 0.25 * t_final, 0.5 * t_final, 0.75 * t_final,
                    t_final]

    rows = []
    for eps_n in ladder:
        scale = eps_n - consts.eps
        eta0, theta0 = assembled.eta0, assembled.theta0
        if data_perturbations is not None:
            d_eta, d_theta = data_perturbations
            eta0 = Field(assembled.grid, eta0.values + scale * d_eta.values)
            theta0 = Field(assembled.grid, theta0.values + scale * d_theta.values)
        model = replace(assembled.model, constants=consts.with_(eps=eps_n))
        run_n = simulate(assembled.grid, model, eta0, theta0,
                         assembled.forcing)
        row = {"eps": eps_n}
        for t in sample_times:
            ea, ta = interpolate(base, "linear", t)
            eb, tb = interpolate(run_n, "linear", t)
            dv_eta = norm_v(Field(ea.grid, eb.values - ea.values))
            dv_theta = norm_v(Field(ta.grid, tb.values - ta.values))
            row[f"eta_v_at_{t:.6g}"] = dv_eta
            row[f"theta_v_at_{t:.6g}"] = dv_theta
            if t == t_final:
                row["v_at_final"] = math.hypot(dv_eta, dv_theta)
        rows.append(row)

    finals = [r["v_at_final"] for r in rows]
    identical = max(finals, default=0.0) == 0.0
    passed = identical or all(a > b for a, b in zip(finals, finals[1:]))
    return StudyReport(kind="eps", ladder=ladder, rows=tuple(rows), rates=(),
                       passed=passed,
                       notes="monotone decrease of V-distance at final time")


# ---------------------------------------------------------------------------
# Maximum-principle scans and twin-run stability
# ---------------------------------------------------------------------------

def comparison_check(run: RunResult, theta_bound: Optional[float] = None) -> dict:
    """Scan a run against the truncation level and the initial angle range.

    The angle bound is only meaningful for runs without angle forcing; the
    caller decides whether to act on it.  Violations are listed with their
    magnitudes instead of raising.
    """
    m = run.model.trunc.m
    if theta_bound is None:
        theta_bound = float(np.max(np.abs(run.states[0].theta.values)))
    violations = []
    max_eta = max_theta = 0.0
    for state in run.states:
        ea = float(np.max(np.abs(state.eta.values)))
        th = float(np.max(np.abs(state.theta.values)))
        max_eta = max(max_eta, ea)
        max_theta = max(max_theta, th)
        if ea > m:
            violations.append({"step": state.index, "field": "eta",
                               "value": ea, "bound": m})
        if th > theta_bound + 1e-8:
            violations.append({"step": state.index, "field": "theta",
                               "value": th, "bound": theta_bound})
    return {
        "eta_bound": m,
        "theta_bound": theta_bound,
        "max_eta_abs": max_eta,
        "max_theta_abs": max_theta,
        "violations": violations,
        "passed": not violations,
    }


def comparison_pair(run1: RunResult, run2: RunResult) -> dict:
    """Track the positive part of the angle difference between ordered runs."""
    initial = norm_v(_positive_part(run1.states[0].theta,
                                    run2.states[0].theta)) ** 2
    series = []
    for s1, s2 in zip(run1.states, run2.states):
        series.append(norm_v(_positive_part(s1.theta, s2.theta)) ** 2)
    peak = max(series)
    ratio = peak / initial if initial > 0.0 else None
    return {"initial": initial, "peak": peak, "ratio": ratio,
            "series": series}


def _positive_part(f1: Field, f2: Field) -> Field:
    return Field(f1.grid, np.maximum(f1.values - f2.values, 0.0))


def gronwall_stability(config, perturbation_size: float,
                       seed: int = 7) -> StabilityReport:
    """Twin-run stability: distance functional against its growth envelope.

    Perturbs both initial fields by ``perturbation_size`` times fixed
    V-normalized patterns, runs both trajectories, and checks the squared
    weighted distance J against J(0) times the exponential of the sampled
    growth rate.  perturbation_size = 0 doubles as the determinism and
    uniqueness check (J must vanish identically).
    """
    assembled = config.assemble()
    grid = assembled.grid
    consts = assembled.model.constants
    funcs = assembled.model.funcs
    rng = np.random.default_rng(seed)

    def normalized_pattern():
        vals = rng.standard_normal(grid.node_count)
        f = Field(grid, vals)
        return Field(grid, vals / norm_v(f))

    p_eta = normalized_pattern()
    p_theta = normalized_pattern()
    delta = float(perturbation_size)
    base = simulate(grid, assembled.model, assembled.eta0, assembled.theta0,
                    assembled.forcing)
    eta0_p = Field(grid, assembled.eta0.values + delta * p_eta.values)
    theta0_p = Field(grid, assembled.theta0.values + delta * p_theta.values)
    pert = simulate(grid, assembled.model, eta0_p, theta0_p,
                    assembled.forcing)

    w = grid.node_weights
    tau = consts.tau
    j_vals = []
    for s1, s2 in zip(base.states, pert.states):
        d_eta = s1.eta.values - s2.eta.values
        d_theta = s1.theta.values - s2.theta.values
        g_eta = grid.apply_gradient(d_eta)
        g_theta = grid.apply_gradient(d_theta)
        a0 = np.asarray(funcs.alpha0(s1.eta.values), dtype=float)
        j_vals.append(
            float(np.dot(w, d_eta * d_eta))
            + consts.mu**2 * grid.cell_volume * float(np.sum(g_eta * g_eta))
            + float(np.dot(w, a0 * d_theta * d_theta))
            + consts.nu**2 * grid.cell_volume * float(np.sum(g_theta * g_theta))
        )
    j_vals = np.asarray(j_vals)

    m0 = max(
        max(float(np.max(np.abs(s.eta.values))) for s in base.states),
        max(float(np.max(np.abs(s.eta.values))) for s in pert.states),
    )
    bounds = funcs.lipschitz_bounds(m0)
    cv4_sq = estimate_embedding_const_sq(grid)
    c3 = (2.0 * (bounds["alpha_prime"] + bounds["g_prime"]
                 + cv4_sq * bounds["alpha0_prime"])
          / min(1.0, consts.delta_star, consts.nu**2))

    rate_cum = np.zeros(len(base.states))
    for i, (prev1, curr1, prev2, curr2) in enumerate(zip(
            base.states[:-1], base.states[1:],
            pert.states[:-1], pert.states[1:]), start=1):
        d_eta1 = Field(grid, curr1.eta.values - prev1.eta.values)
        d_theta2 = Field(grid, curr2.theta.values - prev2.theta.values)
        rate_cum[i] = rate_cum[i - 1] + norm_h(d_eta1) + norm_v(d_theta2) + tau

    envelope = j_vals[0] * np.exp(c3 * rate_cum)
    passed = bool(np.all(j_vals <= envelope * (1.0 + 1e-9) + 1e-300))
    t = np.asarray([s.t for s in base.states])
    return StabilityReport(delta=delta, c3=c3, embedding_const_sq=cv4_sq,
                           t=t, j=j_vals, envelope=envelope, passed=passed)
