"""The implicit time-discretization scheme for the coupled system.

Each step first solves the angle problem, then the order-parameter problem
(the angle problem only sees the previous order parameter, while the order
parameter problem sees the freshly computed angle, so this order makes both
subproblems well posed on their own).

Angle step: the variational inequality is the optimality condition of the
strongly convex functional

    Phi(theta) = 1/(2 tau) <alpha0(clamp eta_prev) (theta - theta_prev),
                            theta - theta_prev>_H
               + sum_cells cellw_c * gamma_eps((grad theta)_c)
               + nu^2/(2 tau) |grad(theta - theta_prev)|^2  -  <v_i, theta>_H,

with cellw the cell-averaged truncated flux weight times cell volume.  It is
minimized through its Fenchel dual: one ball-constrained dual unknown per
cell, an accelerated proximal-gradient loop (step size from a power-method
estimate of the preconditioned gradient-operator norm), and the quadratic
block inverted exactly by a sparse factorization.  The returned iterate is
the primal point induced by the dual variable, so the variational
inequality holds with slack bounded by the (per-cell Fenchel-Young) duality
gap used as the stopping test.  eps = 0 needs no special casing.

Order-parameter step: damped Newton (Armijo backtracking on the squared
residual norm) on the semilinear system, conjugate-gradient inner solves,
with a lagged-nonlinearity Picard fallback when the Jacobian loses positive
definiteness (possible when tau exceeds the scheme's stability range).
Failures are reported, never papered over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .energy import EnergyReport, check_step_inequality
from .grid import Field, Grid, GridMismatchError, norm_h
from .model import Forcing, Model, gamma_eps


class StepFailure(RuntimeError):
    """An inner solver did not converge; carries the offending step."""

    def __init__(self, kind: str, message: str, index: Optional[int] = None,
                 diagnostics: Optional[dict] = None):
        super().__init__(f"{kind} step failed"
                         + (f" at index {index}" if index is not None else "")
                         + f": {message}")
        self.kind = kind
        self.message = message
        self.index = index
        self.diagnostics = diagnostics or {}


@dataclass
class StepState:
    """Solution pair at one time level plus inner-solver diagnostics."""

    index: int
    t: float
    eta: Field
    theta: Field
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ForcingSamples:
    """Interval averages of the zero-extended forcings, index 0 is zero."""

    grid: Grid
    u: np.ndarray  # (n_steps + 1, node_count)
    v: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("forcing samples contain non-finite values")

    def u_field(self, i: int) -> Field:
        return Field(self.grid, self.u[i])

    def v_field(self, i: int) -> Field:
        return Field(self.grid, self.v[i])


@dataclass
class RunResult:
    """States and energy reports of a completed run."""

    grid: Grid
    model: Model
    states: list
    reports: list
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def t_end(self) -> float:
        return self.states[-1].t


# three-point Gauss rule on [0, 1]
_GAUSS_X = np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)])
_GAUSS_W = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


def discretize_forcing(forcing: Forcing, grid: Grid, tau: float,
                       n_steps: int, t_final: Optional[float] = None) -> ForcingSamples:
    """Interval averages by per-interval three-point Gauss quadrature.

    The forcings are extended by zero beyond t_final, so trailing intervals
    average only the part inside [0, t_final].
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    n_nodes = grid.node_count
    u = np.zeros((n_steps + 1, n_nodes))
    v = np.zeros((n_steps + 1, n_nodes))
    coords = grid.node_coords
    for i in range(1, n_steps + 1):
        t0 = (i - 1) * tau
        for xq, wq in zip(_GAUSS_X, _GAUSS_W):
            tq = t0 + xq * tau
            if t_final is not None and tq > t_final:
                continue
            if forcing.u is not None:
                u[i] += wq * np.asarray(forcing.u(tq, coords), dtype=float)
            if forcing.v is not None:
                v[i] += wq * np.asarray(forcing.v(tq, coords), dtype=float)
    samples = ForcingSamples(grid, u, v)
    if forcing.u is not None:
        bound = forcing.u_bound
        worst = float(np.max(np.abs(u)))
        if worst > bound * (1.0 + 1e-9) + 1e-12:
            raise ValueError(
                f"declared sup bound {bound} is exceeded by a forcing sample "
                f"({worst:.6g}); fix u_bound"
            )
    return samples


def _dual_prox(z: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-cell prox of the dual smooth term plus the unit-ball constraint.

    Solves, for each cell, min_{|q|<=1} 0.5|q - z|^2 - c sqrt(1 - |q|^2)
    with c >= 0.  The minimizer points along z with magnitude t solving
    t + c t / sqrt(1 - t^2) = |z|; solved by safeguarded Newton started on
    the convex side, exact projection when c = 0.
    """
    r = np.sqrt(np.sum(z * z, axis=0))
    t = np.minimum(r, 1.0)
    mask = c > 0.0
    if np.any(mask):
        rm = r[mask]
        cm = c[mask]
        tm = np.minimum(rm / (1.0 + cm), 1.0 - 1e-16)
        for _ in range(30):
            s = np.sqrt(1.0 - tm * tm)
            hval = tm + cm * tm / s - rm
            hgrad = 1.0 + cm / (s * s * s)
            tm = np.clip(tm - hval / hgrad, 0.0, 1.0 - 1e-16)
        t[mask] = tm
    scale = np.where(r > 0.0, t / np.where(r > 0.0, r, 1.0), 0.0)
    return z * scale


class _ThetaProblem:
    """Assembled data of one angle step on a fixed grid."""

    def __init__(self, grid: Grid, model: Model, eta_prev: np.ndarray,
                 theta_prev: np.ndarray, v_i: np.ndarray):
        consts = model.constants
        tau = consts.tau
        self.grid = grid
        self.eps = consts.eps
        a0 = np.asarray(model.funcs.alpha0(model.trunc.clamp(eta_prev)),
                        dtype=float)
        if np.min(a0) < consts.delta_star - 1e-10 * (1 + consts.delta_star):
            raise StepFailure("theta", "time mobility dips below its floor")
        w = grid.node_weights
        self.q_mat = (sp.diags_array(w * a0 / tau)
                      + (consts.nu**2 / tau) * grid.stiffness).tocsc()
        self.solver = splu(self.q_mat)
        self.theta_prev = theta_prev
        self.rhs0 = self.q_mat @ theta_prev + w * v_i
        self.linear = w * v_i
        self.cellw = grid.cell_volume * grid.average_to_cells(
            model.trunc.alpha_m(eta_prev))
        # affine extension keeps alpha_m >= 0; clip pure roundoff
        self.cellw = np.maximum(self.cellw, 0.0)

    def primal_from_dual(self, q: np.ndarray) -> np.ndarray:
        return self.solver.solve(self.rhs0 - self.kt_apply(q))

    def k_apply(self, x: np.ndarray) -> np.ndarray:
        return self.cellw * self.grid.apply_gradient(x)

    def kt_apply(self, q: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.node_count)
        for g, comp in zip(self.grid.grad_matrices, q):
            out += g.T @ (self.cellw * comp)
        return out

    def objective(self, x: np.ndarray) -> float:
        d = x - self.theta_prev
        quad = 0.5 * float(d @ (self.q_mat @ d)) - float(self.linear @ x)
        grad = self.grid.apply_gradient(x)
        return quad + float(np.dot(self.cellw, gamma_eps(self.eps, grad, axis=0)))

    def gap(self, x: np.ndarray, q: np.ndarray):
        """Duality gap as a sum of per-cell Fenchel-Young residuals (>= 0)."""
        grad = self.grid.apply_gradient(x)
        gam = gamma_eps(self.eps, grad, axis=0)
        pairing = np.sum(q * grad, axis=0)
        qq = np.minimum(np.sum(q * q, axis=0), 1.0)
        residual = gam - pairing - self.eps * np.sqrt(1.0 - qq)
        return float(np.dot(self.cellw, residual))

    def dual_step_size(self) -> float:
        """1 / lambda_max of the dual Hessian bound K Q^{-1} K^T."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((self.grid.dim, self.grid.cell_count))
        x /= np.sqrt(np.sum(x * x))
        lam = 0.0
        for _ in range(200):
            y = self.k_apply(self.solver.solve(self.kt_apply(x)))
            lam_new = float(np.sum(x * y))
            nrm = math.sqrt(float(np.sum(y * y)))
            if nrm == 0.0:
                return 1.0
            x = y / nrm
            if abs(lam_new - lam) <= 1e-10 * max(1.0, abs(lam_new)):
                lam = lam_new
                break
            lam = lam_new
        return 1.0 / (1.05 * lam) if lam > 0.0 else 1.0


def theta_step(eta_prev: Field, theta_prev: Field, v_i: Field, model: Model,
               grid: Optional[Grid] = None, *, warm_dual: Optional[np.ndarray] = None,
               tol: Optional[float] = None, max_iter: int = 50_000,
               return_info: bool = False):
    """Solve the angle variational inequality for one step.

    Returns the unique minimizer of the step functional (see module
    docstring).  With ``return_info`` the final dual variable and solver
    diagnostics are returned as well, which lets a caller warm-start the
    next step.
    """
    grid = grid or eta_prev.grid
    for f in (eta_prev, theta_prev, v_i):
        if f.grid != grid:
            raise GridMismatchError("theta step inputs on mismatched grids")
    tol = model.tol_inner if tol is None else tol
    prob = _ThetaProblem(grid, model, eta_prev.values, theta_prev.values,
                         v_i.values)

    q = np.zeros((grid.dim, grid.cell_count))
    if warm_dual is not None and warm_dual.shape == q.shape:
        qq = np.sum(warm_dual * warm_dual, axis=0)
        q = warm_dual / np.maximum(np.sqrt(qq), 1.0)

    best_x = prob.primal_from_dual(q)
    best_gap = prob.gap(best_x, q)
    best_q = q
    iterations = 0
    threshold = tol * (1.0 + abs(prob.objective(best_x)))

    if best_gap > threshold:
        s = prob.dual_step_size()
        c = s * prob.eps * prob.cellw
        y = q.copy()
        t_acc = 1.0
        check_every = 8
        for k in range(1, max_iter + 1):
            iterations = k
            x_at_y = prob.primal_from_dual(y)
            z = y + s * prob.k_apply(x_at_y)
            q_next = _dual_prox(z, c)
            if float(np.sum((z - q_next) * (q_next - q))) > 0.0:
                t_acc = 1.0  # adaptive restart of the acceleration
                y = q_next.copy()
            else:
                t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
                y = q_next + ((t_acc - 1.0) / t_next) * (q_next - q)
                t_acc = t_next
            q = q_next
            if k % check_every == 0 or k == max_iter:
                x_cand = prob.primal_from_dual(q)
                gap = prob.gap(x_cand, q)
                if gap < best_gap:
                    best_gap, best_x, best_q = gap, x_cand, q.copy()
                threshold = tol * (1.0 + abs(prob.objective(x_cand)))
                if best_gap <= threshold:
                    break
        if best_gap > threshold:
            raise StepFailure(
                "theta",
                f"duality gap {best_gap:.3e} above tolerance {threshold:.3e} "
                f"after {max_iter} iterations",
                diagnostics={"gap": best_gap, "iterations": iterations},
            )

    result = Field(grid, best_x)
    if return_info:
        info = {"theta_iterations": iterations, "theta_gap": best_gap,
                "theta_objective": prob.objective(best_x)}
        return result, best_q, info
    return result


def _eta_residual_pieces(grid: Grid, model: Model, eta_prev: np.ndarray,
                         u_i: np.ndarray, gamma_nodes: np.ndarray):
    consts = model.constants
    tau = consts.tau
    w = grid.node_weights
    a_eta_prev = grid.stiffness @ eta_prev

    def residual(x):
        ax = grid.stiffness @ x
        return ((w / tau) * (x - eta_prev)
                + (consts.mu**2 / tau) * (ax - a_eta_prev) + ax
                + w * model.trunc.g_m(x)
                + gamma_nodes * model.trunc.alpha_m_prime(x)
                - w * u_i)

    return residual


def eta_step(eta_prev: Field, theta_curr: Field, u_i: Field, model: Model,
             grid: Optional[Grid] = None, *, tol: Optional[float] = None,
             return_info: bool = False):
    """Solve the semilinear order-parameter equation for one step.

    The residual is the exact gradient of the discrete step energy at the
    already-computed angle, so solving it preserves the per-step
    dissipation inequality.
    """
    grid = grid or eta_prev.grid
    for f in (eta_prev, theta_curr, u_i):
        if f.grid != grid:
            raise GridMismatchError("eta step inputs on mismatched grids")
    tol = model.tol_inner if tol is None else tol
    consts = model.constants
    tau = consts.tau
    w = grid.node_weights
    funcs = model.funcs
    trunc = model.trunc

    gamma_cells = gamma_eps(consts.eps, grid.apply_gradient(theta_curr.values),
                            axis=0)
    gamma_nodes = grid.avg_matrix.T @ (grid.cell_volume * gamma_cells)

    residual = _eta_residual_pieces(grid, model, eta_prev.values, u_i.values,
                                    gamma_nodes)

    def res_norm_h(r):
        return math.sqrt(float(np.sum(r * r / w)))

    tol_abs = tol * (1.0 + norm_h(u_i))
    x = eta_prev.values.copy()
    r = residual(x)
    rn = res_norm_h(r)
    method = "newton"
    newton_iters = 0
    fallback = False

    base = ((1.0 / tau) * sp.diags_array(w)
            + (1.0 + consts.mu**2 / tau) * grid.stiffness)

    while rn > tol_abs and not fallback:
        if newton_iters >= 60:
            fallback = True
            break
        inside = np.abs(x) < trunc.m
        gp = funcs.derivative("g", trunc.clamp(x)) * inside
        app = funcs.derivative("alpha_prime", trunc.clamp(x)) * inside
        diag_extra = w * gp + gamma_nodes * app
        if np.min(w / tau + diag_extra) <= 0.0:
            # Jacobian may be indefinite (g' below -1/tau): use Picard
            fallback = True
            break
        jac = (base + sp.diags_array(diag_extra)).tocsr()
        d, info = cg(jac, -r, rtol=1e-12, atol=0.0, maxiter=10 * grid.node_count)
        if info != 0:
            fallback = True
            break
        merit = rn * rn
        s = 1.0
        accepted = False
        for _ in range(30):
            x_trial = x + s * d
            r_trial = residual(x_trial)
            rn_trial = res_norm_h(r_trial)
            if rn_trial * rn_trial <= (1.0 - 1e-4 * s) * merit:
                x, r, rn = x_trial, r_trial, rn_trial
                accepted = True
                break
            s *= 0.5
        if not accepted:
            fallback = True
            break
        newton_iters += 1

    picard_iters = 0
    if rn > tol_abs and fallback:
        method = "picard"
        lp = splu(base.tocsc())
        rhs_fixed = (w * u_i.values + (w / tau) * eta_prev.values
                     + (consts.mu**2 / tau) * (grid.stiffness @ eta_prev.values))
        best = rn
        while rn > tol_abs:
            picard_iters += 1
            if picard_iters > 800 or rn > 1e6 * (1.0 + best):
                raise StepFailure(
                    "eta",
                    f"Newton stagnated and Picard did not converge "
                    f"(residual {rn:.3e}, tolerance {tol_abs:.3e}); "
                    f"tau may exceed the scheme's stability range",
                    diagnostics={"residual": rn, "newton_iterations": newton_iters,
                                 "picard_iterations": picard_iters},
                )
            x = lp.solve(rhs_fixed - w * trunc.g_m(x)
                         - gamma_nodes * trunc.alpha_m_prime(x))
            r = residual(x)
            rn = res_norm_h(r)
            best = min(best, rn)

    result = Field(grid, x)
    if return_info:
        info = {"eta_method": method, "eta_residual_h": rn,
                "eta_newton_iterations": newton_iters,
                "eta_picard_iterations": picard_iters}
        return result, info
    return result


def advance(state: StepState, samples: ForcingSamples, model: Model,
            grid: Optional[Grid] = None, *, warm_dual: Optional[np.ndarray] = None,
            f_prev: Optional[float] = None):
    """One step of the scheme: angle first, then order parameter.

    Returns the next state and its energy report.  The maximum-principle
    check is recorded in the diagnostics (and surfaced by the verification
    tools) rather than raised, so that violations can be reported with
    magnitudes.
    """
    grid = grid or state.eta.grid
    i = state.index + 1
    tau = model.constants.tau
    u_i = samples.u_field(i)
    v_i = samples.v_field(i)
    try:
        theta_new, dual, tinfo = theta_step(
            state.eta, state.theta, v_i, model, grid,
            warm_dual=warm_dual, return_info=True)
        eta_new, einfo = eta_step(state.eta, theta_new, u_i, model, grid,
                                  return_info=True)
    except StepFailure as exc:
        raise StepFailure(exc.kind, exc.message, index=i,
                          diagnostics=exc.diagnostics) from exc
    m = model.trunc.m
    eta_max_abs = float(np.max(np.abs(eta_new.values)))
    diagnostics = dict(tinfo)
    diagnostics.update(einfo)
    diagnostics["eta_max_abs"] = eta_max_abs
    diagnostics["max_principle_ok"] = eta_max_abs <= m + 1e-8 * (1.0 + m)
    diagnostics["theta_dual"] = dual
    new_state = StepState(index=i, t=i * tau, eta=eta_new, theta=theta_new,
                          diagnostics=diagnostics)
    report = check_step_inequality(state, new_state, tau, u_i, v_i, model,
                                   f_prev=f_prev)
    return new_state, report


def simulate(grid: Grid, model: Model, eta0: Field, theta0: Field,
             forcing: Optional[Forcing] = None,
             samples: Optional[ForcingSamples] = None) -> RunResult:
    """Run the scheme from t = 0 to t_final; deterministic given its inputs."""
    consts = model.constants
    n_steps = max(0, math.ceil(consts.t_final / consts.tau - 1e-9))
    if samples is None:
        forcing = forcing or Forcing()
        samples = discretize_forcing(forcing, grid, consts.tau, n_steps,
                                     t_final=consts.t_final)
    state = StepState(index=0, t=0.0, eta=eta0.copy(), theta=theta0.copy())
    states = [state]
    reports = []
    warm = None
    f_prev = None
    for _ in range(n_steps):
        state, report = advance(state, samples, model, grid,
                                warm_dual=warm, f_prev=f_prev)
        warm = state.diagnostics.get("theta_dual")
        f_prev = report.f_curr
        states.append(state)
        reports.append(report)
    return RunResult(grid=grid, model=model, states=states, reports=reports,
                     meta={"n_steps": n_steps})


def run(config) -> RunResult:
    """Run a parsed configuration (see :mod:`kwcflow.config`)."""
    assembled = config.assemble()
    return simulate(assembled.grid, assembled.model, assembled.eta0,
                    assembled.theta0, assembled.forcing)


def interpolate(run_result: RunResult, kind: str, t: float):
    """Evaluate a time interpolant of the run at time t.

    ``backward`` holds the upcoming step value on each interval, ``forward``
    the previous one, and ``linear`` the continuous interpolant; all three
    agree at step times.
    """
    tau = run_result.model.constants.tau
    n = run_result.n_steps
    s = t / tau
    if not (-1e-9 <= s <= n + 1e-9 * (1.0 + n)):
        raise ValueError(f"time {t} outside run range [0, {n * tau}]")
    k = round(s)
    snapped = abs(s - k) <= 1e-9 * (1.0 + abs(s))
    states = run_result.states

    def pair(idx):
        st = states[idx]
        return st.eta.copy(), st.theta.copy()

    if snapped:
        return pair(int(np.clip(k, 0, n)))
    lo = int(math.floor(s))
    hi = int(math.ceil(s))
    if kind == "backward":
        return pair(hi)
    if kind == "forward":
        return pair(lo)
    if kind == "linear":
        w_hi = s - lo
        eta = Field(run_result.grid,
                    (1.0 - w_hi) * states[lo].eta.values
                    + w_hi * states[hi].eta.values)
        theta = Field(run_result.grid,
                      (1.0 - w_hi) * states[lo].theta.values
                      + w_hi * states[hi].theta.values)
        return eta, theta
    raise ValueError(f"unknown interpolation kind {kind!r}")
