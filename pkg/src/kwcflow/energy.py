"""Truncated free energy and the per-step / interval dissipation checks.

The discrete energy is evaluated with exactly the quadratures the steppers
minimize: gradient terms at cell centers, the potential at nodes with
trapezoidal weights, and the singular term as cell volume times the
cell-averaged flux weight times gamma_eps of the cell gradient.  That
consistency is what makes the per-step inequality

    C0/tau * (|d_eta|_V^2 + |d_theta|_V^2) + F(i) <= F(i-1)
        + tau/2 |u_i|_H^2 + tau/(2 delta_star) |v_i|_H^2

hold up to inner-solver tolerance, rather than up to discretization error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Field, GridMismatchError, inner_h, norm_h, norm_v
from .model import MaterialFunctions, Model, TruncationBundle, gamma_eps


@dataclass(frozen=True)
class EnergyReport:
    """One step (or telescoped interval) of the dissipation inequality.

    slack = F_prev + forcing_rhs - dissipation - F_curr; the inequality
    asks slack >= 0 and we tolerate slack >= -tol_energy.
    """

    step_index: int
    t: float
    f_prev: float
    f_curr: float
    dissipation: float
    forcing_rhs: float
    slack: float
    tol: float

    @property
    def violated(self) -> bool:
        return self.slack < -self.tol


def eval_energy(eps: float, eta: Field, theta: Field,
                bundle: TruncationBundle, funcs: MaterialFunctions) -> float:
    """Truncated free energy; equals the untruncated one when |eta|_inf <= M."""
    if eta.grid != theta.grid:
        raise GridMismatchError("eta and theta live on different grids")
    grid = eta.grid
    grad_eta = grid.apply_gradient(eta.values)
    grad_term = 0.5 * grid.cell_volume * float(np.sum(grad_eta * grad_eta))
    potential = float(np.dot(grid.node_weights, bundle.g_m_primitive(eta.values)))
    cell_weight = grid.average_to_cells(bundle.alpha_m(eta.values))
    grad_theta = grid.apply_gradient(theta.values)
    singular = grid.cell_volume * float(
        np.dot(cell_weight, gamma_eps(eps, grad_theta, axis=0))
    )
    return grad_term + potential + singular


def check_step_inequality(prev, curr, tau: float, u_i: Field, v_i: Field,
                          model: Model, f_prev: float | None = None) -> EnergyReport:
    """Per-step dissipation report for consecutive states.

    A violation is recorded on the report, never raised: inner solvers are
    iterative and the inequality holds only up to their tolerance.
    """
    consts = model.constants
    if f_prev is None:
        f_prev = eval_energy(consts.eps, prev.eta, prev.theta, model.trunc,
                             model.funcs)
    f_curr = eval_energy(consts.eps, curr.eta, curr.theta, model.trunc,
                         model.funcs)
    d_eta = Field(prev.eta.grid, curr.eta.values - prev.eta.values)
    d_theta = Field(prev.theta.grid, curr.theta.values - prev.theta.values)
    dissipation = (consts.c0 / tau) * (norm_v(d_eta) ** 2 + norm_v(d_theta) ** 2)
    forcing_rhs = (0.5 * tau * norm_h(u_i) ** 2
                   + (0.5 * tau / consts.delta_star) * norm_h(v_i) ** 2)
    slack = f_prev + forcing_rhs - dissipation - f_curr
    return EnergyReport(
        step_index=curr.index,
        t=curr.t,
        f_prev=f_prev,
        f_curr=f_curr,
        dissipation=dissipation,
        forcing_rhs=forcing_rhs,
        slack=slack,
        tol=model.energy_tolerance(f_prev),
    )


def _bracket_index(t: float, tau: float, n_steps: int, side: str) -> int:
    """Floor/ceiling step index with snapping to near-exact grid times."""
    s = t / tau
    k = round(s)
    if abs(s - k) <= 1e-9 * (1.0 + abs(s)):
        idx = int(k)
    elif side == "floor":
        idx = int(math.floor(s))
    else:
        idx = int(math.ceil(s))
    return max(0, min(idx, n_steps))


def check_interval_inequality(run, s: float, t: float) -> EnergyReport:
    """Telescoped dissipation inequality over [s, t].

    Uses floor/ceiling bracketing of the endpoints onto step indices, so the
    discrete statement is slightly weaker than the continuous-time one
    between non-grid times.  Equals the sum of the per-step reports it
    covers.
    """
    tau = run.model.constants.tau
    n_steps = len(run.states) - 1
    t_end = n_steps * tau
    if not (0.0 <= s <= t <= t_end + 1e-12 * (1.0 + t_end)):
        raise ValueError(f"interval [{s}, {t}] outside run range [0, {t_end}]")
    if s == t:
        return EnergyReport(step_index=_bracket_index(t, tau, n_steps, "ceil"),
                            t=t, f_prev=0.0, f_curr=0.0, dissipation=0.0,
                            forcing_rhs=0.0, slack=0.0, tol=0.0)
    j = _bracket_index(s, tau, n_steps, "floor")
    k = _bracket_index(t, tau, n_steps, "ceil")
    reports = run.reports[j:k]
    f_prev = reports[0].f_prev if reports else 0.0
    f_curr = reports[-1].f_curr if reports else f_prev
    dissipation = float(sum(r.dissipation for r in reports))
    forcing_rhs = float(sum(r.forcing_rhs for r in reports))
    slack = float(sum(r.slack for r in reports))
    tol = float(sum(r.tol for r in reports))
    return EnergyReport(step_index=k, t=k * tau, f_prev=f_prev, f_curr=f_curr,
                        dissipation=dissipation, forcing_rhs=forcing_rhs,
                        slack=slack, tol=tol)
