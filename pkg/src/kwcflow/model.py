"""Model data: constants, material functions, truncation, and the regularizer.

The flux regularizer is gamma_eps(y) = sqrt(eps^2 + |y|^2), a convex,
1-Lipschitz function of the gradient; eps = 0 gives the pure
total-variation flux.  Its Fenchel conjugate,

    gamma_eps*(p) = -eps * sqrt(1 - |p|^2)   for |p| <= 1,  +inf otherwise,

is what the theta-step dual solver works with: the unit-ball constraint on
the dual variable is the flux bound of the singular term.

Truncation clamps the order parameter to [-M, M] inside the nonlinearities;
the truncated mobility and potential are primitives of the clamped
derivatives, so they agree with the originals on [-M, M] and extend
affinely outside, preserving convexity and nonnegativity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import Field

_SAMPLES = 10_000  # dense-sampling resolution for validation and bounds


@dataclass(frozen=True)
class ModelConstants:
    """Positive scheme constants; C0 is the dissipation constant."""

    mu: float
    nu: float
    eps: float
    t_final: float
    tau: float
    delta_star: float

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.nu <= 0.0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if self.t_final < 0.0:
            raise ValueError(f"t_final must be nonnegative, got {self.t_final}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.delta_star <= 0.0:
            raise ValueError(f"delta_star must be positive, got {self.delta_star}")

    @property
    def c0(self) -> float:
        return min(0.25, self.mu**2, 0.5 * self.delta_star, self.nu**2)

    def with_(self, **kw) -> "ModelConstants":
        data = {k: getattr(self, k) for k in
                ("mu", "nu", "eps", "t_final", "tau", "delta_star")}
        data.update(kw)
        return ModelConstants(**data)


@dataclass
class MaterialFunctions:
    """User-supplied scalar material laws, all vectorized over numpy arrays.

    ``g`` drives the order parameter toward its preferred value and
    ``g_primitive`` is its nonnegative antiderivative.  ``alpha`` (convex,
    alpha'(0) = 0) weights the singular flux and ``alpha0`` (bounded below
    by delta_star) weights the angle's time derivative.  Optional derivative
    callables sharpen the Newton Jacobian; central differences are used when
    they are absent.
    """

    g: Callable
    g_primitive: Callable
    alpha: Callable
    alpha_prime: Callable
    alpha0: Callable
    g_prime: Optional[Callable] = None
    alpha_second: Optional[Callable] = None
    alpha0_prime: Optional[Callable] = None
    _lipschitz_cache: dict = field(default_factory=dict, repr=False)

    def derivative(self, name: str, r: np.ndarray) -> np.ndarray:
        """Derivative of the named law, analytic if provided else central FD."""
        exact = {"g": self.g_prime, "alpha_prime": self.alpha_second,
                 "alpha0": self.alpha0_prime}[name]
        if exact is not None:
            return np.asarray(exact(r), dtype=float)
        func = getattr(self, name)
        h = 1e-6 * np.maximum(1.0, np.abs(r))
        return (np.asarray(func(r + h), dtype=float)
                - np.asarray(func(r - h), dtype=float)) / (2.0 * h)

    def lipschitz_bounds(self, m: float) -> dict:
        """Sampled sup of |g'|, |alpha'|, |alpha0'| over [-m, m]."""
        key = round(float(m), 12)
        if key not in self._lipschitz_cache:
            r = np.linspace(-m, m, _SAMPLES)
            self._lipschitz_cache[key] = {
                "g_prime": float(np.max(np.abs(self.derivative("g", r)))),
                "alpha_prime": float(np.max(np.abs(self.alpha_prime(r)))),
                "alpha0_prime": float(np.max(np.abs(self.derivative("alpha0", r)))),
            }
        return self._lipschitz_cache[key]


@dataclass(frozen=True)
class TruncationBundle:
    """Clamp operator at level m plus the truncated material laws."""

    m: float
    clamp: Callable
    alpha_m: Callable
    alpha_m_prime: Callable
    g_m: Callable
    g_m_primitive: Callable


@dataclass
class Forcing:
    """Space-time forcings: callables (t, coords) -> nodal values, or None.

    ``u_bound`` must dominate sup |u|; it feeds the truncation level.  The
    ``mode`` tag records whether the callables are analytic expressions or
    interpolated tables.
    """

    u: Optional[Callable] = None
    v: Optional[Callable] = None
    u_bound: float = 0.0
    mode: str = "analytic"

    def __post_init__(self):
        if not math.isfinite(self.u_bound) or self.u_bound < 0.0:
            raise ValueError(f"u_bound must be finite and >= 0, got {self.u_bound}")
        if self.u is not None and self.u_bound == 0.0:
            raise ValueError("nonzero u requires a positive declared sup bound")


@dataclass
class Model:
    """Everything the stepper needs: constants, laws, truncation, tolerances."""

    constants: ModelConstants
    funcs: MaterialFunctions
    trunc: TruncationBundle
    tol_inner: float = 1e-10
    tol_energy_factor: float = 1e-8

    def energy_tolerance(self, f_prev: float) -> float:
        return self.tol_energy_factor * (1.0 + abs(f_prev))


def gamma_eps(eps: float, y, axis=None):
    """sqrt(eps^2 + |y|^2); reduces over `axis` or over all of y when None."""
    y = np.asarray(y, dtype=float)
    if axis is None:
        return float(math.sqrt(eps * eps + float(np.sum(y * y))))
    return np.sqrt(eps * eps + np.sum(y * y, axis=axis))


def gamma_eps_conjugate(eps: float, p) -> float:
    """Fenchel conjugate of gamma_eps; +inf outside the closed unit ball.

    Infeasibility (|p| > 1) is a legitimate return value, not an error.
    """
    p = np.asarray(p, dtype=float)
    s = float(np.sum(p * p))
    if s > 1.0 + 1e-12:
        return math.inf
    return -eps * math.sqrt(max(1.0 - s, 0.0))


def _poly_eval(coeffs):
    c = np.asarray(coeffs, dtype=float)

    def f(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        for ck in c[::-1]:
            out = out * r + ck
        return out

    return f


def _poly_derivative(coeffs):
    c = np.asarray(coeffs, dtype=float)
    return tuple(c[k] * k for k in range(1, len(c)))


def material_from_polynomials(g_coeffs, g_primitive_coeffs, alpha_coeffs,
                              alpha0_coeffs) -> MaterialFunctions:
    """Material laws from ascending-power polynomial coefficient lists."""
    return MaterialFunctions(
        g=_poly_eval(g_coeffs),
        g_primitive=_poly_eval(g_primitive_coeffs),
        alpha=_poly_eval(alpha_coeffs),
        alpha_prime=_poly_eval(_poly_derivative(alpha_coeffs)),
        alpha0=_poly_eval(alpha0_coeffs),
        g_prime=_poly_eval(_poly_derivative(g_coeffs)),
        alpha_second=_poly_eval(_poly_derivative(_poly_derivative(alpha_coeffs))),
        alpha0_prime=_poly_eval(_poly_derivative(alpha0_coeffs)),
    )


_PRESETS = {
    # g(r) = r - 1, G(r) = (r-1)^2/2, alpha = r^2, alpha0 = 1 + r^2
    "default": dict(
        g=((-1.0, 1.0), (0.5, -1.0, 0.5)),
        alpha=(0.0, 0.0, 1.0),
        alpha0=(1.0, 0.0, 1.0),
        delta_star=1.0,
    ),
    # same potential and flux weight, constant unit time mobility
    "flat-mobility": dict(
        g=((-1.0, 1.0), (0.5, -1.0, 0.5)),
        alpha=(0.0, 0.0, 1.0),
        alpha0=(1.0,),
        delta_star=1.0,
    ),
}


def preset(name: str):
    """Named (constants, functions) pair satisfying all structural checks."""
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(_PRESETS)}")
    data = _PRESETS[name]
    funcs = material_from_polynomials(
        data["g"][0], data["g"][1], data["alpha"], data["alpha0"]
    )
    constants = ModelConstants(
        mu=1.0, nu=1.0, eps=0.0, t_final=0.5, tau=0.01,
        delta_star=data["delta_star"],
    )
    return constants, funcs


def validate_material_functions(funcs: MaterialFunctions, m: float,
                                delta_star: Optional[float] = None) -> None:
    """Sampled structural checks on [-m, m]; raises ValueError on violation."""
    r = np.linspace(-m, m, _SAMPLES)
    big_g = np.asarray(funcs.g_primitive(r), dtype=float)
    if np.min(big_g) < -1e-12:
        raise ValueError(
            f"primitive of g must be nonnegative; sampled min {np.min(big_g):.3e}"
        )
    h = 1e-5 * max(1.0, m)
    fd = (np.asarray(funcs.g_primitive(r + h)) - np.asarray(funcs.g_primitive(r - h))) / (2 * h)
    gap = np.max(np.abs(fd - np.asarray(funcs.g(r))) / (1.0 + np.abs(funcs.g(r))))
    if gap > 1e-4:
        raise ValueError(
            f"g_primitive' != g: relative finite-difference gap {gap:.3e}"
        )
    if abs(float(np.asarray(funcs.alpha_prime(0.0)))) > 1e-12:
        raise ValueError("alpha_prime(0) must vanish")
    a = np.asarray(funcs.alpha(r), dtype=float)
    if np.min(a) < -1e-12:
        raise ValueError("alpha must be nonnegative")
    second = a[2:] - 2.0 * a[1:-1] + a[:-2]
    if np.min(second) < -1e-10 * max(1.0, np.max(np.abs(a))):
        raise ValueError("alpha must be convex (sampled second differences)")
    a0 = np.asarray(funcs.alpha0(r), dtype=float)
    if delta_star is not None and np.min(a0) < delta_star - 1e-12:
        raise ValueError(
            f"alpha0 dips below delta_star: sampled min {np.min(a0):.6g} "
            f"< {delta_star}"
        )
    if np.min(a0) <= 0.0:
        raise ValueError("alpha0 must be strictly positive")


def make_truncation(funcs: MaterialFunctions, m: float,
                    validate: bool = True) -> TruncationBundle:
    """Truncated laws: equal to the originals on [-m, m], affine outside."""
    m = float(m)
    if m <= 0.0:
        raise ValueError(f"truncation level must be positive, got {m}")
    if validate:
        validate_material_functions(funcs, m)

    def clamp(r):
        return np.clip(r, -m, m)

    a_hi = float(np.asarray(funcs.alpha(m)))
    a_lo = float(np.asarray(funcs.alpha(-m)))
    ap_hi = float(np.asarray(funcs.alpha_prime(m)))
    ap_lo = float(np.asarray(funcs.alpha_prime(-m)))
    gp_hi = float(np.asarray(funcs.g_primitive(m)))
    gp_lo = float(np.asarray(funcs.g_primitive(-m)))
    g_hi = float(np.asarray(funcs.g(m)))
    g_lo = float(np.asarray(funcs.g(-m)))

    def _extended(inner, lo_val, lo_slope, hi_val, hi_slope):
        def f(r):
            r = np.asarray(r, dtype=float)
            out = np.asarray(inner(clamp(r)), dtype=float)
            out = np.where(r > m, hi_val + hi_slope * (r - m), out)
            out = np.where(r < -m, lo_val + lo_slope * (r + m), out)
            return out

        return f

    return TruncationBundle(
        m=m,
        clamp=clamp,
        alpha_m=_extended(funcs.alpha, a_lo, ap_lo, a_hi, ap_hi),
        alpha_m_prime=lambda r: np.asarray(funcs.alpha_prime(clamp(r)), dtype=float),
        g_m=lambda r: np.asarray(funcs.g(clamp(r)), dtype=float),
        g_m_primitive=_extended(funcs.g_primitive, gp_lo, g_lo, gp_hi, g_hi),
    )


def choose_truncation(eta0, u_bound: float, funcs: MaterialFunctions,
                      safety: float = 1.05) -> TruncationBundle:
    """Smallest truncation level covering the data, then a safety margin.

    The level must dominate |eta0|_inf and the forcing bound, and g must have
    the right sign at +-M.  Search: geometric doubling to bracket, then
    bisection to 1e-6; a 1.05 factor guards against floating-point equality
    at the comparison boundary.
    """
    if isinstance(eta0, Field):
        eta_bound = float(np.max(np.abs(eta0.values)))
    else:
        eta_bound = float(np.max(np.abs(np.asarray(eta0, dtype=float))))
    u_bound = float(u_bound)
    if u_bound < 0.0 or not math.isfinite(u_bound):
        raise ValueError(f"u_bound must be finite and >= 0, got {u_bound}")

    def ok(m):
        return (
            m >= eta_bound
            and m >= u_bound
            and float(np.asarray(funcs.g(m))) >= u_bound
            and float(np.asarray(funcs.g(-m))) <= -u_bound
        )

    lo = max(eta_bound, u_bound, 1e-12)
    if ok(lo):
        base = lo
    else:
        hi = max(lo, 1.0)
        while not ok(hi):
            hi *= 2.0
            if hi > 1e9:
                raise ValueError(
                    "no truncation level <= 1e9 satisfies the sign conditions "
                    "on g; the law appears not to diverge at +-infinity"
                )
        while hi - lo > 1e-6:
            mid = 0.5 * (lo + hi)
            if ok(mid):
                hi = mid
            else:
                lo = mid
        base = hi
    bundle = make_truncation(funcs, base * safety)
    assert ok(bundle.m), "selected truncation level fails its own conditions"
    return bundle
