"""Run configuration: a line-oriented ``key = value`` format with sections.

Grammar (full reference in the README):

    [grid]        dim, lengths, cells
    [model]       preset | polynomial laws, mu, nu, eps, T, tau, delta_star
    [initial]     eta0, theta0 as expressions
    [forcing]     u, v as expressions, u_bound
    [output]      directory, snapshot_stride, studies
    [tolerances]  tol_inner, tol_energy

Field/forcing expressions are a kind token followed by numbers:
``constant c``, ``linear a bx [by]``, ``sinusoidal offset amp fx [fy]
[phase]`` (forcing variants carry a trailing time frequency), ``pulse c t0
t1`` (forcing only), ``tabulated path``, ``zero`` (forcing only).

Every parse error carries the offending line number.  A parsed config is
pure data: echoing it and re-parsing the echo reproduces it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import Field, Grid, build_grid
from .model import (Forcing, MaterialFunctions, Model, ModelConstants,
                    choose_truncation, material_from_polynomials, preset,
                    validate_material_functions)

_SAMPLES = 10_000


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(f"line {lineno}: {message}" if lineno else message)
        self.lineno = lineno


_KNOWN_KEYS = {
    "grid": {"dim", "lengths", "cells"},
    "model": {"preset", "mu", "nu", "eps", "T", "tau", "delta_star",
              "g_poly", "G_poly", "alpha_poly", "alpha0_poly"},
    "initial": {"eta0", "theta0"},
    "forcing": {"u", "v", "u_bound"},
    "output": {"directory", "snapshot_stride", "studies"},
    "tolerances": {"tol_inner", "tol_energy"},
}

_INITIAL_KINDS = {"constant", "linear", "sinusoidal", "tabulated"}
_FORCING_KINDS = {"zero", "constant", "pulse", "sinusoidal", "tabulated"}
_STUDY_KINDS = {"tau", "eps", "gronwall"}


@dataclass(frozen=True)
class RunConfig:
    """Validated, purely-data run description."""

    dim: int
    lengths: tuple
    cells: tuple
    mu: float
    nu: float
    eps: float
    t_final: float
    tau: float
    preset_name: Optional[str]
    g_poly: Optional[tuple]
    g_primitive_poly: Optional[tuple]
    alpha_poly: Optional[tuple]
    alpha0_poly: Optional[tuple]
    delta_star: Optional[float]
    eta0: tuple
    theta0: tuple
    u: tuple
    v: tuple
    u_bound: Optional[float]
    outdir: str = "out"
    snapshot_stride: int = 0
    studies: tuple = ()
    tol_inner: float = 1e-10
    tol_energy: float = 1e-8

    def echo(self) -> str:
        """Canonical text form; re-parsing it reproduces this config."""
        def num(x):
            return f"{x:.17g}"

        def nums(xs):
            return " ".join(num(x) for x in xs)

        def expr(spec):
            kind, *rest = spec
            parts = [kind] + [p if isinstance(p, str) else num(p) for p in rest]
            return " ".join(parts)

        lines = ["[grid]", f"dim = {self.dim}",
                 f"lengths = {nums(self.lengths)}",
                 f"cells = {' '.join(str(c) for c in self.cells)}", "",
                 "[model]"]
        if self.preset_name is not None:
            lines.append(f"preset = {self.preset_name}")
        else:
            lines.append(f"g_poly = {nums(self.g_poly)}")
            lines.append(f"G_poly = {nums(self.g_primitive_poly)}")
            lines.append(f"alpha_poly = {nums(self.alpha_poly)}")
            lines.append(f"alpha0_poly = {nums(self.alpha0_poly)}")
        if self.delta_star is not None:
            lines.append(f"delta_star = {num(self.delta_star)}")
        lines += [f"mu = {num(self.mu)}", f"nu = {num(self.nu)}",
                  f"eps = {num(self.eps)}", f"T = {num(self.t_final)}",
                  f"tau = {num(self.tau)}", "", "[initial]",
                  f"eta0 = {expr(self.eta0)}", f"theta0 = {expr(self.theta0)}",
                  "", "[forcing]", f"u = {expr(self.u)}", f"v = {expr(self.v)}"]
        if self.u_bound is not None:
            lines.append(f"u_bound = {num(self.u_bound)}")
        lines += ["", "[output]", f"directory = {self.outdir}",
                  f"snapshot_stride = {self.snapshot_stride}"]
        if self.studies:
            lines.append(f"studies = {','.join(self.studies)}")
        lines += ["", "[tolerances]", f"tol_inner = {num(self.tol_inner)}",
                  f"tol_energy = {num(self.tol_energy)}"]
        return "\n".join(lines) + "\n"

    def assemble(self) -> "Assembled":
        """Build the grid, model, fields and forcing this config describes."""
        grid = build_grid(self.dim, self.lengths, self.cells)
        if self.preset_name is not None:
            _, funcs = preset(self.preset_name)
        else:
            funcs = material_from_polynomials(
                self.g_poly, self.g_primitive_poly, self.alpha_poly,
                self.alpha0_poly)
        eta0 = build_initial_field(self.eta0, grid)
        theta0 = build_initial_field(self.theta0, grid)

        u_call, u_auto = build_forcing_callable(self.u, grid, self.t_final)
        v_call, _ = build_forcing_callable(self.v, grid, self.t_final)
        u_bound = self.u_bound if self.u_bound is not None else u_auto
        if u_call is not None and u_bound < u_auto - 1e-12 * (1.0 + u_auto):
            raise ConfigError(
                f"declared u_bound {u_bound} is below the expression's sup "
                f"{u_auto}")
        forcing = Forcing(u=u_call, v=v_call, u_bound=u_bound)

        trunc = choose_truncation(eta0, u_bound, funcs)
        if self.delta_star is not None:
            delta_star = self.delta_star
        else:
            r = np.linspace(-trunc.m, trunc.m, _SAMPLES)
            delta_star = float(np.min(np.asarray(funcs.alpha0(r))))
        validate_material_functions(funcs, trunc.m, delta_star=delta_star)
        constants = ModelConstants(mu=self.mu, nu=self.nu, eps=self.eps,
                                   t_final=self.t_final, tau=self.tau,
                                   delta_star=delta_star)
        model = Model(constants, funcs, trunc, tol_inner=self.tol_inner,
                      tol_energy_factor=self.tol_energy)
        return Assembled(grid=grid, model=model, eta0=eta0, theta0=theta0,
                         forcing=forcing)


@dataclass
class Assembled:
    grid: Grid
    model: Model
    eta0: Field
    theta0: Field
    forcing: Forcing


def _read_entries(text: str):
    entries = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _KNOWN_KEYS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside any [section]", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        entries.append((section, key, value, lineno))
    return entries


class _Entries:
    def __init__(self, entries):
        self.data = {}
        for section, key, value, lineno in entries:
            if (section, key) in self.data:
                raise ConfigError(f"duplicate key {key!r} in [{section}]",
                                  lineno)
            self.data[(section, key)] = (value, lineno)

    def get(self, section, key, default=None):
        return self.data.get((section, key), (default, None))

    def typed(self, section, key, conv, default=None, required=False):
        value, lineno = self.get(section, key)
        if value is None:
            if required:
                raise ConfigError(f"missing required key {key!r} in "
                                  f"[{section}]")
            return default
        try:
            return conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from exc

    def lineno(self, section, key):
        return self.data.get((section, key), (None, None))[1]


def _floats(value: str) -> tuple:
    return tuple(float(tok) for tok in value.split())


def _ints(value: str) -> tuple:
    return tuple(int(tok) for tok in value.split())


def _expression(value: str, kinds) -> tuple:
    toks = value.split()
    if not toks or toks[0] not in kinds:
        raise ValueError(f"expression must start with one of {sorted(kinds)}")
    kind = toks[0]
    if kind == "tabulated":
        if len(toks) != 2:
            raise ValueError("tabulated expression takes exactly one path")
        return (kind, toks[1])
    return (kind, *(float(tok) for tok in toks[1:]))


def parse_config(path: str, quiet: bool = False) -> RunConfig:
    """Parse, validate, and assemble-check a configuration file.

    The truncation level implied by the data is computed up front and echoed
    so the user can see what the comparison bound will be.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, quiet=quiet)


def parse_config_text(text: str, quiet: bool = False) -> RunConfig:
    ent = _Entries(_read_entries(text))

    dim = ent.typed("grid", "dim", int, required=True)
    if dim not in (1, 2):
        raise ConfigError(f"dim must be 1 or 2, got {dim}",
                          ent.lineno("grid", "dim"))
    lengths = ent.typed("grid", "lengths", _floats, required=True)
    cells = ent.typed("grid", "cells", _ints, required=True)
    if len(lengths) != dim or len(cells) != dim:
        raise ConfigError(
            f"lengths/cells must have {dim} entries",
            ent.lineno("grid", "lengths"))
    if any(L <= 0 for L in lengths):
        raise ConfigError("domain extents must be positive",
                          ent.lineno("grid", "lengths"))
    if any(c < 1 for c in cells):
        raise ConfigError("cell counts must be >= 1",
                          ent.lineno("grid", "cells"))

    preset_name = ent.typed("model", "preset", str)
    polys = {k: ent.typed("model", k, _floats)
             for k in ("g_poly", "G_poly", "alpha_poly", "alpha0_poly")}
    if preset_name is None and any(v is None for v in polys.values()):
        raise ConfigError(
            "either 'preset' or all of g_poly, G_poly, alpha_poly, "
            "alpha0_poly must be given in [model]")
    if preset_name is not None and any(v is not None for v in polys.values()):
        raise ConfigError("preset and polynomial laws are mutually exclusive",
                          ent.lineno("model", "preset"))

    mu = ent.typed("model", "mu", float, default=1.0)
    if mu <= 0:
        raise ConfigError("mu must be strictly positive",
                          ent.lineno("model", "mu"))
    nu = ent.typed("model", "nu", float, default=1.0)
    if nu <= 0:
        raise ConfigError("nu must be strictly positive",
                          ent.lineno("model", "nu"))
    eps = ent.typed("model", "eps", float, default=0.0)
    if eps < 0:
        raise ConfigError("eps must be nonnegative",
                          ent.lineno("model", "eps"))
    t_final = ent.typed("model", "T", float, default=0.5)
    if t_final < 0:
        raise ConfigError("T must be nonnegative", ent.lineno("model", "T"))
    tau = ent.typed("model", "tau", float, default=0.01)
    if tau <= 0:
        raise ConfigError("tau must be strictly positive",
                          ent.lineno("model", "tau"))
    delta_star = ent.typed("model", "delta_star", float)
    if delta_star is not None and delta_star <= 0:
        raise ConfigError("delta_star must be strictly positive",
                          ent.lineno("model", "delta_star"))

    eta0 = ent.typed("initial", "eta0",
                     lambda v: _expression(v, _INITIAL_KINDS), required=True)
    theta0 = ent.typed("initial", "theta0",
                       lambda v: _expression(v, _INITIAL_KINDS), required=True)
    u = ent.typed("forcing", "u",
                  lambda v: _expression(v, _FORCING_KINDS), default=("zero",))
    v = ent.typed("forcing", "v",
                  lambda v_: _expression(v_, _FORCING_KINDS),
                  default=("zero",))
    u_bound = ent.typed("forcing", "u_bound", float)
    if u_bound is not None and (u_bound < 0 or not math.isfinite(u_bound)):
        raise ConfigError("u_bound must be finite and nonnegative",
                          ent.lineno("forcing", "u_bound"))

    outdir = ent.typed("output", "directory", str, default="out")
    stride = ent.typed("output", "snapshot_stride", int, default=0)
    if stride < 0:
        raise ConfigError("snapshot_stride must be >= 0",
                          ent.lineno("output", "snapshot_stride"))
    studies_raw = ent.typed("output", "studies", str, default="")
    studies = tuple(s.strip() for s in studies_raw.split(",") if s.strip())
    for s in studies:
        if s not in _STUDY_KINDS:
            raise ConfigError(f"unknown study {s!r}; known: "
                              f"{sorted(_STUDY_KINDS)}",
                              ent.lineno("output", "studies"))

    tol_inner = ent.typed("tolerances", "tol_inner", float, default=1e-10)
    tol_energy = ent.typed("tolerances", "tol_energy", float, default=1e-8)
    if tol_inner <= 0 or tol_energy <= 0:
        raise ConfigError("tolerances must be strictly positive")

    config = RunConfig(
        dim=dim, lengths=lengths, cells=cells, mu=mu, nu=nu, eps=eps,
        t_final=t_final, tau=tau, preset_name=preset_name,
        g_poly=polys["g_poly"], g_primitive_poly=polys["G_poly"],
        alpha_poly=polys["alpha_poly"], alpha0_poly=polys["alpha0_poly"],
        delta_star=delta_star, eta0=eta0, theta0=theta0, u=u, v=v,
        u_bound=u_bound, outdir=outdir, snapshot_stride=stride,
        studies=studies, tol_inner=tol_inner, tol_energy=tol_energy,
    )
    assembled = config.assemble()  # full structural validation
    if not quiet:
        print(f"truncation level M = {assembled.model.trunc.m:.6g}")
    return config


def _spatial_profile(spec: tuple, grid: Grid) -> np.ndarray:
    kind = spec[0]
    coords = grid.node_coords
    x = coords[:, 0]
    if kind == "constant":
        (c,) = spec[1:]
        return np.full(grid.node_count, float(c))
    if kind == "linear":
        args = spec[1:]
        if len(args) != 1 + grid.dim:
            raise ConfigError(
                f"linear expression needs {1 + grid.dim} numbers in "
                f"{grid.dim}D, got {len(args)}")
        out = np.full(grid.node_count, float(args[0])) + float(args[1]) * x
        if grid.dim == 2:
            out += float(args[2]) * coords[:, 1]
        return out
    if kind == "sinusoidal":
        args = spec[1:]
        base = 2 + grid.dim  # offset, amplitude, one frequency per axis
        if len(args) not in (base, base + 1):
            raise ConfigError(
                f"sinusoidal expression needs {base} numbers plus an "
                f"optional phase in {grid.dim}D, got {len(args)}")
        offset, amp, fx = float(args[0]), float(args[1]), float(args[2])
        phase = float(args[base]) if len(args) > base else 0.0
        out = np.sin(2.0 * math.pi * fx * x + phase)
        if grid.dim == 2:
            fy = float(args[3])
            out = out * np.cos(2.0 * math.pi * fy * coords[:, 1])
        return offset + amp * out
    if kind == "tabulated":
        from .outputs import read_snapshot

        loaded = read_snapshot(spec[1])
        if loaded.grid != grid:
            raise ConfigError(
                f"tabulated file {spec[1]} holds a {loaded.grid!r}, "
                f"config grid is {grid!r}")
        return loaded.values
    raise ConfigError(f"unknown expression kind {kind!r}")


def build_initial_field(spec: tuple, grid: Grid) -> Field:
    return Field(grid, _spatial_profile(spec, grid))


def build_forcing_callable(spec: tuple, grid: Grid, t_final: float):
    """Expression to space-time callable plus its sup bound; None when zero."""
    kind = spec[0]
    if kind == "zero":
        return None, 0.0
    if kind == "constant":
        (c,) = spec[1:]
        c = float(c)
        if c == 0.0:
            return None, 0.0
        vals = np.full(grid.node_count, c)
        return (lambda t, coords: vals), abs(c)
    if kind == "pulse":
        c, t0, t1 = (float(a) for a in spec[1:])
        vals = np.full(grid.node_count, c)
        zero = np.zeros(grid.node_count)
        return (lambda t, coords: vals if t0 <= t <= t1 else zero), abs(c)
    if kind == "sinusoidal":
        *space, ft = spec[1:]
        profile = _spatial_profile(("sinusoidal", *space), grid)
        ft = float(ft)
        bound = float(np.max(np.abs(profile)))
        return (lambda t, coords: profile
                * math.cos(2.0 * math.pi * ft * t)), bound
    if kind == "tabulated":
        from .outputs import read_snapshot

        loaded = read_snapshot(spec[1])
        if loaded.grid != grid:
            raise ConfigError(
                f"tabulated file {spec[1]} holds a {loaded.grid!r}, "
                f"config grid is {grid!r}")
        vals = loaded.values
        return (lambda t, coords: vals), float(np.max(np.abs(vals)))
    raise ConfigError(f"unknown forcing kind {kind!r}")
