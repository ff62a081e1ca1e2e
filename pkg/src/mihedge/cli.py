"""Config-driven experiment runner.

Each experiment is one JSON file with a ``kind``, a ``seed``, optional
``grid`` and ``out`` entries and a kind-specific ``params`` block. The run
writes ``report.json`` (aggregates and checks) and ``report.csv`` (rows)
into the output directory and exits with

    0  all checks pass
    1  malformed config (the diagnostic names the line or field)
    2  a tolerance check failed
    3  a coefficient discrepancy was documented (adjudicate)
    4  infeasible market input
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path as FsPath
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator

from . import SPEC_VERSION
from .families import AdjudicationFailure, ConstraintError, adjudicate, family
from .functionals import (Asset, FunctionalSpec, LevelSet, RunningMax, Weight, WeightedQV,
                          stopping_set_from_dict, track)
from .hedging import Claim, HedgeReport, drift_test, run_backtest, sweep
from .market import (CalibrationError, CallStrip, check_strip, dupire_calibrate, reprice,
                     support_diagnostic)
from .paths import InfeasibleMarket, Spliced, TimeGrid, model_from_dict, simulate
from .payoffs import Payoff
from .pde import (DomainError, ScalarField, Timer, halton_samples, lookback_field, operators,
                  polynomial_field, residual, solve_parabolic)

EXIT_OK, EXIT_MALFORMED, EXIT_TOLERANCE, EXIT_DISCREPANCY, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

CSV_SCHEMAS = """\
report.csv columns by kind:
  hedge, cashflow  path,wealth,target,error,max_gap,hit_time,stopped
  sweep            model,n_paths,mean_error,se,t_stat,rms,mean_abs_error,max_abs_error,frac_unstopped,error
  residual         point,x1..xn,l_gamma,l_ab_max
  adjudicate       variant,kappa,residual,selected
  lookback         check,x1,x2,x3,value,residual
  calibrate        strike,target,price,se,rel_error   (plus surface.csv: t,k,sigma)
  check-strip      strike,price,time_value,slope,kink
  drift            window,increment
  support          a,b,probability,se,slope_a,slope_b,strict
Floats are written with repr(), rows in path or input order, so equal
configs and seeds give byte-identical files.
"""


class ConfigError(ValueError):
    """Config parsed but could not be turned into module objects."""

    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------- blocks


class GridCfg(_Strict):
    T: float = Field(gt=0)
    n_steps: int = Field(ge=1, le=2**20)

    def build(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.n_steps)


class TimerField(_Strict):
    kind: Literal["timer"]
    f: dict
    w: dict = {"kind": "inv_square"}
    q: float = Field(gt=0)
    s0: float = Field(default=1.0, gt=0)
    method: Literal["pde", "analytic"] = "pde"
    n_space: int = Field(default=1600, ge=16, le=20000)
    n_clock: int = Field(default=1600, ge=4, le=20000)


class Term(_Strict):
    exponents: list[int]
    c: float


class PolynomialField(_Strict):
    kind: Literal["polynomial"]
    terms: list[Term] = Field(min_length=1)
    functional: dict
    stopping: Optional[dict] = None


class FamilyField(_Strict):
    kind: Literal["family"]
    tag: Literal["TVS", "MFIV", "MFVV", "MFIL"]
    c: list[float] = [1.0]
    g: Optional[dict] = None
    weight: Optional[dict] = None
    kappa: Optional[float] = None
    s_ref: float = Field(default=1.0, gt=0)
    stopping: Optional[dict] = None


FieldCfg = Annotated[Union[TimerField, PolynomialField, FamilyField], Field(discriminator="kind")]


class HedgeChecks(_Strict):
    max_abs_error: Optional[float] = Field(default=None, ge=0)
    max_abs_t: Optional[float] = Field(default=None, gt=0)
    min_abs_t: Optional[float] = Field(default=None, ge=0)
    max_rel_mean: Optional[float] = Field(default=None, ge=0)


class StripCfg(_Strict):
    s0: float = Field(gt=0)
    strikes: list[float] = Field(min_length=2)
    prices: list[float] = Field(min_length=2)


# ---------------------------------------------------------------- params


class HedgeParams(_Strict):
    claim: FieldCfg
    model: dict
    n_paths: int = Field(ge=2, le=10**7)
    chunk: int = Field(default=64, ge=1)
    checks: HedgeChecks = HedgeChecks()


class SweepParams(_Strict):
    claim: FieldCfg
    models: list[dict] = Field(min_length=1)
    names: Optional[list[str]] = None
    n_paths: int = Field(ge=2, le=10**7)
    chunk: int = Field(default=64, ge=1)
    checks: HedgeChecks = HedgeChecks()


class ResidualParams(_Strict):
    field: FieldCfg
    box: Optional[list[tuple[float, float]]] = None
    n_samples: int = Field(default=256, ge=1, le=10**6)
    tol: float = Field(default=1e-8, gt=0)
    allow_extrema: bool = False


class AdjudicateParams(_Strict):
    tag: Literal["TVS", "MFIV", "MFVV", "MFIL"]
    g: Optional[dict] = None
    weight: Optional[dict] = None
    box: Optional[list[tuple[float, float]]] = None
    n_samples: int = Field(default=256, ge=1, le=10**6)
    c: Optional[list[float]] = None


class LookbackParams(_Strict):
    payoff: Literal["max", "terminal", "max_minus_terminal"] = "max"
    q: float = Field(default=1.0, gt=0)
    n_nodes: int = Field(default=200, ge=10, le=2000)
    n_interior: int = Field(default=50, ge=1, le=10**4)
    n_boundary: int = Field(default=10, ge=1, le=10**4)
    expected_origin: Optional[float] = None
    value_tol: float = Field(default=1e-4, gt=0)
    boundary_tol: float = Field(default=1e-6, gt=0)
    pde_tol: float = Field(default=1e-6, gt=0)


class CalibrateParams(_Strict):
    strip: StripCfg
    T: float = Field(gt=0)
    base: Literal["implied", "thresholds"] = "implied"
    n_k: int = Field(default=241, ge=16, le=5000)
    n_t: int = Field(default=65, ge=4, le=2000)
    n_paths: int = Field(default=200_000, ge=2, le=10**8)
    n_steps: int = Field(default=4096, ge=1, le=2**20)
    rel_tol: float = Field(default=0.01, ge=0)
    n_se: float = Field(default=3.0, ge=0)
    sigma_bounds: Optional[tuple[float, float]] = None


class CheckStripParams(_Strict):
    strip: StripCfg


class DriftParams(_Strict):
    field: FieldCfg
    model: dict
    n_paths: int = Field(ge=2, le=10**7)
    chunk: int = Field(default=64, ge=1)
    expect: Literal["in_class", "not_in_class"] = "in_class"
    t_threshold: Optional[float] = Field(default=None, gt=0)


class SupportParams(_Strict):
    model: dict
    t: float = Field(gt=0)
    intervals: list[tuple[float, float]] = Field(min_length=1)
    n_paths: int = Field(default=10_000, ge=2, le=10**8)
    n_steps: int = Field(default=64, ge=1, le=2**20)
    expect_strict: Optional[bool] = None

    @field_validator("intervals")
    @classmethod
    def _ordered(cls, v):
        for a, b in v:
            if not 0 < a < b:
                raise ValueError(f"interval ({a}, {b}) must satisfy 0 < a < b")
        return v


class _Base(_Strict):
    seed: int = Field(default=0, ge=0)
    out: Optional[str] = None
    grid: Optional[GridCfg] = None


class HedgeConfig(_Base):
    kind: Literal["hedge"]
    params: HedgeParams


class CashflowConfig(_Base):
    kind: Literal["cashflow"]
    params: HedgeParams


class SweepConfig(_Base):
    kind: Literal["sweep"]
    params: SweepParams


class ResidualConfig(_Base):
    kind: Literal["residual"]
    params: ResidualParams


class AdjudicateConfig(_Base):
    kind: Literal["adjudicate"]
    params: AdjudicateParams


class LookbackConfig(_Base):
    kind: Literal["lookback"]
    params: LookbackParams = LookbackParams()


class CalibrateConfig(_Base):
    kind: Literal["calibrate"]
    params: CalibrateParams


class CheckStripConfig(_Base):
    kind: Literal["check-strip"]
    params: CheckStripParams


class DriftConfig(_Base):
    kind: Literal["drift"]
    params: DriftParams


class SupportConfig(_Base):
    kind: Literal["support"]
    params: SupportParams


ExperimentConfig = Annotated[
    Union[HedgeConfig, CashflowConfig, SweepConfig, ResidualConfig, AdjudicateConfig, LookbackConfig,
          CalibrateConfig, CheckStripConfig, DriftConfig, SupportConfig],
    Field(discriminator="kind")]

_ADAPTER = TypeAdapter(ExperimentConfig)
_NEEDS_GRID = ("hedge", "cashflow", "sweep", "drift")


def parse_config(text: str):
    """Parse and validate a JSON config; raises ConfigError with a line or field."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}, column {e.colno}", e.msg) from None
    try:
        cfg = _ADAPTER.validate_python(raw)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            parts = list(err["loc"])
            if parts and isinstance(raw, dict) and parts[0] == raw.get("kind"):
                parts = parts[1:]
            loc = ".".join(str(p) for p in parts) or "kind"
            line = None if err["type"] == "missing" else _line_of(text, parts)
            problems.append(f"field {loc}" + (f" (line {line})" if line else "") + f": {err['msg']}")
        first, _, msg = problems[0].partition(": ")
        raise ConfigError(first, "; ".join([msg] + problems[1:])) from None
    if cfg.kind in _NEEDS_GRID and cfg.grid is None:
        raise ConfigError("field grid", f"kind {cfg.kind!r} needs a grid block")
    return cfg


def _line_of(text: str, loc) -> Optional[int]:
    keys = [p for p in loc if isinstance(p, str)]
    for key in reversed(keys):
        needle = f'"{key}"'
        for i, line in enumerate(text.splitlines(), 1):
            if needle in line:
                return i
    return None


# ---------------------------------------------------------------- builders


def _build(where: str, fn, *args):
    try:
        return fn(*args)
    except (ValueError, TypeError, KeyError) as e:
        if isinstance(e, InfeasibleMarket):
            raise
        raise ConfigError(where, f"{type(e).__name__}: {e}") from None


def _payoff(d: dict, where: str) -> Payoff:
    return _build(where, Payoff.from_dict, d)


def _weight(d: dict, where: str) -> Weight:
    return _build(where, lambda: Weight.from_dict(dict(d)))


def timer_field(f: Payoff, w: Weight, q: float) -> Optional[ScalarField]:
    """Exact timer fields: affine payoffs under any weight, x^2 under c/x^2."""
    if f.kind == "linear":
        a, b = f.a, f.b
        return ScalarField(lambda x: a + b * x[..., 0], 2,
                           lambda x: np.stack([b + 0 * x[..., 0], 0 * x[..., 0]], -1),
                           lambda x: np.zeros(x.shape + (2,)), None, "affine")
    if f.kind == "power" and f.p == 2 and w.kind == "inv_square":
        c = w.c

        def fn(x):
            return x[..., 0] ** 2 * np.exp((q - x[..., 1]) / c)

        def grad(x):
            e = np.exp((q - x[..., 1]) / c)
            return np.stack([2 * x[..., 0] * e, -x[..., 0] ** 2 * e / c], -1)

        def hess(x):
            e = np.exp((q - x[..., 1]) / c)
            s = x[..., 0]
            h01 = -2 * s * e / c
            return np.stack([np.stack([2 * e, h01], -1), np.stack([h01, s * s * e / c**2], -1)], -2)

        return ScalarField(fn, 2, grad, hess, None, "square")
    return None


def build_claim(cfg, where: str) -> Claim:
    if isinstance(cfg, TimerField):
        f = _payoff(cfg.f, f"{where}.f")
        w = _weight(cfg.w, f"{where}.w")
        if w.on != 0:
            raise ConfigError(f"{where}.w.on", "timer weights depend on the price (on = 0)")
        spec = FunctionalSpec(("S",), (Asset("S"), WeightedQV("S", w)))
        if cfg.method == "analytic":
            F = timer_field(f, w, cfg.q)
            if F is None:
                raise ConfigError(f"{where}.method", "no closed form for this payoff and weight")
        else:
            problem = _build(where, Timer, f, w, cfg.q, cfg.s0, cfg.n_space, cfg.n_clock)
            F = solve_parabolic(problem).as_scalar_field()
        return Claim(F, spec, LevelSet(1, cfg.q), lambda x, f=f: f(x[..., 0]), "timer")
    if isinstance(cfg, PolynomialField):
        spec = _build(f"{where}.functional", FunctionalSpec.from_dict, cfg.functional)
        coeffs = {}
        for i, t in enumerate(cfg.terms):
            if len(t.exponents) != spec.n or min(t.exponents) < 0:
                raise ConfigError(f"{where}.terms.{i}.exponents",
                                  f"need {spec.n} nonnegative exponents")
            key = tuple(t.exponents)
            coeffs[key] = coeffs.get(key, 0.0) + t.c
        B = None if cfg.stopping is None else _build(f"{where}.stopping", stopping_set_from_dict, cfg.stopping)
        return Claim(polynomial_field(coeffs, spec.n), spec, B, None, "polynomial")
    g = None if cfg.g is None else _payoff(cfg.g, f"{where}.g")
    w = None if cfg.weight is None else _weight(cfg.weight, f"{where}.weight")
    try:
        cf = family(cfg.tag, tuple(cfg.c), g, w, kappa=cfg.kappa, s_ref=cfg.s_ref)
    except (ConstraintError, ValueError) as e:
        raise ConfigError(where, str(e)) from None
    B = None if cfg.stopping is None else _build(f"{where}.stopping", stopping_set_from_dict, cfg.stopping)
    return Claim(cf.field, cf.spec, B, None, cfg.tag)


def build_model(d: dict, where: str):
    return _build(where, model_from_dict, d)


# ---------------------------------------------------------------- output


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                    for v in r])
    return buf.getvalue()


class Outcome:
    """Collects checks and flags while an experiment runs."""

    def __init__(self):
        self.checks = []
        self.discrepancy = False
        self.infeasible = False
        self.error = None

    def check(self, name: str, value, bound, ok: bool):
        self.checks.append({"name": name, "value": value, "bound": bound, "pass": bool(ok)})

    @property
    def exit_code(self) -> int:
        if self.infeasible:
            return EXIT_INFEASIBLE
        if self.discrepancy:
            return EXIT_DISCREPANCY
        if self.error is not None or not all(c["pass"] for c in self.checks):
            return EXIT_TOLERANCE
        return EXIT_OK


def _hedge_checks(out: Outcome, rep: HedgeReport, checks: HedgeChecks, scale: float, prefix: str = ""):
    if checks.max_abs_error is not None:
        out.check(prefix + "max_abs_error", rep.max_abs, checks.max_abs_error,
                  rep.max_abs <= checks.max_abs_error)
    if checks.max_abs_t is not None:
        out.check(prefix + "abs_t_stat", abs(rep.t_stat), checks.max_abs_t, abs(rep.t_stat) < checks.max_abs_t)
    if checks.min_abs_t is not None:
        out.check(prefix + "abs_t_stat_min", abs(rep.t_stat), checks.min_abs_t,
                  abs(rep.t_stat) > checks.min_abs_t)
    if checks.max_rel_mean is not None:
        rel = abs(rep.mean_error) / abs(scale) if scale else float("inf")
        out.check(prefix + "rel_mean_error", rel, checks.max_rel_mean, rel <= checks.max_rel_mean)


def _initial_value(claim: Claim, model, grid: TimeGrid, seed: int) -> float:
    ps = simulate(model, TimeGrid(grid.times[:2]), seed, 1)
    return float(claim.F.value(track(claim.spec, ps).x[0, 0]))


# ---------------------------------------------------------------- runners


def _run_hedge(cfg, out: Outcome, threads: int):
    p = cfg.params
    claim = build_claim(p.claim, "params.claim")
    model = build_model(p.model, "params.model")
    grid = cfg.grid.build()
    cashflow = cfg.kind == "cashflow"
    rep = run_backtest(claim, model, grid, p.n_paths, cfg.seed, p.chunk, cashflow=cashflow, threads=threads)
    f0 = _initial_value(claim, model, grid, cfg.seed)
    scale = f0 * grid.T if cashflow else f0
    _hedge_checks(out, rep, p.checks, scale)
    return {"aggregates": rep.aggregates(), "initial_value": f0}, rep.to_csv()


def _run_sweep(cfg, out: Outcome, threads: int):
    p = cfg.params
    claim = build_claim(p.claim, "params.claim")
    models = [build_model(m, f"params.models.{i}") for i, m in enumerate(p.models)]
    if p.names is not None and len(p.names) != len(models):
        raise ConfigError("params.names", "one name per model")
    grid = cfg.grid.build()
    rep = sweep(claim, models, grid, p.n_paths, cfg.seed, threads=threads, chunk=p.chunk, names=p.names)
    cols = ["n_paths", "mean_error", "se", "t_stat", "rms", "mean_abs_error", "max_abs_error", "frac_unstopped"]
    rows = []
    for name, r, err, m in zip(rep.names, rep.reports, rep.errors, models):
        if r is None:
            out.check(f"{name}:run", err, None, False)
            rows.append([name] + [None] * len(cols) + [err])
            continue
        _hedge_checks(out, r, p.checks, _initial_value(claim, m, grid, cfg.seed), f"{name}:")
        agg = r.aggregates()
        rows.append([name] + [agg[c] for c in cols] + [None])
    return {"models": rep.table()}, _rows_csv(["model"] + cols + ["error"], rows)


def _sample_box(cfg, box) -> np.ndarray:
    if box is not None:
        return np.asarray(box, dtype=float)
    if isinstance(cfg, FamilyField):
        from .families import default_box

        return default_box(cfg.tag)
    raise ConfigError("params.box", "a sampling box is required for this field kind")


def _run_residual(cfg, out: Outcome, threads: int):
    p = cfg.params
    claim = build_claim(p.field, "params.field")
    box = _sample_box(p.field, p.box)
    if box.shape != (claim.spec.n, 2) or np.any(box[:, 0] >= box[:, 1]):
        raise ConfigError("params.box", f"need {claim.spec.n} intervals [lo, hi] with lo < hi")
    x = halton_samples(box, p.n_samples)
    rep = residual(claim.F, claim.spec, x, p.allow_extrema)
    ov = operators(claim.F, claim.spec, x, p.allow_extrema)
    lab = np.abs(ov.l_ab).reshape(len(x), -1).max(axis=1)
    out.check("residual", rep.max_abs, p.tol, rep.max_abs < p.tol)
    header = ["point"] + [f"x{i + 1}" for i in range(claim.spec.n)] + ["l_gamma", "l_ab_max"]
    rows = [[i, *map(float, x[i]), float(np.abs(ov.l_gamma[i])), float(lab[i])] for i in range(len(x))]
    return {"residual": rep.to_dict()}, _rows_csv(header, rows)


def _run_adjudicate(cfg, out: Outcome, threads: int):
    p = cfg.params
    g = None if p.g is None else _payoff(p.g, "params.g")
    w = None if p.weight is None else _weight(p.weight, "params.weight")
    box = None if p.box is None else np.asarray(p.box, dtype=float)
    try:
        rep = adjudicate(p.tag, g, w, box, p.n_samples, None if p.c is None else tuple(p.c))
    except AdjudicationFailure as e:
        out.check("variant_passes", None, None, False)
        rep = e.report
        if rep is None:
            out.error = str(e)
            return {"error": str(e)}, _rows_csv(["variant", "kappa", "residual", "selected"], [])
    except ValueError as e:
        raise ConfigError("params", str(e)) from None
    else:
        out.check("variant_passes", rep.residuals[rep.selected], 1e-8, True)
    out.discrepancy = bool(rep.discrepancy)
    rows = [[k, rep.kappas[k], rep.residuals[k], int(k == rep.selected)] for k in rep.residuals]
    return {"adjudication": rep.to_dict()}, _rows_csv(["variant", "kappa", "residual", "selected"], rows)


_LOOKBACK = {
    "max": (lambda s, m: m + 0.0 * s, math.sqrt(2 / math.pi)),
    "terminal": (lambda s, m: s + 0.0 * m, 0.0),
    "max_minus_terminal": (lambda s, m: m - s, math.sqrt(2 / math.pi)),
}


def lookback_checks(F: ScalarField, q: float, n_interior: int, n_boundary: int):
    """Heat-equation residuals at interior points and d/dx2 on the diagonal."""
    spec = FunctionalSpec(("S",), (Asset("S"), RunningMax("S"), WeightedQV("S")))
    u = halton_samples(np.array([[-1.0, 1.0], [0.05, 1.0], [0.0, 0.8 * q]]), n_interior)
    inner = np.stack([u[:, 0] - u[:, 1], u[:, 0], u[:, 2]], -1)
    ov = operators(F, spec, inner, allow_extrema=True)
    heat = np.abs(ov.l_ab[:, 0, 0])
    v = halton_samples(np.array([[-1.0, 1.0], [0.0, 0.8 * q]]), n_boundary)
    h = 1e-4
    bc = []
    for s, x3 in v:
        f = [float(F.value(np.array([s, s + j * h, x3]))) for j in range(3)]
        bc.append((-3 * f[0] + 4 * f[1] - f[2]) / (2 * h))
    edge = np.stack([v[:, 0], v[:, 0], v[:, 1]], -1)
    return inner, heat, edge, np.abs(np.array(bc))


def _run_lookback(cfg, out: Outcome, threads: int):
    p = cfg.params
    f, default = _LOOKBACK[p.payoff]
    F = lookback_field(f, p.q, p.n_nodes)
    origin = float(F.value(np.zeros(3)))
    expected = p.expected_origin
    if expected is None and p.q == 1.0:
        expected = default
    if expected is not None:
        out.check("origin_value", abs(origin - expected), p.value_tol, abs(origin - expected) <= p.value_tol)
    inner, heat, edge, bc = lookback_checks(F, p.q, p.n_interior, p.n_boundary)
    out.check("heat_residual", float(heat.max()), p.pde_tol, heat.max() <= p.pde_tol)
    out.check("boundary_derivative", float(bc.max()), p.boundary_tol, bc.max() <= p.boundary_tol)
    rows = [["origin", 0.0, 0.0, 0.0, origin, None if expected is None else abs(origin - expected)]]
    vals = F.value(inner)
    rows += [["heat", *map(float, x), float(v), float(r)] for x, v, r in zip(inner, vals, heat)]
    rows += [["boundary", *map(float, x), float(F.value(x)), float(r)] for x, r in zip(edge, bc)]
    agg = {"origin_value": origin, "expected_origin": expected, "max_heat_residual": float(heat.max()),
           "max_boundary_derivative": float(bc.max())}
    return agg, _rows_csv(["check", "x1", "x2", "x3", "value", "residual"], rows)


def _strip(cfg: StripCfg) -> CallStrip:
    if len(cfg.strikes) != len(cfg.prices):
        raise ConfigError("params.strip", "strikes and prices must have equal length")
    return _build("params.strip", CallStrip.from_dict, cfg.model_dump())


def _run_check_strip(cfg, out: Outcome, threads: int):
    strip = _strip(cfg.params.strip)
    rep = check_strip(strip)
    for name in ("v_min", "delta_min", "d2", "dd"):
        out.check(name, getattr(rep, name), None, name not in rep.violated)
    kinks = np.concatenate([[np.nan], strip.kinks])
    rows = [[float(k), float(c), float(v), float(d), float(dk)]
            for k, c, v, d, dk in zip(strip.k, strip.c, strip.time_values, strip.slopes, kinks)]
    return {"arbitrage": rep.to_dict()}, _rows_csv(["strike", "price", "time_value", "slope", "kink"], rows)


def _run_calibrate(cfg, out: Outcome, threads: int, extra: dict):
    p = cfg.params
    strip = _strip(p.strip)
    arb = check_strip(strip)
    if not arb.passed:
        out.infeasible = True
        return {"arbitrage": arb.to_dict(), "error": f"strip fails {list(arb.violated)}"}, \
            _rows_csv(["strike", "target", "price", "se", "rel_error"], [])
    try:
        surf = dupire_calibrate(strip, p.T, p.n_k, p.n_t, p.base)
    except CalibrationError as e:
        out.infeasible = True
        return {"arbitrage": arb.to_dict(), "error": str(e)}, \
            _rows_csv(["strike", "target", "price", "se", "rel_error"], [])
    grid = TimeGrid.uniform(p.T, p.n_steps)
    rep = reprice(surf, strip, p.n_paths, grid, cfg.seed)
    ok = rep.within(p.rel_tol, p.n_se)
    out.check("reprice", rep.max_rel_error, {"rel": p.rel_tol, "n_se": p.n_se}, bool(ok.all()))
    if p.sigma_bounds is not None:
        lo, hi = p.sigma_bounds
        rng = [float(surf.sigma.min()), float(surf.sigma.max())]
        out.check("sigma_bounds", rng, [lo, hi], lo <= rng[0] and rng[1] <= hi)
    extra["surface.csv"] = surf.to_csv()
    agg = {"arbitrage": arb.to_dict(), "surface": {k: _clean(v) for k, v in surf.meta.items()},
           "sigma_min": float(surf.sigma.min()), "sigma_max": float(surf.sigma.max()),
           "sigma0": surf.sigma0, "max_rel_error": rep.max_rel_error, "within": ok.tolist()}
    return agg, rep.to_csv()


def _run_drift(cfg, out: Outcome, threads: int):
    p = cfg.params
    claim = build_claim(p.field, "params.field")
    model = build_model(p.model, "params.model")
    if not isinstance(model, Spliced):
        raise ConfigError("params.model.kind", "drift needs a spliced model")
    rep = drift_test(claim.F, claim.spec, model, cfg.grid.build(), p.n_paths, cfg.seed, claim.B, p.chunk)
    t = abs(rep.t_stat)
    if rep.inconclusive:
        out.check("windows", 0, ">0", False)
    elif p.expect == "in_class":
        bound = p.t_threshold or 3.0
        out.check("abs_t_stat", t, bound, t < bound)
    else:
        bound = p.t_threshold or 5.0
        out.check("abs_t_stat_min", t, bound, t > bound)
    rows = [[i, float(v)] for i, v in enumerate(rep.increments)]
    return {"drift": rep.to_dict()}, _rows_csv(["window", "increment"], rows)


def _run_support(cfg, out: Outcome, threads: int):
    p = cfg.params
    model = build_model(p.model, "params.model")
    rows, reps = [], []
    for a, b in p.intervals:
        r = support_diagnostic(model, p.t, (a, b), p.n_paths, cfg.seed, p.n_steps)
        reps.append(dict(r.to_dict(), a=a, b=b))
        rows.append([float(a), float(b), r.probability, r.se, r.slope_a, r.slope_b, int(r.strict)])
        if p.expect_strict is not None:
            out.check(f"strict({a:g},{b:g})", r.strict, p.expect_strict, r.strict == p.expect_strict)
    return {"intervals": reps}, _rows_csv(["a", "b", "probability", "se", "slope_a", "slope_b", "strict"], rows)


_RUNNERS = {"hedge": _run_hedge, "cashflow": _run_hedge, "sweep": _run_sweep, "residual": _run_residual,
            "adjudicate": _run_adjudicate, "lookback": _run_lookback, "check-strip": _run_check_strip,
            "drift": _run_drift, "support": _run_support}


def run(cfg, out_dir=None, threads: int = 1) -> int:
    """Run a validated config, write the reports and return the exit code."""
    outcome = Outcome()
    extra = {}
    try:
        if cfg.kind == "calibrate":
            agg, rows = _run_calibrate(cfg, outcome, threads, extra)
        else:
            agg, rows = _RUNNERS[cfg.kind](cfg, outcome, threads)
    except InfeasibleMarket as e:
        outcome.infeasible = True
        agg, rows = {"error": str(e)}, ""
    except (DomainError, ArithmeticError) as e:
        outcome.error = f"{type(e).__name__}: {e}"
        agg, rows = {"error": outcome.error}, ""
    target = FsPath(out_dir or cfg.out or "out")
    target.mkdir(parents=True, exist_ok=True)
    report = {"spec_version": SPEC_VERSION, "kind": cfg.kind, "seed": cfg.seed,
              "config": cfg.model_dump(mode="json"), "checks": outcome.checks,
              "exit_code": outcome.exit_code, "results": agg}
    (target / "report.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
    (target / "report.csv").write_text(rows)
    for name, text in extra.items():
        (target / name).write_text(text)
    return outcome.exit_code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="mihedge", description="Run one hedging, family, lookback or market experiment from a JSON config.",
        epilog=CSV_SCHEMAS + "\nexit codes: 0 ok, 1 malformed config, 2 tolerance violated, "
                             "3 coefficient discrepancy documented, 4 infeasible market input",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", required=True, help="experiment config (JSON)")
    ap.add_argument("--out", help="output directory (default: config 'out' or ./out)")
    ap.add_argument("--seed-override", type=int, help="replace the config seed")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for path batches")
    args = ap.parse_args(argv)
    try:
        text = FsPath(args.config).read_text()
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    try:
        cfg = parse_config(text)
        if args.seed_override is not None:
            if args.seed_override < 0:
                raise ConfigError("--seed-override", "seed must be nonnegative")
            cfg = cfg.model_copy(update={"seed": args.seed_override})
        if args.threads < 1:
            raise ConfigError("--threads", "need at least one thread")
        code = run(cfg, args.out, args.threads)
    except ConfigError as e:
        print(f"error: malformed config: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    print(f"mihedge {cfg.kind}: exit {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
