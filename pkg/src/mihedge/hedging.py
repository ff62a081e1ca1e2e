"""Pathwise self-financing hedges built from a hedging function F.

The wealth of the strategy holding ``L^a F(X_t)`` units of the traded assets
tracks ``F(X_t)`` on every path when ``F`` solves the operator system, in any
continuous model. The backtests here measure that tracking on simulated
paths; the drift test detects failures of the operator system under
spliced models.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .functionals import FunctionalSpec, StoppingSet, hitting, track
from .paths import PathSet, Spliced, TimeGrid, simulate
from .pde import DomainError, ScalarField, hedge_ratio, operators


@dataclass(frozen=True)
class Claim:
    """Hedging function, functional, stopping set and terminal payoff.

    ``payoff`` maps the state at the stopping time to the claim's payoff and
    defaults to ``F`` itself. With ``B=None`` the claim matures at the end of
    the grid.
    """

    F: ScalarField
    spec: FunctionalSpec
    B: Optional[StoppingSet] = None
    payoff: Optional[Callable] = None
    name: str = "claim"

    def target(self, x):
        return self.F.value(x) if self.payoff is None else np.asarray(self.payoff(x), dtype=float)


# ---------------------------------------------------------------- reports


@dataclass
class HedgeReport:
    """Per-path rows of a backtest plus aggregates recomputed from them."""

    wealth: np.ndarray
    target: np.ndarray
    max_gap: np.ndarray
    hit_time: np.ndarray
    stopped: np.ndarray
    path_index: np.ndarray

    @property
    def error(self) -> np.ndarray:
        return self.wealth - self.target

    @property
    def n_paths(self) -> int:
        return self.wealth.size

    def _used(self) -> np.ndarray:
        return self.error[self.stopped]

    @property
    def frac_unstopped(self) -> float:
        return float(1.0 - self.stopped.mean()) if self.n_paths else 0.0

    @property
    def mean_error(self) -> float:
        e = self._used()
        return float(e.mean()) if e.size else float("nan")

    @property
    def se(self) -> float:
        e = self._used()
        return float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else float("nan")

    @property
    def t_stat(self) -> float:
        """Mean error over its standard error, the latter floored at 1e-12 of
        the typical |target| so that exact replication reads as t = 0 rather
        than as rounding noise over rounding noise."""
        se = self.se
        if np.isnan(se):
            return float("nan")
        floor = 1e-12 * (1.0 + float(np.abs(self.target[self.stopped]).mean()))
        return self.mean_error / max(se, floor)

    @property
    def rms(self) -> float:
        e = self._used()
        return float(np.sqrt(np.mean(e * e))) if e.size else float("nan")

    @property
    def mean_abs(self) -> float:
        e = self._used()
        return float(np.abs(e).mean()) if e.size else float("nan")

    @property
    def max_abs(self) -> float:
        e = self._used()
        return float(np.abs(e).max()) if e.size else float("nan")

    def aggregates(self) -> dict:
        return {"n_paths": self.n_paths, "mean_error": self.mean_error, "se": self.se,
                "t_stat": self.t_stat, "rms": self.rms, "mean_abs_error": self.mean_abs,
                "max_abs_error": self.max_abs, "frac_unstopped": self.frac_unstopped}

    def check_aggregates(self) -> bool:
        e = self.error[self.stopped]
        return bool(np.isclose(e.mean(), self.mean_error, rtol=0, atol=1e-15)
                    and np.isclose(np.sqrt((e * e).mean()), self.rms, rtol=1e-12, atol=0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "wealth", "target", "error", "max_gap", "hit_time", "stopped"])
        for i in range(self.n_paths):
            w.writerow([int(self.path_index[i]), repr(float(self.wealth[i])), repr(float(self.target[i])),
                        repr(float(self.error[i])), repr(float(self.max_gap[i])),
                        repr(float(self.hit_time[i])), int(self.stopped[i])])
        return buf.getvalue()

    @staticmethod
    def concat(parts: Sequence["HedgeReport"]) -> "HedgeReport":
        return HedgeReport(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                             ("wealth", "target", "max_gap", "hit_time", "stopped", "path_index")))


# ---------------------------------------------------------------- core


def _as_batches(paths) -> Iterable[PathSet]:
    return [paths] if isinstance(paths, PathSet) else paths


def _stopped_states(claim_spec, F, B, paths: PathSet):
    tracked = track(claim_spec, paths)
    x, a = tracked.x, tracked.assets
    n_paths, n_t, _ = x.shape
    if B is None:
        idx = np.full(n_paths, n_t - 1)
        theta = np.ones(n_paths)
        snap = x[:, -1].copy()
        times = np.full(n_paths, paths.grid.T)
        stopped = np.ones(n_paths, dtype=bool)
    else:
        hit = hitting(tracked, B)
        idx, theta, snap, times = hit.index, hit.theta, hit.x_at_hit, hit.time
        stopped = idx >= 0
    k = np.arange(n_t)
    end = np.where(stopped, idx, n_t - 1)
    # X^B on the grid: the path up to the entry step, the entry state afterwards
    xb = x.copy()
    after = stopped[:, None] & (k[None, :] >= end[:, None])
    xb[after] = np.broadcast_to(snap[:, None, :], x.shape)[after]
    # step weights on dA: full steps before the entry step, theta on the entry step
    w = (k[None, :-1] < end[:, None] - 1).astype(float)
    last = stopped & (end > 0)
    w[last, end[last] - 1] = theta[last]
    if not np.all(stopped):
        w[~stopped] = 1.0
    return x, a, xb, w, end, stopped, times, snap


def _safe_eval(F: ScalarField, x: np.ndarray, what: str) -> np.ndarray:
    try:
        out = F.value(x)
    except DomainError as e:
        raise DomainError(f"{what}: {e}") from e
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise FloatingPointError(f"{what}: non-finite value at {x[tuple(bad)].tolist()}")
    return out


def _ratio_along(F, spec, xb, w):
    """Hedge ratios at the left end of each step; zero (and not evaluated) after the entry."""
    xl = xb[:, :-1]
    live = w > 0
    safe = np.where(live[..., None], xl, xb[:, :1])
    h = hedge_ratio(F, spec, safe)
    return np.where(live[..., None], h, 0.0)


def _backtest_batch(claim: Claim, paths: PathSet) -> HedgeReport:
    F, spec = claim.F, claim.spec
    x, a, xb, w, end, stopped, times, snap = _stopped_states(spec, F, claim.B, paths)
    fvals = _safe_eval(F, xb, "hedging function")
    H = _ratio_along(F, spec, xb, w)
    da = np.diff(a, axis=1) * w[..., None]
    gains = np.einsum("pkd,pkd->pk", H, da)
    wealth = np.empty(fvals.shape)
    wealth[:, 0] = fvals[:, 0]
    np.cumsum(gains, axis=1, out=wealth[:, 1:])
    wealth[:, 1:] += fvals[:, :1]
    gap = np.abs(wealth - fvals).max(axis=1)
    final_state = np.where(stopped[:, None], snap, x[:, -1])
    target = claim.target(final_state)
    idx = paths.first_path + np.arange(paths.n_paths)
    return HedgeReport(wealth[:, -1], np.asarray(target, dtype=float), gap,
                       np.where(stopped, times, np.nan), stopped, idx)


def backtest(F, spec: FunctionalSpec = None, B: Optional[StoppingSet] = None, paths=None,
             payoff: Optional[Callable] = None) -> HedgeReport:
    """Discrete self-financing hedge of ``F(X^B)`` along each path.

    ``F`` may also be a :class:`Claim`, in which case ``spec``/``B``/``payoff``
    come from it. ``paths`` is a PathSet or an iterable of PathSets.
    """
    claim = F if isinstance(F, Claim) else Claim(F, spec, B, payoff)
    if paths is None:
        raise ValueError("no paths given")
    return HedgeReport.concat([_backtest_batch(claim, p) for p in _as_batches(paths)])


def _cashflow_batch(claim: Claim, T: float, paths: PathSet) -> HedgeReport:
    F, spec = claim.F, claim.spec
    grid = paths.grid
    if not np.isclose(grid.T, T, rtol=1e-12, atol=0):
        raise ValueError(f"cash-flow horizon {T} must equal the grid's final time {grid.T}")
    x, a, xb, w, end, stopped, times, snap = _stopped_states(spec, F, claim.B, paths)
    fvals = _safe_eval(F, xb, "hedging function")
    H = _ratio_along(F, spec, xb, w)
    tmid = 0.5 * (grid.times[1:] + grid.times[:-1])
    da = np.diff(a, axis=1) * w[..., None]
    gains = np.einsum("pkd,pkd->pk", H, da) * (T - tmid)
    wealth_path = T * fvals[:, :1] + np.concatenate([np.zeros((len(gains), 1)), np.cumsum(gains, axis=1)], axis=1)
    dt = grid.dt
    running = np.concatenate([np.zeros((len(fvals), 1)),
                              np.cumsum(0.5 * (fvals[:, 1:] + fvals[:, :-1]) * dt, axis=1)], axis=1)
    # value of the claim still to come plus what was paid so far
    tail = (T - grid.times) * fvals
    gap = np.abs(wealth_path - running - tail).max(axis=1)
    idx = paths.first_path + np.arange(paths.n_paths)
    return HedgeReport(wealth_path[:, -1], running[:, -1], gap,
                       np.where(stopped, times, np.nan), np.ones(len(fvals), dtype=bool), idx)


def cashflow_backtest(F, spec: FunctionalSpec = None, B: Optional[StoppingSet] = None,
                      T: float = None, paths=None) -> HedgeReport:
    """Replicate the running payment int_0^T F(X^B_t) dt from capital T*F(X_0).

    Holdings are (T - t) L^a F, with the midpoint of each step as t; the target
    is the trapezoidal integral. With that pairing the discrete identity is
    exact for any F whose increments the hedge matches exactly.
    """
    claim = F if isinstance(F, Claim) else Claim(F, spec, B)
    return HedgeReport.concat([_cashflow_batch(claim, T, p) for p in _as_batches(paths)])


def simulate_batches(model, grid: TimeGrid, n_paths: int, seed: int, chunk: int = 64):
    for start in range(0, n_paths, chunk):
        yield simulate(model, grid, seed, min(chunk, n_paths - start), start)


def run_backtest(claim: Claim, model, grid: TimeGrid, n_paths: int, seed: int, chunk: int = 64,
                 cashflow: bool = False, threads: int = 1) -> HedgeReport:
    """Simulate in chunks and backtest each chunk; results in path order."""
    starts = list(range(0, n_paths, chunk))

    def one(start):
        ps = simulate(model, grid, seed, min(chunk, n_paths - start), start)
        return _cashflow_batch(claim, grid.T, ps) if cashflow else _backtest_batch(claim, ps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    return HedgeReport.concat(parts)


# ---------------------------------------------------------------- sweep


def model_name(model) -> str:
    d = getattr(model, "kind", type(model).__name__)
    if hasattr(model, "sigma") and isinstance(getattr(model, "sigma"), float):
        return f"{d}(sigma={model.sigma:g})"
    return d


@dataclass
class SweepReport:
    names: list
    reports: list  # HedgeReport or None
    errors: list  # message or None

    def table(self) -> list:
        rows = []
        for name, r, err in zip(self.names, self.reports, self.errors):
            row = {"model": name, "error": err}
            row.update(r.aggregates() if r is not None else {})
            rows.append(row)
        return rows


def sweep(claim: Claim, models: Sequence, grid: TimeGrid, n_paths: int, seed: int,
          threads: int = 1, chunk: int = 64, names: Optional[Sequence[str]] = None) -> SweepReport:
    """Backtest one claim under several models; a failing model does not stop the others."""
    names = list(names) if names is not None else [model_name(m) for m in models]

    def one(model):
        try:
            return run_backtest(claim, model, grid, n_paths, seed, chunk), None
        except Exception as e:  # reported per model
            return None, f"{type(e).__name__}: {e}"

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(one, models))
    else:
        out = [one(m) for m in models]
    return SweepReport(names, [o[0] for o in out], [o[1] for o in out])


# ---------------------------------------------------------------- drift test


@dataclass
class DriftReport:
    mean: float
    se: float
    t_stat: float
    n_windows: int
    n_paths: int
    mean_window: float
    increments: np.ndarray = field(repr=False)

    @property
    def inconclusive(self) -> bool:
        return self.n_windows == 0

    @property
    def frac_spliced(self) -> float:
        return self.n_windows / self.n_paths if self.n_paths else 0.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "t_stat": float(f"{self.t_stat:.4g}"),
                "n_windows": self.n_windows, "frac_spliced": self.frac_spliced,
                "mean_window_length": self.mean_window, "inconclusive": self.inconclusive}


def _drift_batch(F: ScalarField, spec: FunctionalSpec, ps: PathSet, B: Optional[StoppingSet]):
    win = ps.aux["window"]
    x = track(spec, ps).x
    a = ps.asset_matrix(spec.assets)
    n_paths, n_t, _ = x.shape
    start, end = win[:, 0].copy(), win[:, 1].copy()
    ok = start >= 0
    if B is not None:
        hit = B.first_entry(x)[0]
        stop_early = ok & (hit >= 0) & (hit < end)
        end = np.where(stop_early, np.maximum(hit, start), end)
    k = np.arange(n_t)
    inside = ok[:, None] & (k[None, :] >= start[:, None]) & (k[None, :] <= end[:, None])
    rows = np.arange(n_paths)
    anchor = x[rows, np.maximum(start, 0)]
    xs = np.where(inside[..., None], x, anchor[:, None, :])
    steps = inside[:, :-1] & (k[None, :-1] < end[:, None])
    safe = np.where(steps[..., None], xs[:, :-1], anchor[:, None, :])
    h = np.where(steps[..., None], hedge_ratio(F, spec, safe), 0.0)
    gains = np.einsum("pkd,pkd->p", h, np.diff(a, axis=1) * steps[..., None])
    f_end = F.value(x[rows, np.maximum(end, 0)])
    f_start = F.value(anchor)
    incr = f_end - f_start - gains
    lengths = ps.grid.times[np.maximum(end, 0)] - ps.grid.times[np.maximum(start, 0)]
    scale = np.abs(f_start) + np.abs(f_end)
    return incr[ok], lengths[ok], scale[ok], n_paths


def drift_test(F: ScalarField, spec: FunctionalSpec, spliced: Spliced, grid: TimeGrid, n_paths: int,
               seed: int, B: Optional[StoppingSet] = None, chunk: int = 64) -> DriftReport:
    """Mean increment of F(X) minus the hedge gains over spliced windows.

    For F in the solution set the increments are martingale differences and
    the t-statistic stays small; otherwise the constant-covariance segment
    exposes the drift. The standard error is floored at 1e-12 of the typical
    |F| so exactly hedged functions report t = 0 instead of rounding noise.
    """
    incs, lens, scales, total = [], [], [], 0
    for start in range(0, n_paths, chunk):
        ps = simulate(spliced, grid, seed, min(chunk, n_paths - start), start)
        i, ln, sc, n = _drift_batch(F, spec, ps, B)
        incs.append(i)
        lens.append(ln)
        scales.append(sc)
        total += n
    inc = np.concatenate(incs)
    n = inc.size
    if n == 0:
        return DriftReport(float("nan"), float("nan"), float("nan"), 0, total, float("nan"), inc)
    mean = float(inc.mean())
    floor = 1e-12 * (1.0 + float(np.concatenate(scales).mean()))
    se = float(inc.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    se = max(se, floor)
    return DriftReport(mean, se, mean / se, n, total, float(np.concatenate(lens).mean()), inc)


def suggest_sigma(F: ScalarField, spec: FunctionalSpec, samples, strength: float = 1.0):
    """Covariance that amplifies the largest diagonal operator entry.

    Picks the asset k with the largest mean |L^ab_kk F| over ``samples`` and
    scales its variance against the other operator terms, so that the drift
    of F(X) has a definite sign while the splice runs. Returns (cov, sign).
    """
    ov = operators(F, spec, np.asarray(samples, dtype=float))
    lab = ov.l_ab.reshape(-1, spec.d, spec.d)
    diag = lab.diagonal(axis1=1, axis2=2).mean(axis=0)
    k = int(np.argmax(np.abs(diag)))
    z = float(diag[k])
    d = spec.d
    cov = np.eye(d)
    if z == 0.0:
        return cov, 0
    b = max(float(np.abs(ov.l_gamma).max()), float(np.abs(lab).max()))
    cov[k, k] = max(1.0, strength * 2.0 * b * (d + 1) / abs(z))
    return cov, int(np.sign(z))
