"""Discretised sample paths of continuous price models.

Every path index owns its own counter-based random stream, keyed by
``(seed, index)``, so a batch of paths can be generated in any chunking or
order and still come out bit-identical.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .payoffs import Payoff, black_time_value, lognormal_price


# ---------------------------------------------------------------- grids/paths


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError("time grid must start at exactly 0")
        if not np.all(np.diff(t) > 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @staticmethod
    def uniform(T: float, n_steps: int) -> "TimeGrid":
        if T <= 0 or n_steps < 1:
            raise ValueError("uniform grid needs T > 0 and at least one step")
        t = np.linspace(0.0, T, int(n_steps) + 1)
        t[-1] = T
        return TimeGrid(t)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def max_step(self) -> float:
        return float(self.dt.max())

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    __hash__ = None


@dataclass
class Path:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != len(self.grid):
            raise ValueError("path length does not match its grid")


@dataclass
class PathSet:
    """A batch of paths of the traded vector on one grid.

    ``components[label]`` has shape ``(n_paths, n_times)``; ``aux`` holds
    model by-products such as the Heston variance or splice markers.
    """

    grid: TimeGrid
    components: dict
    seed: int
    first_path: int = 0
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {np.shape(v) for v in self.components.values()}
        if len(shapes) != 1:
            raise ValueError("all components must share one shape")
        shape = shapes.pop()
        if len(shape) != 2 or shape[1] != len(self.grid):
            raise ValueError("components must have shape (n_paths, n_times)")

    @property
    def labels(self) -> list:
        return list(self.components)

    @property
    def n_paths(self) -> int:
        return next(iter(self.components.values())).shape[0]

    def path(self, label: str, i: int = 0) -> Path:
        return Path(self.grid, self.components[label][i])

    def asset_matrix(self, labels: Sequence[str]) -> np.ndarray:
        """Stack the given labels into shape (n_paths, n_times, d)."""
        missing = [lb for lb in labels if lb not in self.components]
        if missing:
            raise KeyError(f"labels {missing} not present in path set {self.labels}")
        return np.stack([self.components[lb] for lb in labels], axis=-1)

    def to_csv(self, i: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", *self.labels])
        for k, t in enumerate(self.grid.times):
            w.writerow([repr(float(t))] + [repr(float(self.components[lb][i, k])) for lb in self.labels])
        return buf.getvalue()


def path_generator(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for one path index."""
    if seed < 0 or index < 0:
        raise ValueError("seed and path index must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[int(seed), int(index)]))


def _draw(seed: int, first_path: int, n_paths: int, blocks: Sequence[int], n_steps: int) -> list:
    """Per-path normal blocks; block j has shape (n_paths, blocks[j], n_steps)."""
    out = [np.empty((n_paths, b, n_steps)) for b in blocks]
    for i in range(n_paths):
        g = path_generator(seed, first_path + i)
        for arr, b in zip(out, blocks):
            if b:
                arr[i] = g.standard_normal((b, n_steps))
    return out


# ---------------------------------------------------------------- local vols


@dataclass(frozen=True)
class Smile:
    """Quadratic-in-log-moneyness volatility ``atm + skew*y + curvature*y^2``."""

    atm: float
    skew: float = 0.0
    curvature: float = 0.0
    ref: float = 1.0

    def __call__(self, s, t):
        y = np.log(np.asarray(s, dtype=float) / self.ref)
        return self.atm + self.skew * y + self.curvature * y * y

    def to_dict(self) -> dict:
        return {"kind": "smile", "atm": self.atm, "skew": self.skew, "curvature": self.curvature, "ref": self.ref}


# ---------------------------------------------------------------- model specs


@dataclass(frozen=True)
class GBM:
    s0: float
    sigma: float
    kind = "gbm"
    labels = ("S",)

    def __post_init__(self):
        _check_positive("s0", self.s0)
        _check_nonneg("sigma", self.sigma)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "s0": self.s0, "sigma": self.sigma}


@dataclass(frozen=True)
class Heston:
    s0: float
    v0: float
    kappa: float
    theta: float
    xi: float
    rho: float
    kind = "heston"
    labels = ("S",)

    def __post_init__(self):
        _check_positive("s0", self.s0)
        for name in ("v0", "kappa", "theta", "xi"):
            _check_nonneg(name, getattr(self, name))
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "s0": self.s0, "v0": self.v0, "kappa": self.kappa,
                "theta": self.theta, "xi": self.xi, "rho": self.rho}


@dataclass(frozen=True)
class LocalVol:
    """Local volatility ``sigma_fn(s, t)`` clipped to ``[lower, upper]``."""

    s0: float
    sigma_fn: Callable
    lower: float
    upper: float
    kind = "local_vol"
    labels = ("S",)

    def __post_init__(self):
        _check_positive("s0", self.s0)
        if not (0.0 < self.lower <= self.upper < np.inf):
            raise ValueError("local vol bounds must satisfy 0 < l <= u < inf")

    def sigma(self, s, t):
        return np.clip(self.sigma_fn(s, t), self.lower, self.upper)

    def to_dict(self) -> dict:
        if not hasattr(self.sigma_fn, "to_dict"):
            raise TypeError("local vol function is not serializable")
        return {"kind": self.kind, "s0": self.s0, "sigma": self.sigma_fn.to_dict(),
                "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class Absorbed:
    """Lognormal above ``floor`` and frozen at or below it."""

    s0: float
    floor: float
    sigma: float
    kind = "absorbed"
    labels = ("S",)

    def __post_init__(self):
        _check_positive("s0", self.s0)
        _check_nonneg("sigma", self.sigma)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "s0": self.s0, "floor": self.floor, "sigma": self.sigma}


@dataclass(frozen=True)
class Bubble:
    T: float
    kind = "bubble"
    labels = ("Y",)

    def __post_init__(self):
        _check_positive("T", self.T)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T}


@dataclass(frozen=True)
class ConvexClaimMarket:
    """Asset ``S`` and a claim ``C`` paying ``g(S_T)`` at ``T``.

    With a GBM base the claim is priced at the Black-Scholes value for the
    volatility that matches ``c0`` plus a vanishing strict local martingale
    (bubble) for any excess. A Heston base is supported for the log payoff,
    whose conditional expectation is known in closed form.
    """

    base: object
    g: Payoff
    c0: Optional[float]
    T: float
    kind = "convex_claim"
    labels = ("S", "C")

    def __post_init__(self):
        if not isinstance(self.base, (GBM, Heston)):
            raise ValueError("convex-claim market needs a GBM or Heston base")
        if isinstance(self.base, Heston) and self.g.kind != "neglog":
            raise ValueError("Heston-based claim market supports only the log payoff")
        _check_positive("T", self.T)
        if self.c0 is not None and not self.c0 > float(self.g(self.base.s0)):
            raise InfeasibleMarket(
                f"c0 = {self.c0} must exceed g(s0) = {float(self.g(self.base.s0))}: condition c0 > g(s0) violated")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base": self.base.to_dict(), "g": self.g.to_dict(),
                "c0": self.c0, "T": self.T}


@dataclass(frozen=True)
class Spliced:
    """Base model until ``trigger`` fires on the tracked state, then arithmetic
    Brownian motion with covariance ``cov`` until ``exit`` fires or the
    midpoint of the remaining horizon is reached; frozen afterwards."""

    base: object
    trigger: object
    cov: np.ndarray
    exit: object
    functional: object = None
    kind = "spliced"

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = len(self.base.labels)
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d} to match the base model")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariance is not positive definite (Cholesky failed)") from e
        object.__setattr__(self, "cov", cov)

    @property
    def labels(self):
        return self.base.labels

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "base": self.base.to_dict(), "trigger": self.trigger.to_dict(),
             "cov": self.cov.tolist(), "exit": self.exit.to_dict()}
        if self.functional is not None:
            d["functional"] = self.functional.to_dict()
        return d


class InfeasibleMarket(ValueError):
    """Market data admit no model of the requested class."""


def _check_positive(name, v):
    if not (np.isfinite(v) and v > 0):
        raise ValueError(f"{name} must be positive, got {v}")


def _check_nonneg(name, v):
    if not (np.isfinite(v) and v >= 0):
        raise ValueError(f"{name} must be nonnegative, got {v}")


def model_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "gbm":
        return GBM(**d)
    if kind == "heston":
        return Heston(**d)
    if kind == "absorbed":
        return Absorbed(**d)
    if kind == "bubble":
        return Bubble(**d)
    if kind == "local_vol":
        sig = dict(d.pop("sigma"))
        skind = sig.pop("kind")
        if skind == "smile":
            fn = Smile(**sig)
        elif skind == "flat":
            fn = Smile(atm=float(sig["sigma"]))
        elif skind == "surface":
            from .market import LocalVolSurface

            fn = LocalVolSurface.from_dict(sig)
        else:
            raise ValueError(f"unknown local vol function kind {skind!r}")
        return LocalVol(sigma_fn=fn, **d)
    if kind == "convex_claim":
        return ConvexClaimMarket(base=model_from_dict(d.pop("base")), g=Payoff.from_dict(d.pop("g")), **d)
    if kind == "spliced":
        from .functionals import FunctionalSpec, stopping_set_from_dict

        fs = d.pop("functional", None)
        return Spliced(base=model_from_dict(d.pop("base")),
                       trigger=stopping_set_from_dict(d.pop("trigger")),
                       exit=stopping_set_from_dict(d.pop("exit")),
                       cov=np.asarray(d.pop("cov"), dtype=float),
                       functional=None if fs is None else FunctionalSpec.from_dict(fs), **d)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- simulation


def _n_blocks(model) -> list:
    if isinstance(model, (GBM, LocalVol, Absorbed, Bubble)):
        return [1]
    if isinstance(model, Heston):
        return [2]
    if isinstance(model, ConvexClaimMarket):
        return _n_blocks(model.base) + [1]
    if isinstance(model, Spliced):
        return _n_blocks(model.base) + [len(model.labels)]
    raise TypeError(f"unsupported model {type(model).__name__}")


def simulate(model, grid: TimeGrid, seed: int, n_paths: int = 1, first_path: int = 0) -> PathSet:
    """Simulate ``n_paths`` paths with indices ``first_path, first_path+1, ...``."""
    if isinstance(model, ConvexClaimMarket):
        return market_paths_convex(model, grid, seed, n_paths, first_path)
    if isinstance(model, Spliced):
        return splice(model, grid, seed, n_paths, first_path)
    z = _draw(seed, first_path, n_paths, _n_blocks(model), grid.n_steps)
    return _simulate_from_normals(model, grid, z, seed, first_path)


def _simulate_from_normals(model, grid: TimeGrid, z: list, seed: int, first_path: int) -> PathSet:
    dt = grid.dt
    sdt = np.sqrt(dt)
    n_paths = z[0].shape[0]
    aux = {}
    if isinstance(model, GBM):
        incr = model.sigma * sdt * z[0][:, 0] - 0.5 * model.sigma**2 * dt
        logs = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(incr, axis=1)], axis=1)
        s = model.s0 * np.exp(logs)
    elif isinstance(model, Heston):
        s, v, iv = _heston(model, grid, z[0])
        aux = {"v": v, "integrated_variance": iv}
    elif isinstance(model, LocalVol):
        s = _local_vol(model.s0, lambda x, t: model.sigma(x, t), grid, z[0][:, 0])
    elif isinstance(model, Absorbed):
        fl, sg = model.floor, model.sigma
        s = _local_vol(model.s0, lambda x, t: np.where(x > fl, sg, 0.0), grid, z[0][:, 0])
    elif isinstance(model, Bubble):
        return PathSet(grid, {"Y": _bubble(model.T, grid, z[0][:, 0])}, seed, first_path)
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return PathSet(grid, {"S": s}, seed, first_path, aux)


def _local_vol(s0: float, sigma: Callable, grid: TimeGrid, z: np.ndarray) -> np.ndarray:
    """Euler scheme for log S; keeps prices positive and the martingale exact."""
    n_paths, n = z.shape
    out = np.empty((n_paths, n + 1))
    out[:, 0] = s0
    t, dt = grid.times, grid.dt
    sdt = np.sqrt(dt)
    s = np.full(n_paths, float(s0))
    for k in range(n):
        sig = sigma(s, t[k])
        s = s * np.exp(sig * sdt[k] * z[:, k] - 0.5 * sig * sig * dt[k])
        out[:, k + 1] = s
    return out


def _heston(m: Heston, grid: TimeGrid, z: np.ndarray):
    """Full-truncation Euler for the variance, Euler for log S."""
    n_paths, _, n = z.shape
    dt = grid.dt
    sdt = np.sqrt(dt)
    rc = np.sqrt(max(0.0, 1.0 - m.rho**2))
    s = np.empty((n_paths, n + 1))
    v = np.empty((n_paths, n + 1))
    iv = np.zeros((n_paths, n + 1))
    s[:, 0], v[:, 0] = m.s0, m.v0
    logs = np.full(n_paths, np.log(m.s0))
    vk = np.full(n_paths, float(m.v0))
    acc = np.zeros(n_paths)
    for k in range(n):
        vp = np.maximum(vk, 0.0)
        z1 = z[:, 0, k]
        z2 = m.rho * z1 + rc * z[:, 1, k]
        logs = logs + np.sqrt(vp) * sdt[k] * z1 - 0.5 * vp * dt[k]
        vk = vk + m.kappa * (m.theta - vp) * dt[k] + m.xi * np.sqrt(vp) * sdt[k] * z2
        acc = acc + vp * dt[k]
        s[:, k + 1] = np.exp(logs)
        v[:, k + 1] = vk
        iv[:, k + 1] = acc
    return s, v, iv


BUBBLE_CLAMP = 1e-9


def _bubble(T: float, grid: TimeGrid, z: np.ndarray) -> np.ndarray:
    t = grid.times
    if t[-1] > T * (1 + 1e-12):
        raise ValueError(f"grid ends at {t[-1]} beyond the bubble horizon {T}")
    tc = np.minimum(t, T * (1.0 - BUBBLE_CLAMP))
    u = np.log(T / (T - tc))
    du = np.diff(u)
    w = np.concatenate([np.zeros((z.shape[0], 1)), np.cumsum(np.sqrt(du) * z, axis=1)], axis=1)
    y = np.exp(w - 0.5 * u)
    y[:, t >= T] = 0.0
    return y


def bubble_path(T: float, grid: TimeGrid, seed: int, index: int = 0) -> Path:
    """Vanishing strict local martingale started at 1 and equal to 0 at ``T``."""
    z = _draw(seed, index, 1, [1], grid.n_steps)[0][:, 0]
    return Path(grid, _bubble(T, grid, z)[0])


# ---------------------------------------------------------------- claim market


def implied_sigma0(g: Payoff, s0: float, T: float, c0: float, tol: float = 1e-10) -> float:
    """Largest volatility in [1e-6, 10] whose lognormal price stays below ``c0``."""
    lo, hi = 1e-6, 10.0

    def price(sig):
        return float(lognormal_price(g, s0, sig * sig * T))

    if price(lo) >= c0:
        raise InfeasibleMarket("claim price is below the smallest priceable volatility")
    if price(hi) < c0:
        return hi
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if price(mid) < c0:
            lo = mid
        else:
            hi = mid
        if price(hi) - price(lo) < tol:
            break
    return lo


def market_paths_convex(spec: ConvexClaimMarket, grid: TimeGrid, seed: int,
                        n_paths: int = 1, first_path: int = 0) -> PathSet:
    """Joint paths of the asset and a claim whose time value stays positive."""
    if grid.T > spec.T * (1 + 1e-12):
        raise ValueError("grid extends beyond the claim maturity")
    base = spec.base
    g = spec.g
    blocks = _n_blocks(spec)
    z = _draw(seed, first_path, n_paths, blocks, grid.n_steps)
    rem = spec.T - grid.times
    if isinstance(base, GBM):
        sigma0 = base.sigma if spec.c0 is None else implied_sigma0(g, base.s0, spec.T, spec.c0)
        gbm = GBM(base.s0, sigma0)
        s = _simulate_from_normals(gbm, grid, z[:1], seed, first_path).components["S"]
        tv = _time_value(g, s, sigma0**2 * rem)
        model_c0 = float(lognormal_price(g, base.s0, sigma0**2 * spec.T))
        aux = {"sigma0": sigma0}
    else:
        s, v, iv = _heston(base, grid, z[0])
        k = base.kappa
        decay = (1.0 - np.exp(-k * rem)) / k if k > 0 else rem
        expected_var = base.theta * (rem - decay) + v * decay
        tv = 0.5 * g.scale * expected_var
        model_c0 = float(g(base.s0) + tv[0, 0])
        aux = {"v": v, "integrated_variance": iv}
    weight = 0.0 if spec.c0 is None else max(0.0, spec.c0 - model_c0)
    y = _bubble(spec.T, grid, z[-1][:, 0]) if weight > 0 else np.zeros_like(s)
    c = g(s) + tv + weight * y
    if grid.T >= spec.T:
        c[:, -1] = g(s[:, -1])
    aux.update({"bubble_weight": weight})
    return PathSet(grid, {"S": s, "C": c}, seed, first_path, aux)


def _time_value(g: Payoff, s: np.ndarray, var: np.ndarray) -> np.ndarray:
    var = np.broadcast_to(var, s.shape)
    tv = black_time_value(g, s, var)
    if tv is None:
        tv = lognormal_price(g, s, var) - g(s)
    return tv


# ---------------------------------------------------------------- splicing


def splice(spec: Spliced, grid: TimeGrid, seed: int, n_paths: int = 1, first_path: int = 0) -> PathSet:
    """Run the base model, switch to constant-covariance dynamics at the trigger.

    ``aux["spliced"]`` marks paths where the trigger fired; ``aux["window"]``
    holds the (start, end) grid indices of the spliced segment, (-1, -1)
    when unspliced.
    """
    from .functionals import FunctionalSpec, first_hits, track_array

    blocks = _n_blocks(spec)
    z = _draw(seed, first_path, n_paths, blocks, grid.n_steps)
    base = spec.base
    if isinstance(base, ConvexClaimMarket):
        ps = market_paths_convex(base, grid, seed, n_paths, first_path)
    else:
        ps = _simulate_from_normals(base, grid, z[:-1], seed, first_path)
    labels = list(spec.labels)
    fs = spec.functional or FunctionalSpec.of_assets(labels)
    a = ps.asset_matrix(labels).copy()
    x = track_array(fs, a, grid)
    start = first_hits(spec.trigger, x, 0)[0]
    chol = np.linalg.cholesky(spec.cov)
    sdt = np.sqrt(grid.dt)
    zz = z[-1]  # (n_paths, d, n)
    n_t = len(grid)
    window = np.full((n_paths, 2), -1, dtype=int)
    for i in range(n_paths):
        k0 = int(start[i])
        if k0 < 0 or k0 >= n_t - 1:
            continue
        t_mid = 0.5 * (grid.T + grid.times[k0])
        k_mid = int(np.searchsorted(grid.times, t_mid, side="left"))
        k_mid = min(max(k_mid, k0 + 1), n_t - 1)
        incr = (chol @ zz[i, :, k0:]) * sdt[k0:]
        a[i, k0 + 1:] = a[i, k0] + np.cumsum(incr, axis=1).T
        xi = track_array(fs, a[i:i + 1], grid)
        hit = first_hits(spec.exit, xi[:, k0 + 1:], 0)[0][0]
        end = k_mid if hit < 0 else min(k_mid, k0 + 1 + int(hit))
        a[i, end + 1:] = a[i, end]
        window[i] = (k0, end)
    comps = {lb: a[..., j] for j, lb in enumerate(labels)}
    aux = dict(ps.aux)
    aux.update({"spliced": window[:, 0] >= 0, "window": window})
    return PathSet(grid, comps, seed, first_path, aux)
