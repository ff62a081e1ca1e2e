"""Path functionals built from integrals against dA, d<A> and dt.

Each component ``X^i`` of a :class:`FunctionalSpec` has the differential form
``dX^i = alpha^i . dA + sum_jk beta^i_jk d<A^j, A^k> + gamma^i dt``. A FunctionalSpec
exposes the coefficient triple as vectorised functions of the state and can
compute the functional along discretised paths. Running extrema are tracked
but carry no coefficient triple.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .paths import Path, PathSet, TimeGrid
from .payoffs import Payoff

Ref = object  # asset label (str) or index (int) of an earlier component


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class Weight:
    """Positive weight ``w(x)`` depending on one state coordinate.

    kind: const (c), inverse (c/x), inv_square (c/x^2), power (c*x^p),
    custom (fn of the coordinate).
    """

    kind: str = "const"
    on: int = 0
    c: float = 1.0
    p: float = 1.0
    fn: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = np.asarray(x, dtype=float)[..., self.on]
        return self.of(y)

    def of(self, y):
        y = np.asarray(y, dtype=float)
        k = self.kind
        if k == "const":
            return np.full_like(y, self.c)
        if k == "inverse":
            return self.c / y
        if k == "inv_square":
            return self.c / (y * y)
        if k == "power":
            return self.c * y**self.p
        if k == "custom":
            return np.asarray(self.fn(y), dtype=float)
        raise ValueError(f"unknown weight kind {k!r}")

    def derivative(self, y):
        """d w / d y, used for derivative tables of closed forms."""
        y = np.asarray(y, dtype=float)
        k = self.kind
        if k == "const":
            return np.zeros_like(y)
        if k == "inverse":
            return -self.c / (y * y)
        if k == "inv_square":
            return -2.0 * self.c / y**3
        if k == "power":
            return self.c * self.p * y ** (self.p - 1.0)
        h = 1e-5 * np.maximum(1.0, np.abs(y))
        return (self.of(y + h) - self.of(y - h)) / (2 * h)

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise TypeError("custom weights cannot be serialized")
        return {"kind": self.kind, "on": self.on, "c": self.c, "p": self.p}

    @staticmethod
    def from_dict(d: dict) -> "Weight":
        return Weight(**d)


ONE = Weight("const")


# ---------------------------------------------------------------- components


@dataclass(frozen=True)
class Asset:
    label: str
    kind = "asset"


@dataclass(frozen=True)
class Time:
    kind = "time"


@dataclass(frozen=True)
class TimeIntegral:
    of: Ref
    kind = "time_integral"


@dataclass(frozen=True)
class WeightedQV:
    of: Ref
    weight: Weight = ONE
    kind = "weighted_qv"


@dataclass(frozen=True)
class CrossVar:
    a: Ref
    b: Ref
    weight: Weight = ONE
    kind = "cross_var"


@dataclass(frozen=True)
class TimeValue:
    asset: str = "S"
    claim: str = "C"
    g: Payoff = Payoff.neglog()
    kind = "time_value"


@dataclass(frozen=True)
class RunningMax:
    of: str = "S"
    kind = "running_max"


@dataclass(frozen=True)
class RunningMin:
    of: str = "S"
    kind = "running_min"


@dataclass(frozen=True)
class DrawdownSq:
    """Squared drawdown (max - S)^2, or squared drawup (S - min)^2."""

    variant: str = "max"
    of: str = "S"
    kind = "drawdown_sq"

    def __post_init__(self):
        if self.variant not in ("max", "min"):
            raise ValueError("drawdown variant must be 'max' or 'min'")


_COMPONENTS = {c.kind: c for c in (Asset, Time, TimeIntegral, WeightedQV, CrossVar, TimeValue,
                                   RunningMax, RunningMin, DrawdownSq)}


def _component_to_dict(c) -> dict:
    d = {"kind": c.kind}
    for name in c.__dataclass_fields__:
        v = getattr(c, name)
        d[name] = v.to_dict() if hasattr(v, "to_dict") else v
    return d


def _component_from_dict(d: dict):
    d = dict(d)
    cls = _COMPONENTS.get(d.pop("kind", None))
    if cls is None:
        raise ValueError(f"unknown component kind in {d}")
    if "weight" in d:
        d["weight"] = Weight.from_dict(d["weight"])
    if "g" in d:
        d["g"] = Payoff.from_dict(d["g"])
    return cls(**d)


class NotInClass(TypeError):
    """Raised when coefficients of a running extremum are requested."""


@dataclass(frozen=True)
class FunctionalSpec:
    """Ordered components of X and the traded labels they integrate against."""

    assets: tuple
    components: tuple

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "components", tuple(self.components))
        for i, c in enumerate(self.components):
            for ref in self._refs(c):
                if isinstance(ref, str):
                    if ref not in self.assets:
                        raise ValueError(f"component {i} refers to unknown asset {ref!r}")
                elif not 0 <= ref < i:
                    raise ValueError(f"component {i} must refer to an earlier component, got {ref}")
            w = getattr(c, "weight", None)
            if w is not None and not 0 <= w.on < i:
                raise ValueError(f"weight of component {i} must depend on an earlier component")
            if isinstance(c, TimeValue):
                self.asset_index(c.asset)
            if isinstance(c, TimeIntegral) and isinstance(c.of, str):
                self.asset_index(c.of)

    @staticmethod
    def _refs(c) -> list:
        if isinstance(c, Asset):
            return [c.label]
        if isinstance(c, TimeIntegral):
            return [c.of]
        if isinstance(c, WeightedQV):
            return [c.of]
        if isinstance(c, CrossVar):
            return [c.a, c.b]
        if isinstance(c, TimeValue):
            return [c.asset, c.claim]
        if isinstance(c, (RunningMax, RunningMin, DrawdownSq)):
            return [c.of]
        return []

    @staticmethod
    def of_assets(labels: Sequence[str]) -> "FunctionalSpec":
        return FunctionalSpec(tuple(labels), tuple(Asset(lb) for lb in labels))

    @property
    def n(self) -> int:
        return len(self.components)

    @property
    def d(self) -> int:
        return len(self.assets)

    @property
    def in_class(self) -> list:
        return [not isinstance(c, (RunningMax, RunningMin)) for c in self.components]

    def asset_index(self, label: str) -> int:
        """Index of the component that tracks the asset ``label`` itself."""
        for i, c in enumerate(self.components):
            if isinstance(c, Asset) and c.label == label:
                return i
        raise ValueError(f"asset {label!r} must appear as a component")

    def to_dict(self) -> dict:
        return {"assets": list(self.assets), "components": [_component_to_dict(c) for c in self.components]}

    @staticmethod
    def from_dict(d: dict) -> "FunctionalSpec":
        return FunctionalSpec(tuple(d["assets"]), tuple(_component_from_dict(c) for c in d["components"]))

    # ---------------------------------------------------------- coefficients

    def coefficients(self, x: np.ndarray, allow_extrema: bool = False):
        """Return (alpha, beta, gamma) with shapes (..., n, d), (..., n, d, d), (..., n).

        Running extrema get zero coefficients when ``allow_extrema`` is set,
        which is their dynamics away from the diagonal {S = M}.
        """
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        n, d = self.n, self.d
        alpha = np.zeros(lead + (n, d))
        beta = np.zeros(lead + (n, d, d))
        gamma = np.zeros(lead + (n,))
        for i, c in enumerate(self.components):
            if isinstance(c, Asset):
                alpha[..., i, self.assets.index(c.label)] = 1.0
            elif isinstance(c, Time):
                gamma[..., i] = 1.0
            elif isinstance(c, TimeIntegral):
                j = self.asset_index(c.of) if isinstance(c.of, str) else c.of
                gamma[..., i] = x[..., j]
            elif isinstance(c, WeightedQV):
                a = self._ref_alpha(c.of, alpha)
                beta[..., i, :, :] = c.weight(x)[..., None, None] * a[..., :, None] * a[..., None, :]
            elif isinstance(c, CrossVar):
                a = self._ref_alpha(c.a, alpha)
                b = self._ref_alpha(c.b, alpha)
                outer = a[..., :, None] * b[..., None, :]
                beta[..., i, :, :] = c.weight(x)[..., None, None] * 0.5 * (outer + np.swapaxes(outer, -1, -2))
            elif isinstance(c, TimeValue):
                js, jc = self.assets.index(c.asset), self.assets.index(c.claim)
                s = x[..., self.asset_index(c.asset)]
                alpha[..., i, js] = -c.g.d1(s)
                alpha[..., i, jc] = 1.0
                beta[..., i, js, js] = -0.5 * c.g.d2(s)
            elif isinstance(c, DrawdownSq):
                j = self.assets.index(c.of)
                root = np.sqrt(np.maximum(x[..., i], 0.0))
                alpha[..., i, j] = -2.0 * root if c.variant == "max" else 2.0 * root
                beta[..., i, j, j] = 1.0
            elif isinstance(c, (RunningMax, RunningMin)):
                if not allow_extrema:
                    raise NotInClass(f"component {i} ({c.kind}) has no coefficient triple")
        return alpha, beta, gamma

    def _ref_alpha(self, ref: Ref, alpha: np.ndarray) -> np.ndarray:
        if isinstance(ref, str):
            e = np.zeros(self.d)
            e[self.assets.index(ref)] = 1.0
            return np.broadcast_to(e, alpha.shape[:-2] + (self.d,))
        return alpha[..., ref, :]


# ---------------------------------------------------------------- tracking


def quadratic_covariation(a: Path, b: Path, weight: Optional[Callable] = None) -> Path:
    """Left-point sum of w(state_j) (a_{j+1}-a_j)(b_{j+1}-b_j).

    ``weight`` receives the left-endpoint values of ``a`` (an array of the
    path's shape minus the last point).
    """
    if a.grid != b.grid:
        raise ValueError("paths live on different grids")
    da = np.diff(a.values, axis=-1)
    db = np.diff(b.values, axis=-1)
    prod = da * db
    if weight is not None:
        prod = prod * weight(a.values[..., :-1])
    out = np.concatenate([np.zeros(prod.shape[:-1] + (1,)), np.cumsum(prod, axis=-1)], axis=-1)
    return Path(a.grid, out)


def _qv_series(y1: np.ndarray, y2: np.ndarray, w_left: np.ndarray) -> np.ndarray:
    prod = np.diff(y1, axis=1) * np.diff(y2, axis=1) * w_left
    out = np.zeros(y1.shape)
    np.cumsum(prod, axis=1, out=out[:, 1:])
    return out


def track_array(spec: FunctionalSpec, a: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Functional values, shape (n_paths, n_times, n), from assets (n_paths, n_times, d)."""
    n_paths, n_t, _ = a.shape
    x = np.zeros((n_paths, n_t, spec.n))

    def series(ref):
        return a[..., spec.assets.index(ref)] if isinstance(ref, str) else x[..., ref]

    dt = grid.dt
    for i, c in enumerate(spec.components):
        if isinstance(c, Asset):
            x[..., i] = series(c.label)
        elif isinstance(c, Time):
            x[..., i] = grid.times
        elif isinstance(c, TimeIntegral):
            y = series(c.of)
            x[:, 1:, i] = np.cumsum(0.5 * (y[:, 1:] + y[:, :-1]) * dt, axis=1)
        elif isinstance(c, WeightedQV):
            y = series(c.of)
            x[..., i] = _qv_series(y, y, c.weight(x[:, :-1]))
        elif isinstance(c, CrossVar):
            x[..., i] = _qv_series(series(c.a), series(c.b), c.weight(x[:, :-1]))
        elif isinstance(c, TimeValue):
            x[..., i] = series(c.claim) - c.g(series(c.asset))
        elif isinstance(c, RunningMax):
            x[..., i] = np.maximum.accumulate(series(c.of), axis=1)
        elif isinstance(c, RunningMin):
            x[..., i] = np.minimum.accumulate(series(c.of), axis=1)
        elif isinstance(c, DrawdownSq):
            s = series(c.of)
            if c.variant == "max":
                x[..., i] = (np.maximum.accumulate(s, axis=1) - s) ** 2
            else:
                x[..., i] = (s - np.minimum.accumulate(s, axis=1)) ** 2
    return x


@dataclass
class TrackedPath:
    """Functional values of a batch of paths; ``x`` has shape (n_paths, n_times, n)."""

    grid: TimeGrid
    x: np.ndarray
    assets: np.ndarray
    spec: FunctionalSpec

    @property
    def x_values(self) -> np.ndarray:
        return self.x

    def to_csv(self, i: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time"] + [f"x{j + 1}" for j in range(self.spec.n)])
        for k, t in enumerate(self.grid.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in self.x[i, k]])
        return buf.getvalue()


def track(spec: FunctionalSpec, paths: PathSet) -> TrackedPath:
    a = paths.asset_matrix(spec.assets)
    return TrackedPath(paths.grid, track_array(spec, a, paths.grid), a, spec)


# ---------------------------------------------------------------- stopping sets


class StoppingSet:
    """Closed set B; subclasses give the predicate, gap and first-entry search."""

    def predicate(self, x) -> np.ndarray:
        return self.signed_gap(x) >= 0

    def signed_gap(self, x) -> np.ndarray:
        raise NotImplementedError

    def first_entry(self, x: np.ndarray, powers=None):
        """First grid index of entry and the fraction of the last step.

        ``x`` has shape (n_paths, n_times, n). Returns (index, theta) arrays;
        index is -1 when the set is never reached and theta in (0, 1] places
        the entry point on the segment from index-1 to index. ``powers[j]`` is
        how coordinate j grows along a partial step (theta**p of the step
        increment); it defaults to 1 for every coordinate.
        """
        raise NotImplementedError


@dataclass(frozen=True)
class Always(StoppingSet):
    kind = "always"

    def signed_gap(self, x):
        return np.zeros(np.shape(x)[:-1])

    def first_entry(self, x, powers=None):
        n = x.shape[0]
        return np.zeros(n, dtype=int), np.ones(n)

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class Never(StoppingSet):
    kind = "never"

    def signed_gap(self, x):
        return np.full(np.shape(x)[:-1], -np.inf)

    def first_entry(self, x, powers=None):
        n = x.shape[0]
        return np.full(n, -1, dtype=int), np.ones(n)

    def to_dict(self):
        return {"kind": self.kind}


def _first_true(mask: np.ndarray) -> np.ndarray:
    any_ = mask.any(axis=1)
    return np.where(any_, mask.argmax(axis=1), -1)


def _power(powers, index: int) -> int:
    return 1 if powers is None else int(powers[index])


def _fraction(y: np.ndarray, idx: np.ndarray, level, power: int = 1) -> np.ndarray:
    """Fraction theta of step idx-1 -> idx at which y_prev + theta**power * dy hits ``level``."""
    theta = np.ones(y.shape[0])
    ok = idx > 0
    rows = np.nonzero(ok)[0]
    if rows.size:
        lev = np.broadcast_to(level, y.shape[:1])[rows]
        y0 = y[rows, idx[rows] - 1]
        y1 = y[rows, idx[rows]]
        with np.errstate(divide="ignore", invalid="ignore"):
            th = (lev - y0) / (y1 - y0)
        theta[rows] = np.clip(np.nan_to_num(th, nan=1.0), 0.0, 1.0)
    return theta if power == 1 else theta ** (1.0 / power)


@dataclass(frozen=True)
class LevelSet(StoppingSet):
    """{x_index = value}; entered when the coordinate reaches the level."""

    index: int
    value: float
    kind = "level"

    def signed_gap(self, x):
        return -np.abs(np.asarray(x)[..., self.index] - self.value)

    def first_entry(self, x, powers=None):
        y = x[..., self.index]
        side = np.sign(y[:, :1] - self.value)
        mask = (y - self.value) * side <= 0
        idx = _first_true(mask)
        return idx, _fraction(y, idx, self.value, _power(powers, self.index))

    def to_dict(self):
        return {"kind": self.kind, "index": self.index, "value": self.value}


@dataclass(frozen=True)
class CorridorExit(StoppingSet):
    """Complement of the open corridor l < x_index < u."""

    index: int
    l: float
    u: float
    kind = "corridor_exit"

    def __post_init__(self):
        if not self.l < self.u:
            raise ValueError("corridor needs l < u")

    def signed_gap(self, x):
        y = np.asarray(x)[..., self.index]
        return np.maximum(self.l - y, y - self.u)

    def first_entry(self, x, powers=None):
        y = x[..., self.index]
        idx = _first_true((y <= self.l) | (y >= self.u))
        rows = np.arange(y.shape[0])
        at = y[rows, np.maximum(idx, 0)]
        level = np.where(at <= self.l, self.l, self.u)
        return idx, _fraction(y, idx, level, _power(powers, self.index))

    def to_dict(self):
        return {"kind": self.kind, "index": self.index, "l": self.l, "u": self.u}


@dataclass(frozen=True)
class Union(StoppingSet):
    members: tuple
    kind = "union"

    def signed_gap(self, x):
        return np.max(np.stack([m.signed_gap(x) for m in self.members]), axis=0)

    def first_entry(self, x, powers=None):
        best_i = np.full(x.shape[0], -1, dtype=int)
        best_t = np.ones(x.shape[0])
        for m in self.members:
            i, t = m.first_entry(x, powers)
            better = (i >= 0) & ((best_i < 0) | (i < best_i) | ((i == best_i) & (t < best_t)))
            best_i = np.where(better, i, best_i)
            best_t = np.where(better, t, best_t)
        return best_i, best_t

    def to_dict(self):
        return {"kind": self.kind, "members": [m.to_dict() for m in self.members]}


def union(*members: StoppingSet) -> "Union":
    return Union(tuple(members))


def stopping_set_from_dict(d: dict) -> StoppingSet:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "always":
        return Always()
    if kind == "never":
        return Never()
    if kind == "level":
        return LevelSet(int(d["index"]), float(d["value"]))
    if kind == "corridor_exit":
        return CorridorExit(int(d["index"]), float(d["l"]), float(d["u"]))
    if kind == "union":
        return Union(tuple(stopping_set_from_dict(m) for m in d["members"]))
    raise ValueError(f"unknown stopping set kind {kind!r}")


def first_hits(B: StoppingSet, x: np.ndarray, offset: int = 0):
    idx, theta = B.first_entry(x)
    return np.where(idx >= 0, idx + offset, -1), theta


@dataclass
class HitResult:
    """Per-path entry data; ``index`` is -1 and ``x_at_hit`` NaN when unstopped."""

    index: np.ndarray
    theta: np.ndarray
    x_at_hit: np.ndarray
    time: np.ndarray

    def __getitem__(self, i):
        if self.index[i] < 0:
            return None
        return {"index": int(self.index[i]), "x_at_hit": self.x_at_hit[i], "time": float(self.time[i])}


def partial_step_powers(spec: FunctionalSpec) -> np.ndarray:
    """Growth exponent of each component along a linearly interpolated step.

    Quadratic-variation components of a segment cut at fraction theta carry
    theta**2 of the step's increment; everything else is interpolated linearly.
    """
    return np.array([2 if isinstance(c, (WeightedQV, CrossVar)) else 1 for c in spec.components])


def hitting(tracked: TrackedPath, B: Optional[StoppingSet]) -> HitResult:
    """First entry into B, with the entry state snapped onto B.

    Within the entry step the assets move linearly, so quadratic-variation
    components advance by theta**2 of their increment and the others by theta.
    """
    x = tracked.x
    n_paths, n_t, n = x.shape
    if B is None:
        B = Never()
    powers = partial_step_powers(tracked.spec)
    idx, theta = B.first_entry(x, powers)
    rows = np.arange(n_paths)
    k = np.maximum(idx, 0)
    km = np.maximum(k - 1, 0)
    th = np.where(idx > 0, theta, 1.0)
    snapped = x[rows, km] + th[:, None] ** powers[None, :] * (x[rows, k] - x[rows, km])
    t = tracked.grid.times
    times = t[km] + th * (t[k] - t[km])
    snapped[idx < 0] = np.nan
    times = np.where(idx < 0, np.nan, times)
    return HitResult(idx, th, snapped, times)
