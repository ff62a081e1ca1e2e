"""Call strips: static arbitrage checks, a local-volatility model reproducing
them, Monte Carlo repricing, and interval-support diagnostics.

Strip conventions: strikes ``k_2 < ... < k_d`` with prices ``C^i``, plus the
implicit zero-strike claim ``k_1 = 0, C^1 = s0``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq, linprog
from scipy.special import ndtr

from .paths import TimeGrid, _draw, simulate
from .payoffs import Payoff, lognormal_price


class CalibrationError(RuntimeError):
    pass


class UnpriceableClaim(ValueError):
    pass


def bs_convex(g: Payoff, s, total_var):
    """E g(s exp(sqrt(v) Z - v/2)): closed form for call/put/log/power, quadrature otherwise."""
    if np.any(np.asarray(total_var) < 0):
        raise ValueError("total variance must be nonnegative")
    try:
        return lognormal_price(g, s, total_var)
    except ValueError as e:
        raise UnpriceableClaim(str(e)) from e


# ---------------------------------------------------------------- Black-Scholes in strike


def _d2(s0, k, sd):
    with np.errstate(divide="ignore"):
        return np.log(s0 / k) / sd - 0.5 * sd


def bs_call(s0, k, t, sigma):
    k = np.asarray(k, dtype=float)
    sd = sigma * np.sqrt(t)
    if np.all(sd == 0):
        return np.maximum(s0 - k, 0.0)
    d2 = _d2(s0, k, sd)
    return s0 * ndtr(d2 + sd) - k * ndtr(d2)


def bs_call_dk(s0, k, t, sigma):
    sd = sigma * np.sqrt(t)
    return -ndtr(_d2(s0, np.asarray(k, dtype=float), sd))


def bs_call_dkk(s0, k, t, sigma):
    k = np.asarray(k, dtype=float)
    sd = sigma * np.sqrt(t)
    d2 = _d2(s0, k, sd)
    return np.exp(-0.5 * d2 * d2) / np.sqrt(2 * np.pi) / (k * sd)


def implied_vol(s0: float, k: float, t: float, price: float) -> float:
    lo, hi = 1e-8, 10.0
    intrinsic = max(s0 - k, 0.0)
    if not intrinsic < price < s0:
        raise CalibrationError(f"price {price} at strike {k} has no implied volatility")
    return brentq(lambda v: float(bs_call(s0, k, t, v)) - price, lo, hi, xtol=1e-14, rtol=1e-14)


# ---------------------------------------------------------------- strips


@dataclass(frozen=True)
class CallStrip:
    s0: float
    strikes: tuple
    prices: tuple

    def __post_init__(self):
        k = np.asarray(self.strikes, dtype=float)
        c = np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "strikes", tuple(float(v) for v in k))
        object.__setattr__(self, "prices", tuple(float(v) for v in c))
        if k.ndim != 1 or k.shape != c.shape:
            raise ValueError("strikes and prices must be equal-length lists")
        if len(k) < 2:
            raise ValueError("a strip needs at least two strikes")
        if not self.s0 > 0:
            raise ValueError("s0 must be positive")
        if np.any(k <= 0) or np.any(np.diff(k) <= 0):
            raise ValueError("strikes must be positive and strictly increasing")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise ValueError("prices must be finite and nonnegative")

    @staticmethod
    def black_scholes(s0: float, strikes, sigma: float, T: float) -> "CallStrip":
        return CallStrip(s0, tuple(strikes), tuple(bs_call(s0, np.asarray(strikes, float), T, sigma)))

    @property
    def k(self) -> np.ndarray:
        return np.asarray(self.strikes)

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.prices)

    @property
    def time_values(self) -> np.ndarray:
        return self.c - np.maximum(self.s0 - self.k, 0.0)

    @property
    def slopes(self) -> np.ndarray:
        """D^2, ..., D^d."""
        kk = np.concatenate([[0.0], self.k])
        cc = np.concatenate([[self.s0], self.c])
        return np.diff(cc) / np.diff(kk)

    @property
    def kinks(self) -> np.ndarray:
        """Delta^3, ..., Delta^d."""
        return np.diff(self.slopes)

    def scaled(self, lam: float) -> "CallStrip":
        return CallStrip(self.s0 * lam, tuple(self.k * lam), tuple(self.c * lam))

    def to_dict(self) -> dict:
        return {"s0": self.s0, "strikes": list(self.strikes), "prices": list(self.prices)}

    @staticmethod
    def from_dict(d: dict) -> "CallStrip":
        return CallStrip(float(d["s0"]), tuple(d["strikes"]), tuple(d["prices"]))


@dataclass(frozen=True)
class ArbReport:
    v_min: float
    delta_min: float
    d2: float
    dd: float
    passed: bool
    violated: tuple

    def to_dict(self) -> dict:
        return {"v_min": self.v_min, "delta_min": self.delta_min, "d2": self.d2, "dd": self.dd,
                "pass": self.passed, "violated": list(self.violated)}


def check_strip(strip: CallStrip) -> ArbReport:
    v_min = float(strip.time_values.min())
    D = strip.slopes
    delta_min = float(strip.kinks.min())
    d2, dd = float(D[0]), float(D[-1])
    violated = []
    if not v_min > 0:
        violated.append("v_min")
    if not delta_min > 0:
        violated.append("delta_min")
    if not d2 > -1:
        violated.append("d2")
    if not dd < 0:
        violated.append("dd")
    return ArbReport(v_min, delta_min, d2, dd, not violated, tuple(violated))


# ---------------------------------------------------------------- local vol surface


@dataclass
class LocalVolSurface:
    """sigma(k, t) on a (t, k) grid covering the patch [a1, a2] x [t0, T]; sigma0 elsewhere."""

    k: np.ndarray
    t: np.ndarray
    sigma: np.ndarray  # (len(t), len(k))
    sigma0: float
    lower: float = field(default=None)
    upper: float = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.shape != (len(self.t), len(self.k)):
            raise ValueError("sigma grid shape must be (len(t), len(k))")
        if np.any(np.diff(self.k) <= 0) or np.any(np.diff(self.t) < 0):
            raise ValueError("grid axes must be increasing")
        lo = min(float(self.sigma.min()), self.sigma0)
        hi = max(float(self.sigma.max()), self.sigma0)
        self.lower = lo if self.lower is None else self.lower
        self.upper = hi if self.upper is None else self.upper

    @staticmethod
    def flat(sigma: float, T: float = 1.0) -> "LocalVolSurface":
        return LocalVolSurface(np.array([0.0, 1.0]), np.array([T / 2, T]), np.full((2, 2), sigma), sigma)

    @property
    def patch(self):
        return (self.k[0], self.k[-1], self.t[0], self.t[-1])

    def row(self, t: float) -> Optional[np.ndarray]:
        """sigma(., t) on the k grid, or None outside the patch's time range."""
        if t < self.t[0] or t > self.t[-1] or len(self.t) < 2:
            return None
        j = min(int(np.searchsorted(self.t, t, side="right")) - 1, len(self.t) - 2)
        w = (t - self.t[j]) / (self.t[j + 1] - self.t[j]) if self.t[j + 1] > self.t[j] else 0.0
        return (1 - w) * self.sigma[j] + w * self.sigma[j + 1]

    def __call__(self, s, t):
        s = np.asarray(s, dtype=float)
        out = np.full(s.shape, float(self.sigma0))
        r = self.row(float(t))
        if r is None:
            return out
        inside = (s >= self.k[0]) & (s <= self.k[-1])
        out[inside] = np.interp(s[inside], self.k, r)
        return out

    def to_dict(self) -> dict:
        return {"kind": "surface", "k": self.k.tolist(), "t": self.t.tolist(),
                "sigma": self.sigma.tolist(), "sigma0": self.sigma0,
                "lower": self.lower, "upper": self.upper}

    @staticmethod
    def from_dict(d: dict) -> "LocalVolSurface":
        d = {key: v for key, v in d.items() if key != "kind"}
        return LocalVolSurface(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,k,sigma\n")
        for i, ti in enumerate(self.t):
            for j, kj in enumerate(self.k):
                buf.write(f"{float(ti)!r},{float(kj)!r},{float(self.sigma[i, j])!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, sigma0: float) -> "LocalVolSurface":
        rows = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        t = np.unique(rows[:, 0])
        k = np.unique(rows[:, 1])
        return LocalVolSurface(k, t, rows[:, 2].reshape(len(t), len(k)), sigma0)


def _sup_sigma(cond, grid=np.geomspace(1e-4, 5.0, 600)) -> float:
    ok = np.array([cond(s) for s in grid])
    if not ok.any():
        raise CalibrationError("no volatility satisfies the base-level condition")
    i = int(np.nonzero(ok)[0][-1])
    if i == len(grid) - 1:
        return float(grid[-1])
    lo, hi = grid[i], grid[i + 1]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cond(mid) else (lo, mid)
    return float(lo)


@dataclass(frozen=True)
class BaseLevel:
    a1: float
    a2: float
    sigma1: float
    sigma2: float
    sigma_implied: float
    sigma0: float


def base_level(strip: CallStrip, T: float) -> BaseLevel:
    s0, k, c = strip.s0, strip.k, strip.c
    D = strip.slopes
    a1 = (s0 - c[0]) / 2
    a2 = k[-1] - c[-1] / D[-1]
    kd, Cd, k2, C2 = k[-1], c[-1], k[0], c[0]

    def cond1(sig):
        # tangent at a2 evaluated at k_d stays below half the top price
        return bs_call(s0, a2, T, sig) + bs_call_dk(s0, a2, T, sig) * (kd - a2) <= 0.5 * Cd

    def cond2(sig):
        return bs_call_dk(s0, a1, T, sig) <= (C2 - bs_call(s0, a1, T, sig)) / (k2 - a1)

    s1, s2 = _sup_sigma(cond1), _sup_sigma(cond2)
    ivs = [implied_vol(s0, ki, T, ci) for ki, ci in zip(k, c)]
    s_iv = float(min(ivs))
    s0_ = min(s1, s2, s_iv)
    if not (cond1(s0_) and cond2(s0_)):
        s0_ = min(s1, s2)
    return BaseLevel(float(a1), float(a2), s1, s2, s_iv, float(s0_))


def dupire_calibrate(strip: CallStrip, T: float, n_k: int = 241, n_t: int = 65,
                     base: str = "implied", margin: float = 0.05) -> LocalVolSurface:
    """Local volatility surface whose model reproduces the strip at maturity T.

    The patch call surface on [a1, a2] x [T/2, T] is
    c~(k, t) = c_BS(k, t; sigma0) + lam(t) e(k), lam = ((t - T/2)/(T/2))^2,
    where e = c_I(., T) - c_BS(., T; sigma0) vanishes on [a1, k_2/2], takes the
    values C^i - c_BS(k_i) at the strikes and vanishes with its first two
    derivatives at k_2/2 and a2. e'' is piecewise linear (so c_I is C^2) and is
    the smoothest such function that keeps c~ convex in k and nondecreasing in
    t on the whole patch; it is found by a small quadratic program. Outside the
    patch sigma = sigma0.

    ``base`` picks sigma0: "thresholds" uses the two threshold volatilities;
    "implied" first tries the smallest implied volatility of the strip and
    falls back to the thresholds when no admissible e exists there.
    """
    rep = check_strip(strip)
    if not rep.passed:
        raise CalibrationError(f"strip admits static arbitrage: {list(rep.violated)}")
    if not T > 0:
        raise ValueError("maturity must be positive")
    if base not in ("implied", "thresholds"):
        raise ValueError("base must be 'implied' or 'thresholds'")
    s0 = strip.s0
    bl = base_level(strip, T)
    a1, a2 = bl.a1, bl.a2
    half = strip.k[0] / 2
    xs = np.concatenate([[a1, half], strip.k, [a2]])
    if np.any(np.diff(xs) <= 0):
        raise CalibrationError(f"anchor points are not ordered: {xs.tolist()}")
    left = np.linspace(a1, half, max(3, int(n_k * (half - a1) / (a2 - a1))))
    right = _patch_grid(half, a2, n_k, strip.k)
    kg = np.union1d(left, right)
    tg = np.linspace(T / 2, T, n_t)

    levels = [bl.sigma0]
    if base == "implied" and bl.sigma_implied > bl.sigma0:
        levels.insert(0, bl.sigma_implied)
    errors = []
    for sig0 in levels:
        try:
            e, e2 = _patch_slice(strip, T, sig0, right, tg, margin)
            dv = np.interp(kg, right, e, left=0.0)
            ddv = np.interp(kg, right, e2, left=0.0)
            sig = _dupire_grid(s0, T, sig0, kg, tg, dv, ddv)
            break
        except CalibrationError as err:
            errors.append(f"sigma0={sig0:.6g}: {err}")
    else:
        raise CalibrationError("; ".join(errors))
    meta = {"a1": a1, "a2": a2, "sigma1": bl.sigma1, "sigma2": bl.sigma2,
            "sigma_implied": bl.sigma_implied, "T": T, "base": base}
    return LocalVolSurface(kg, tg, sig, sig0, meta=meta)


def _integration_maps(k: np.ndarray):
    """Matrices (P, Q) with e' = P u and e = Q u for e'' = u piecewise linear, e = e' = 0 at k[0]."""
    n = len(k)
    h = np.diff(k)
    P = np.zeros((n, n))
    Q = np.zeros((n, n))
    for i in range(n - 1):
        P[i + 1] = P[i]
        P[i + 1, i] += h[i] / 2
        P[i + 1, i + 1] += h[i] / 2
        Q[i + 1] = Q[i] + h[i] * P[i]
        Q[i + 1, i] += h[i] ** 2 / 3
        Q[i + 1, i + 1] += h[i] ** 2 / 6
    return P, Q


def _patch_grid(lo: float, hi: float, n: int, anchors) -> np.ndarray:
    """Uniform grid on [lo, hi] with ``anchors`` inserted and near-duplicates dropped."""
    g = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    anchors = np.asarray(anchors, dtype=float)
    keep = np.min(np.abs(g[:, None] - anchors[None, :]), axis=1) > h / 4
    keep[0] = keep[-1] = True
    return np.union1d(g[keep], anchors)


def _patch_slice(strip: CallStrip, T: float, sig0: float, k: np.ndarray, tg: np.ndarray, margin: float):
    """e and e'' on k = [k_2/2, ..., a2] from the total-variation program."""
    s0 = strip.s0
    n = len(k)
    P, Q = _integration_maps(k)
    at = np.searchsorted(k, strip.k)
    targets = strip.c - bs_call(s0, strip.k, T, sig0)
    scale = max(float(np.abs(strip.c).max()), 1e-300)
    if np.any(targets < -1e-12 * scale):
        raise CalibrationError("a strike is priced below the base level, the patch would decrease in t")
    targets = np.maximum(targets, 0.0)
    if targets.max() <= 1e-12 * scale:
        return np.zeros(n), np.zeros(n)
    # convexity of c~ for every t: e'' >= -c_BS''(k, t) / lam(t)
    lam = ((tg[1:] - T / 2) / (T / 2)) ** 2
    ratio = np.stack([bs_call_dkk(s0, k, t, sig0) for t in tg[1:]]) / lam[:, None]
    lower = -(1 - margin) * ratio.min(axis=0) / scale
    # variables [u (n), w (n-1)]; minimise sum w with w >= |u_{i+1} - u_i|
    m = n - 1
    Dm = np.diff(np.eye(n), axis=0)
    A_ub = np.block([[Dm, -np.eye(m)], [-Dm, -np.eye(m)], [-Q, np.zeros((n, m))]])
    b_ub = np.zeros(2 * m + n)
    A_eq = np.hstack([np.vstack([Q[at], Q[-1:], P[-1:]]), np.zeros((len(at) + 2, m))])
    b_eq = np.concatenate([targets / scale, [0.0, 0.0]])
    bounds = [(lo, None) for lo in lower] + [(0.0, None)] * m
    bounds[0] = bounds[n - 1] = (0.0, 0.0)
    cost = np.concatenate([np.zeros(n), np.ones(m)])
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise CalibrationError(f"no admissible interpolant on k in [{k[0]:.6g}, {k[-1]:.6g}]: {res.message}")
    u = res.x[:n] * scale
    return Q @ u, u


def _dupire_grid(s0, T, sig0, kg, tg, dv, ddv):
    floor = 1e-10 / s0
    sig = np.empty((len(tg), len(kg)))
    for i, t in enumerate(tg):
        lam = ((t - T / 2) / (T / 2)) ** 2
        dlam = 2 * (t - T / 2) / (T / 2) ** 2
        ckk = bs_call_dkk(s0, kg, t, sig0)
        den = ckk + lam * ddv
        bad = den < -floor
        if bad.any():
            idx = np.nonzero(bad)[0]
            raise CalibrationError(f"blended surface not convex on k in [{kg[idx[0]]:.6g}, "
                                   f"{kg[idx[-1]]:.6g}] at t={t:.6g}")
        num = sig0**2 * kg**2 * ckk + 2 * dlam * dv
        if np.any(num < -floor):
            idx = np.nonzero(num < -floor)[0]
            raise CalibrationError(f"blended surface decreasing in t on k in [{kg[idx[0]]:.6g}, "
                                   f"{kg[idx[-1]]:.6g}] at t={t:.6g}")
        # sigma0^2 plus the patch correction; exact sigma0 where the correction vanishes
        corr = (2 * dlam * dv - sig0**2 * kg**2 * lam * ddv) / (kg**2 * np.maximum(den, floor))
        # where the call curvature underflows the slice carries no mass; keep sigma0
        corr = np.where(den > floor, corr, 0.0)
        sig[i] = np.sqrt(np.maximum(sig0**2 + corr, 0.0))
    return sig


# ---------------------------------------------------------------- repricing


@dataclass
class RepriceReport:
    strikes: np.ndarray
    targets: np.ndarray
    prices: np.ndarray
    se: np.ndarray

    @property
    def rel_error(self) -> np.ndarray:
        return (self.prices - self.targets) / self.targets

    @property
    def max_rel_error(self) -> float:
        return float(np.abs(self.rel_error).max())

    def within(self, rel: float = 0.01, n_se: float = 3.0) -> np.ndarray:
        tol = np.maximum(rel * self.targets, n_se * self.se)
        return np.abs(self.prices - self.targets) <= tol

    def to_csv(self) -> str:
        lines = ["strike,target,price,se,rel_error"]
        for row in zip(self.strikes, self.targets, self.prices, self.se, self.rel_error):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def simulate_terminal(surface: LocalVolSurface, s0: float, grid: TimeGrid, n_paths: int, seed: int,
                      chunk: int = 4096) -> np.ndarray:
    """Terminal prices of the log-Euler local-vol scheme without storing paths.

    Runs of steps where the volatility does not depend on the price are
    advanced in one matrix-vector product.
    """
    out = np.empty(n_paths)
    times, dt = grid.times, grid.dt
    sdt = np.sqrt(dt)
    lo, hi = surface.lower, surface.upper
    levels = []
    for t in times[:-1]:
        r = surface.row(float(t))
        if r is None or np.all(r == surface.sigma0):
            levels.append(float(np.clip(surface.sigma0, lo, hi)))
        else:
            levels.append(r)
    runs = []
    j = 0
    while j < grid.n_steps:
        if isinstance(levels[j], float):
            e = j
            while e < grid.n_steps and isinstance(levels[e], float) and levels[e] == levels[j]:
                e += 1
            runs.append((j, e, levels[j]))
            j = e
        else:
            runs.append((j, j + 1, levels[j]))
            j += 1
    for start in range(0, n_paths, chunk):
        n = min(chunk, n_paths - start)
        z = _draw(seed, start, n, [1], grid.n_steps)[0][:, 0]
        s = np.full(n, float(s0))
        for a, b, lv in runs:
            if isinstance(lv, float):
                s = s * np.exp(lv * (z[:, a:b] @ sdt[a:b]) - 0.5 * lv * lv * dt[a:b].sum())
            else:
                sig = np.where((s >= surface.k[0]) & (s <= surface.k[-1]),
                               np.interp(s, surface.k, lv), surface.sigma0)
                sig = np.clip(sig, lo, hi)
                s = s * np.exp(sig * sdt[a] * z[:, a] - 0.5 * sig * sig * dt[a])
        out[start:start + n] = s
    return out


def reprice(surface: LocalVolSurface, strip: CallStrip, n_paths: int = 200_000, grid: TimeGrid = None,
            seed: int = 0, T: float = None, chunk: int = 4096) -> RepriceReport:
    if grid is None:
        T = surface.meta.get("T", T) if T is None else T
        grid = TimeGrid.uniform(T, 2**12)
    sT = simulate_terminal(surface, strip.s0, grid, n_paths, seed, chunk)
    pay = np.maximum(sT[:, None] - strip.k[None, :], 0.0)
    prices = pay.mean(axis=0)
    se = pay.std(axis=0, ddof=1) / np.sqrt(n_paths)
    return RepriceReport(strip.k.copy(), strip.c.copy(), prices, se)


# ---------------------------------------------------------------- support


@dataclass(frozen=True)
class SupportReport:
    probability: float
    se: float
    slope_a: float
    slope_b: float
    strict: bool
    n_paths: int

    def to_dict(self) -> dict:
        return {"probability": self.probability, "se": self.se, "slope_a": self.slope_a,
                "slope_b": self.slope_b, "strict": self.strict, "n_paths": self.n_paths}


def support_diagnostic(model, t: float, interval, n_paths: int = 10_000, seed: int = 0,
                       n_steps: int = 64, chunk: int = 1024) -> SupportReport:
    """P(S_t in [a, b)) and the discrete call slopes -P(S_t >= a), -P(S_t >= b).

    The verdict is strict when the slopes differ by more than 3 standard errors.
    """
    a, b = (float(v) for v in interval)
    if not 0 < a < b:
        raise ValueError("interval must satisfy 0 < a < b")
    grid = TimeGrid.uniform(t, n_steps)
    sT = np.empty(n_paths)
    for start in range(0, n_paths, chunk):
        n = min(chunk, n_paths - start)
        ps = simulate(model, grid, seed, n, start)
        sT[start:start + n] = ps.components["S"][:, -1]
    above_a, above_b = sT >= a, sT >= b
    ind = above_a & ~above_b
    p = float(ind.mean())
    se = float(ind.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    slope_a, slope_b = -float(above_a.mean()), -float(above_b.mean())
    return SupportReport(p, se, slope_a, slope_b, bool(slope_b - slope_a > 3 * se), n_paths)
