"""Differential operators of path functionals and the boundary-value solvers.

For a hedging function ``F`` and a functional ``X`` with coefficients
``(alpha, beta, gamma)`` the operators are

    L^ab_ij F = sum_k beta^k_ij dF/dx_k + 1/2 sum_kl alpha^k_i alpha^l_j d2F/dx_k dx_l
    L^g F     = sum_k gamma^k dF/dx_k
    L^a F     = sum_k alpha^k dF/dx_k        (the hedge ratio)

``F(X)`` is a local martingale for every continuous model exactly when the
first two vanish on the range of ``X``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import solve_banded
from scipy.stats import qmc

from .functionals import FunctionalSpec, Weight
from .payoffs import Payoff


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------- scalar fields


def fd_steps(x: np.ndarray) -> np.ndarray:
    return 1e-4 * np.maximum(1.0, np.abs(x))


@dataclass
class ScalarField:
    """Vectorised function of the state with first and second derivatives.

    Callables take arrays with a trailing axis of length ``n``. Missing
    derivatives fall back to central finite differences with step
    ``1e-4 * max(1, |x_i|)``.
    """

    fn: Callable
    n: int
    grad_fn: Optional[Callable] = None
    hess_fn: Optional[Callable] = None
    box: Optional[np.ndarray] = None
    name: str = ""
    partial_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=float).reshape(self.n, 2)

    def check_domain(self, x: np.ndarray, tol: float = 1e-12):
        if self.box is None:
            return
        x = np.asarray(x, dtype=float)
        lo, hi = self.box[:, 0], self.box[:, 1]
        span = np.maximum(1.0, np.abs(self.box)).max(axis=1)
        bad = np.any((x < lo - tol * span) | (x > hi + tol * span), axis=-1)
        if np.any(bad):
            worst = np.asarray(x).reshape(-1, self.n)[np.argmax(np.ravel(bad))]
            raise DomainError(f"point {worst.tolist()} lies outside the domain box {self.box.tolist()}")

    def value(self, x) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    __call__ = value

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(x), dtype=float)
        return self.fd_gradient(x)

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.hess_fn is not None:
            return np.asarray(self.hess_fn(x), dtype=float)
        return self.fd_hessian(x)

    def fd_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = fd_steps(x)
        out = np.empty(x.shape)
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = 1.0
            hi = h[..., i:i + 1]
            out[..., i] = (self.fn(x + hi * e) - self.fn(x - hi * e)) / (2 * hi[..., 0])
        return out

    def fd_hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = fd_steps(x)
        n = self.n
        out = np.empty(x.shape + (n,))
        f0 = self.fn(x)
        eye = np.eye(n)
        for i in range(n):
            hi = h[..., i:i + 1] * eye[i]
            out[..., i, i] = (self.fn(x + hi) - 2 * f0 + self.fn(x - hi)) / h[..., i] ** 2
            for j in range(i + 1, n):
                hj = h[..., j:j + 1] * eye[j]
                v = (self.fn(x + hi + hj) - self.fn(x + hi - hj) - self.fn(x - hi + hj)
                     + self.fn(x - hi - hj)) / (4 * h[..., i] * h[..., j])
                out[..., i, j] = out[..., j, i] = v
        return out

    def linear_combination(self, a: float, other: "ScalarField", b: float) -> "ScalarField":
        """``a*self + b*other`` with derivatives combined the same way."""
        return ScalarField(
            lambda x: a * self.value(x) + b * other.value(x), self.n,
            lambda x: a * self.gradient(x) + b * other.gradient(x),
            lambda x: a * self.hessian(x) + b * other.hessian(x),
            self.box, f"{a}*{self.name}+{b}*{other.name}")


def polynomial_field(coeffs: dict, n: int, box=None, name: str = "") -> ScalarField:
    """Field ``sum c * prod x_i^e_i`` from {exponent tuple: coefficient}, with exact derivatives."""
    items = [(np.asarray(e, dtype=int), float(c)) for e, c in coeffs.items()]

    def mono(x, e, c):
        return c * np.prod(x ** e, axis=-1)

    def fn(x):
        return sum(mono(x, e, c) for e, c in items) + 0.0 * x[..., 0]

    def grad(x):
        g = np.zeros(x.shape)
        for e, c in items:
            for i in range(n):
                if e[i]:
                    e2 = e.copy()
                    e2[i] -= 1
                    g[..., i] += e[i] * mono(x, e2, c)
        return g

    def hess(x):
        h = np.zeros(x.shape + (n,))
        for e, c in items:
            for i in range(n):
                for j in range(n):
                    e2 = e.copy()
                    k = e2[i]
                    e2[i] -= 1
                    k2 = e2[j]
                    e2[j] -= 1
                    if k and k2:
                        h[..., i, j] += k * k2 * mono(x, e2, c)
        return h

    return ScalarField(fn, n, grad, hess, box, name)


# ---------------------------------------------------------------- operators


@dataclass
class OperatorValues:
    l_gamma: np.ndarray
    l_ab: np.ndarray
    l_alpha: np.ndarray


def operators(F: ScalarField, spec: FunctionalSpec, x, allow_extrema: bool = False) -> OperatorValues:
    """Operator values at one point or a batch of points (trailing axis n)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.n:
        raise ValueError(f"state dimension {x.shape[-1]} does not match the functional ({spec.n})")
    F.check_domain(x)
    alpha, beta, gamma = spec.coefficients(x, allow_extrema=allow_extrema)
    g = F.gradient(x)
    H = F.hessian(x)
    l_alpha = np.einsum("...k,...kd->...d", g, alpha)
    l_ab = np.einsum("...k,...kij->...ij", g, beta) + 0.5 * np.einsum("...ki,...kl,...lj->...ij", alpha, H, alpha)
    l_gamma = np.einsum("...k,...k->...", g, gamma)
    return OperatorValues(l_gamma, l_ab, l_alpha)


def hedge_ratio(F: ScalarField, spec: FunctionalSpec, x) -> np.ndarray:
    """L^a F, without the second-order work of :func:`operators`.

    Only partials along components that integrate against dA are needed, so
    fields exposing ``partial`` are asked for those alone.
    """
    x = np.asarray(x, dtype=float)
    alpha, _, _ = spec.coefficients(x)
    live = [i for i, c in enumerate(spec.components) if c.kind in ("asset", "time_value", "drawdown_sq")]
    if F.partial_fn is not None and len(live) < spec.n:
        return sum(F.partial_fn(x, i)[..., None] * alpha[..., i, :] for i in live)
    return np.einsum("...k,...kd->...d", F.gradient(x), alpha)


@dataclass
class ResidualReport:
    max_gamma: float
    max_ab: np.ndarray
    worst_gamma: np.ndarray
    worst_ab: np.ndarray
    n_samples: int

    @property
    def max_abs(self) -> float:
        return float(max(self.max_gamma, float(np.max(self.max_ab))))

    @property
    def worst_point(self) -> np.ndarray:
        return self.worst_gamma if self.max_gamma >= np.max(self.max_ab) else self.worst_ab

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_gamma": self.max_gamma, "max_ab": self.max_ab.tolist(),
                "worst_point": self.worst_point.tolist(), "n_samples": self.n_samples}


def residual(F: ScalarField, spec: FunctionalSpec, samples, allow_extrema: bool = False) -> ResidualReport:
    """Largest |L^g F| and |L^ab_ij F| over the sample points."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("residual needs a non-empty (m, n) array of sample points")
    ov = operators(F, spec, x, allow_extrema=allow_extrema)
    sym = ov.l_ab + np.swapaxes(ov.l_ab, -1, -2)
    if not np.allclose(sym, 2 * ov.l_ab, rtol=0, atol=1e-10 * max(1.0, float(np.abs(ov.l_ab).max()))):
        raise ArithmeticError("second-order operator matrix is not symmetric")
    ag = np.abs(ov.l_gamma)
    aab = np.abs(ov.l_ab)
    ig = int(np.argmax(ag))
    flat = aab.reshape(len(x), -1).max(axis=1)
    iab = int(np.argmax(flat))
    return ResidualReport(float(ag[ig]), aab.max(axis=0), x[ig], x[iab], len(x))


def halton_samples(box, n: int = 256) -> np.ndarray:
    """Deterministic low-discrepancy points strictly inside the box."""
    box = np.asarray(box, dtype=float)
    h = qmc.Halton(d=box.shape[0], scramble=False)
    h.fast_forward(1)
    u = h.random(n)
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


# ---------------------------------------------------------------- grid fields


class OutOfHull(DomainError):
    pass


def _bspline_basis(t: np.ndarray, k: int, x: np.ndarray):
    """Interval index and the k+1 nonzero B-spline values at x (de Boor)."""
    n_coef = t.size - k - 1
    i = np.clip(np.searchsorted(t, x, side="right") - 1, k, n_coef - 1)
    N = np.zeros((x.size, k + 1))
    N[:, 0] = 1.0
    left = np.empty((k + 1, x.size))
    right = np.empty((k + 1, x.size))
    for j in range(1, k + 1):
        left[j] = x - t[i + 1 - j]
        right[j] = t[i + j] - x
        saved = np.zeros(x.size)
        for r in range(j):
            temp = N[:, r] / (right[r + 1] + left[j - r])
            N[:, r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        N[:, j] = saved
    return i, N


def _diff_coefs(t: np.ndarray, k: int, c: np.ndarray, axis: int):
    """Knots, degree and coefficients of the derivative spline along ``axis``."""
    c = np.moveaxis(c, axis, 0)
    denom = (t[k + 1:k + 1 + c.shape[0] - 1] - t[1:c.shape[0]])
    shape = (-1,) + (1,) * (c.ndim - 1)
    dc = k * (c[1:] - c[:-1]) / denom.reshape(shape)
    return t[1:-1], k - 1, np.moveaxis(dc, 0, axis)


class _TensorSpline:
    """Fast evaluation of a FITPACK tensor-product spline and its partials."""

    def __init__(self, spline: RectBivariateSpline, kx: int, ky: int):
        tx, ty, c = spline.tck  # full knot vectors
        nx, ny = tx.size - kx - 1, ty.size - ky - 1
        self.parts = {}
        base = (tx, kx, ty, ky, c.reshape(nx, ny))
        self.parts[(0, 0)] = base
        for dx in range(0, min(kx, 2) + 1):
            for dy in range(0, min(ky, 2) + 1):
                if dx + dy == 0 or dx + dy > 2:
                    continue
                txd, kxd, tyd, kyd, cd = base
                for _ in range(dx):
                    txd, kxd, cd = _diff_coefs(txd, kxd, cd, 0)
                for _ in range(dy):
                    tyd, kyd, cd = _diff_coefs(tyd, kyd, cd, 1)
                self.parts[(dx, dy)] = (txd, kxd, tyd, kyd, cd)

    def __call__(self, x, y, dx=0, dy=0):
        if (dx, dy) not in self.parts:
            return np.zeros_like(x)
        tx, kx, ty, ky, c = self.parts[(dx, dy)]
        if kx < 0 or ky < 0:
            return np.zeros_like(x)
        ix, bx = _bspline_basis(tx, kx, x)
        iy, by = _bspline_basis(ty, ky, y)
        ny = c.shape[1]
        flat = c.ravel()
        base = (ix - kx) * ny + (iy - ky)
        out = np.zeros(x.size)
        for a in range(kx + 1):
            acc = np.zeros(x.size)
            for b in range(ky + 1):
                acc += by[:, b] * flat[base + (a * ny + b)]
            out += bx[:, a] * acc
        return out


@dataclass
class GridField:
    """Nodal values on a tensor grid in (x1, x2) with spline interpolation."""

    axes: tuple
    values: np.ndarray
    order: int = 3
    _spline: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(a.size for a in self.axes):
            raise ValueError("nodal values do not match the axes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("nodal values must be finite")
        if self.order not in (1, 3):
            raise ValueError("interpolation order must be 1 or 3")
        k = self.order
        sp = RectBivariateSpline(self.axes[0], self.axes[1], self.values, kx=k, ky=k, s=0)
        self._spline = _TensorSpline(sp, k, k)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        tol = 1e-12 * np.maximum(1.0, np.abs(hi))
        bad = np.any((x < lo - tol) | (x > hi + tol), axis=-1)
        if np.any(bad):
            p = x.reshape(-1, 2)[np.argmax(np.ravel(bad))]
            near = np.clip(p, lo, hi)
            raise OutOfHull(f"point {p.tolist()} outside grid hull; nearest grid point {near.tolist()}")
        return np.clip(x, lo, hi)

    def ev(self, x, d1: int = 0, d2: int = 0) -> np.ndarray:
        x = self._check(x)
        out = self._spline(x[..., 0].ravel(), x[..., 1].ravel(), d1, d2)
        return out.reshape(x.shape[:-1])

    def as_scalar_field(self) -> ScalarField:
        def grad(x):
            return np.stack([self.ev(x, 1, 0), self.ev(x, 0, 1)], axis=-1)

        def hess(x):
            a, b, c = self.ev(x, 2, 0), self.ev(x, 1, 1), self.ev(x, 0, 2)
            return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)

        def partial(x, i):
            return self.ev(x, 1 - i, i)

        box = np.array([[a[0], a[-1]] for a in self.axes])
        return ScalarField(self.ev, 2, grad, hess, box, "grid", partial)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x1\\x2"] + [repr(float(v)) for v in self.axes[1]])
        for a, row in zip(self.axes[0], self.values):
            w.writerow([repr(float(a))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, order: int = 3) -> "GridField":
        rows = list(csv.reader(io.StringIO(text)))
        x2 = [float(v) for v in rows[0][1:]]
        x1 = [float(r[0]) for r in rows[1:]]
        vals = [[float(v) for v in r[1:]] for r in rows[1:]]
        return GridField((x1, x2), vals, order)


def field_eval(field_: GridField, x) -> dict:
    x = np.asarray(x, dtype=float)
    return {"value": field_.ev(x), "gradient": np.stack([field_.ev(x, 1, 0), field_.ev(x, 0, 1)], axis=-1)}


# ---------------------------------------------------------------- boundary problems


@dataclass(frozen=True)
class Timer:
    """2w dF/dx2 + d2F/dx1^2 = 0 on x2 < q with F(x1, q) = f(x1)."""

    f: Payoff
    w: Weight
    q: float
    s0: float = 1.0
    n_space: int = 1600
    n_clock: int = 1600
    kind = "timer"

    def __post_init__(self):
        if not self.q > 0:
            raise ValueError("clock budget q must be positive")


@dataclass(frozen=True)
class BarrierTimer:
    """Timer claim knocked out (F = 0) when x1 leaves (l, u)."""

    f: Payoff
    w: Weight
    q: float
    l: float
    u: float
    s0: float = 1.0
    n_space: int = 400
    n_clock: int = 400
    kind = "barrier_timer"

    def __post_init__(self):
        if not self.q > 0:
            raise ValueError("clock budget q must be positive")
        _check_corridor(self.l, self.u, self.s0)
        for b in (self.l, self.u):
            if abs(float(self.f(b))) > 1e-12:
                raise ValueError("barrier timer payoff must vanish at both barriers")


@dataclass(frozen=True)
class Corridor:
    """2w dF/dx2 + d2F/dx1^2 = 0 in l < x1 < u with F = f(x2) on both barriers."""

    f: Payoff
    w: Weight
    l: float
    u: float
    s0: float = 1.0
    q_max: float = 0.5
    n_space: int = 400
    n_clock: int = 200
    tol: float = 1e-13
    kind = "corridor"

    def __post_init__(self):
        _check_corridor(self.l, self.u, self.s0)
        if not self.q_max > 0:
            raise ValueError("q_max must be positive")


def _check_corridor(l, u, s0):
    if not l < u:
        raise ValueError("corridor needs l < u")
    if not l < s0 < u:
        raise ValueError("corridor needs l < s0 < u")


def problem_to_dict(p) -> dict:
    d = {"kind": p.kind}
    for name in p.__dataclass_fields__:
        v = getattr(p, name)
        d[name] = v.to_dict() if hasattr(v, "to_dict") else v
    return d


def problem_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    cls = {"timer": Timer, "barrier_timer": BarrierTimer, "corridor": Corridor}.get(kind)
    if cls is None:
        raise ValueError(f"unknown boundary problem kind {kind!r}")
    d["f"] = Payoff.from_dict(d["f"])
    d["w"] = Weight.from_dict(d["w"])
    return cls(**d)


def _space_nodes(lo: float, hi: float, n: int, log: bool, anchor: float) -> np.ndarray:
    """Uniform nodes in x or log x on [lo, hi] with ``anchor`` on a node."""
    if log:
        a, b, c = np.log(lo), np.log(hi), np.log(anchor)
    else:
        a, b, c = lo, hi, anchor
    h = (b - a) / n
    j = round((c - a) / h)
    if 0 < j < n:
        # shift the spacing on each side so that ``anchor`` is node j
        z = np.concatenate([np.linspace(a, c, j + 1), np.linspace(c, b, n - j + 1)[1:]])
    else:
        z = np.linspace(a, b, n + 1)
    x = np.exp(z) if log else z
    x[0], x[-1] = lo, hi
    return x


def _second_diff(x: np.ndarray):
    """Three-point nonuniform second-derivative weights at interior nodes."""
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    lo = 2.0 / (hm * (hm + hp))
    di = -2.0 / (hm * hp)
    up = 2.0 / (hp * (hm + hp))
    return lo, di, up


def _cn_march(x: np.ndarray, coef: np.ndarray, u0: np.ndarray, dts: Sequence[float], boundary: str,
              bvals=(0.0, 0.0), record: bool = True, stop: Optional[Callable] = None):
    """Crank-Nicolson for u_t = coef(x) u_xx with two implicit Euler half-steps at the start.

    boundary "linear": u_0 and u_M extrapolated linearly from their neighbours.
    boundary "dirichlet": u_0, u_M fixed to ``bvals``.
    """
    m = x.size
    lo, di, up = _second_diff(x)
    c = coef[1:-1]
    A_lo, A_di, A_up = c * lo, c * di, c * up  # rows for interior nodes 1..m-2
    if boundary == "linear":
        r0 = (x[0] - x[1]) / (x[2] - x[1])
        rM = (x[-1] - x[-2]) / (x[-3] - x[-2])
    out = [u0.copy()] if record else None
    u = u0.copy()
    steps = []
    for k, dt in enumerate(dts):
        if k == 0:
            steps += [(0.5 * dt, 1.0), (0.5 * dt, 1.0)]
        else:
            steps.append((dt, 0.5))
    n_in = m - 2
    for idx, (dt, th) in enumerate(steps):
        # explicit part
        Lu = A_lo * u[:-2] + A_di * u[1:-1] + A_up * u[2:]
        rhs = u[1:-1] + (1 - th) * dt * Lu
        ab = np.zeros((3, n_in))
        ab[0, 1:] = -th * dt * A_up[:-1]
        ab[1, :] = 1 - th * dt * A_di
        ab[2, :-1] = -th * dt * A_lo[1:]
        if boundary == "linear":
            # u0 = (1 - r0) u1 + r0 u2 folded into the first row, likewise at the top
            ab[1, 0] += -th * dt * A_lo[0] * (1 - r0)
            ab[0, 1] += -th * dt * A_lo[0] * r0
            ab[1, -1] += -th * dt * A_up[-1] * (1 - rM)
            ab[2, -2] += -th * dt * A_up[-1] * rM
        else:
            rhs[0] += th * dt * A_lo[0] * bvals[0]
            rhs[-1] += th * dt * A_up[-1] * bvals[1]
        inner = solve_banded((1, 1), ab, rhs)
        u = np.empty(m)
        u[1:-1] = inner
        if boundary == "linear":
            u[0] = (1 - r0) * inner[0] + r0 * inner[1]
            u[-1] = (1 - rM) * inner[-1] + rM * inner[-2]
        else:
            u[0], u[-1] = bvals
        # the two half steps together make the first recorded step
        if record and idx >= 1:
            out.append(u.copy())
        if stop is not None and idx >= 1 and stop(u):
            break
    return np.array(out) if record else u


def _use_log(w: Weight) -> bool:
    return w.kind == "inv_square"


def solve_parabolic(problem) -> GridField:
    """Crank-Nicolson solution of a timer, barrier-timer or corridor problem.

    Timer problems march in the remaining clock q - x2 from the payoff at
    x2 = q down to x2 = 0. Corridor problems are solved through the survival
    probability p(x1, t) of the exit time measured on the clock, which
    satisfies a forward equation with zero Dirichlet data:
    F(x1, x2) = f(x2) + int_0^inf f'(x2 + t) p(x1, t) dt.
    """
    if isinstance(problem, (Timer, BarrierTimer)):
        return _solve_timer(problem)
    if isinstance(problem, Corridor):
        return _solve_corridor(problem)
    raise TypeError(f"unsupported problem {type(problem).__name__}")


def _solve_timer(p) -> GridField:
    log = _use_log(p.w)
    anchor = p.f.strike if p.f.kind in ("call", "put") else p.s0
    if isinstance(p, Timer):
        lo, hi, bc = p.s0 / 8.0, 8.0 * p.s0, "linear"
    else:
        lo, hi, bc = p.l, p.u, "dirichlet"
    if not lo < anchor < hi:
        anchor = p.s0
    x = _space_nodes(lo, hi, p.n_space, log, anchor)
    coef = 1.0 / (2.0 * p.w.of(x))
    if not np.all(np.isfinite(coef) & (coef > 0)):
        raise ValueError("weight must be finite and positive on the space interval")
    u0 = p.f(x).astype(float)
    if bc == "dirichlet":
        u0[0] = u0[-1] = 0.0
    dts = np.full(p.n_clock, p.q / p.n_clock)
    sol = _cn_march(x, coef, u0, dts, bc)  # rows: remaining clock 0, dt, ..., q
    x2 = np.linspace(0.0, p.q, p.n_clock + 1)
    return GridField((x, x2), sol[::-1].T, 3)


def _solve_corridor(p: Corridor) -> GridField:
    log = _use_log(p.w)
    x = _space_nodes(p.l, p.u, p.n_space, log, p.s0)
    coef = 1.0 / (2.0 * p.w.of(x))
    if not np.all(np.isfinite(coef) & (coef > 0)):
        raise ValueError("weight must be finite and positive on the corridor")
    # time scale of the slowest decaying mode sets the survival-time step
    span = np.log(p.u / p.l) if log else p.u - p.l
    scale = span**2 / (np.pi**2 * (0.5 if log else coef.min()))
    dt = scale / p.n_clock
    u0 = np.ones_like(x)
    u0[0] = u0[-1] = 0.0
    dts = np.full(200 * p.n_clock, dt)
    surv = _cn_march(x, coef, u0, dts, "dirichlet", stop=lambda u: np.abs(u).max() < p.tol)
    t = dt * np.arange(surv.shape[0])
    wts = np.full(t.size, dt)
    wts[0] = wts[-1] = 0.5 * dt
    x2 = np.linspace(0.0, p.q_max, p.n_clock + 1)
    fprime = p.f.d1(x2[:, None] + t[None, :])  # (n2, nt)
    vals = p.f(x2)[None, :] + (surv.T * wts) @ fprime.T
    return GridField((x, x2), vals, 3)


# ---------------------------------------------------------------- lookback


_GL_X, _GL_W = np.polynomial.legendre.leggauss(200)


def _gl(a, b, nodes=_GL_X, weights=_GL_W):
    """Nodes/weights of Gauss-Legendre on [a, b] (broadcast over leading axes)."""
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    return 0.5 * (b - a) * nodes + 0.5 * (b + a), 0.5 * (b - a) * weights


def lookback_field(f: Callable, q: float, n_nodes: int = 200, width: float = 10.0) -> ScalarField:
    """F(x1, x2, x3) = E f(x1 + W_t, max(x2, x1 + M_t)) with t = q - x3.

    W is standard Brownian motion and M its running maximum. The
    expectation is a deterministic Gauss-Legendre quadrature against the
    reflection-principle densities, split on whether the maximum is renewed.
    """
    if q <= 0:
        raise ValueError("clock level q must be positive")
    gx, gw = np.polynomial.legendre.leggauss(n_nodes)

    def fn(x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        x = x.reshape(-1, 3)
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        if np.any(x3 > q * (1 + 1e-12)):
            raise DomainError("clock coordinate exceeds the budget q")
        if np.any(x1 > x2 + 1e-12 * np.maximum(1, np.abs(x2))):
            raise DomainError("lookback field needs x1 <= x2")
        tau = np.maximum(q - x3, 0.0)
        c = np.maximum(x2 - x1, 0.0)
        out = np.empty(x.shape[0])
        live = tau > 0
        if np.any(~live):
            out[~live] = f(x1[~live], x2[~live])
        rows = np.nonzero(live)[0]
        for j in range(0, rows.size, 32):
            r = rows[j:j + 32]
            out[r] = _lookback_expect(f, x1[r], x2[r], c[r], tau[r], gx, gw, width)
        return out.reshape(shape)

    box = None
    return ScalarField(fn, 3, None, None, box, "lookback")


def _lookback_expect(f, x1, x2, c, tau, gx, gw, width):
    sd = np.sqrt(tau)
    L = width * sd
    # maximum not renewed: z = c - w in (0, c + L)
    z, wz = _gl(0.0, c + L, gx, gw)
    phi = lambda y: np.exp(-0.5 * y * y / tau[:, None]) / np.sqrt(2 * np.pi * tau[:, None])
    dens = phi(c[:, None] - z) - phi(c[:, None] + z)
    part1 = np.sum(wz * f(x2[:, None] - z, x2[:, None] + 0.0 * z) * dens, axis=1)
    # maximum renewed by r, final drawdown y
    r, wr = _gl(0.0, L, gx, gw)
    y, wy = r, wr
    R = r[:, :, None]
    Y = y[:, None, :]
    s = c[:, None, None] + R + Y
    t3 = tau[:, None, None]
    g = 2 * s / np.sqrt(2 * np.pi * t3**3) * np.exp(-0.5 * s * s / t3)
    X2 = x2[:, None, None]
    vals = f(X2 + R - Y, X2 + R)
    part2 = np.einsum("pi,pj,pij->p", wr, wy, vals * g)
    return part1 + part2
