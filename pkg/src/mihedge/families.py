"""Closed-form hedging functions, coefficient adjudication and drawdown utilities.

Families (state order in brackets):

  TVS   [t, v = int S dt, s]        c1 (t s - v) + c2 s + c3
  MFIV  [s, v = C - g(s), q = int w_s d<S>]
        c1 (v + g) + c2 (kappa h(s) q - g) + F_h,   h = g''/w_s affine
  MFVV  [s, v, q_v = int w_v d<V>]  c1 (g + v) + c2 s + c3
  MFIL  [s, v, l = int w_l d<S, V>]
        c1 (s v + kappa G(s) - l / w_l(s)) + c2 (v + g) + c3 s + c4,  G'' = x g''

The coefficient ``kappa`` of MFIV and MFIL is left open and settled by
:func:`adjudicate`, which evaluates the operator residual of each candidate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .functionals import (Asset, CrossVar, FunctionalSpec, Time, TimeIntegral, TimeValue, Weight,
                          WeightedQV, DrawdownSq, RunningMax)
from .paths import Path
from .payoffs import Payoff
from .pde import DomainError, ScalarField, halton_samples, residual

STATED_KAPPA = {"MFIV": 1.0, "MFIL": 0.5}
ALTERNATIVE_KAPPA = {"MFIV": 0.5, "MFIL": 1.0}
PASS_TOL = 1e-8
FLAG_TOL = 1e-3


class ConstraintError(ValueError):
    pass


class AdjudicationFailure(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


# ---------------------------------------------------------------- G'' = x g''


@dataclass(frozen=True)
class DoublePrimitive:
    """G with G'' = x g''(x) and G(s_ref) = G'(s_ref) = 0."""

    g: Payoff
    s_ref: float
    _v: Callable = field(repr=False, compare=False)
    _d1: Callable = field(repr=False, compare=False)

    def value(self, x):
        return self._v(np.asarray(x, dtype=float))

    __call__ = value

    def d1(self, x):
        return self._d1(np.asarray(x, dtype=float))

    def d2(self, x):
        x = np.asarray(x, dtype=float)
        return x * self.g.d2(x)


def g_double_primitive(g: Payoff, s_ref: float = 1.0) -> DoublePrimitive:
    """Analytic for log, power and call/put payoffs, adaptive quadrature otherwise."""
    r = float(s_ref)
    k = g.kind
    if k == "neglog":
        if r <= 0:
            raise DomainError("x g''(x) = scale/x is not integrable at 0; choose s_ref > 0")
        c = g.scale
        return DoublePrimitive(g, r, lambda x: c * (x * np.log(x / r) - x + r), lambda x: c * np.log(x / r))
    if k == "power":
        p = g.p
        a = p * (p - 1.0)
        if a == 0.0:
            return DoublePrimitive(g, r, lambda x: 0.0 * x, lambda x: 0.0 * x)
        if p == -1.0:
            if r <= 0:
                raise DomainError("x g''(x) is not integrable at 0 for p = -1")
            return DoublePrimitive(g, r, lambda x: a * (x / r - 1.0 - np.log(x / r)),
                                   lambda x: a * (1.0 / r - 1.0 / x))
        if r == 0 and p < 0:
            raise DomainError("x g''(x) is not integrable at 0")
        # G' = a (x^p - r^p)/p, G = a (x^{p+1}/(p+1) - r^p x)/p + const
        def v(x):
            return a / p * (x ** (p + 1) / (p + 1) - r**p * x - (r ** (p + 1) / (p + 1) - r ** (p + 1)))

        return DoublePrimitive(g, r, v, lambda x: a / p * (x**p - r**p))
    if k in ("call", "put"):
        K = g.strike
        # x g'' = K delta_K; G is K times the hockey stick away from s_ref
        if r <= K:
            return DoublePrimitive(g, r, lambda x: K * np.maximum(x - K, 0.0), lambda x: K * (x > K))
        return DoublePrimitive(g, r, lambda x: K * np.maximum(K - x, 0.0), lambda x: -K * (x < K))
    if k == "linear":
        return DoublePrimitive(g, r, lambda x: 0.0 * x, lambda x: 0.0 * x)

    def integrand(z):
        return z * float(g.d2(np.array(z)))

    def g1(x):
        out = []
        for xi in np.ravel(x):
            val, err = integrate.quad(integrand, r, xi, limit=200)
            if not np.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
                raise DomainError(f"x g''(x) not integrable between {r} and {xi}")
            out.append(val)
        return np.reshape(out, np.shape(x))

    def gv(x):
        out = []
        for xi in np.ravel(x):
            val, err = integrate.quad(lambda z: (xi - z) * integrand(z), r, xi, limit=200)
            if not np.isfinite(val):
                raise DomainError(f"G is not finite at {xi}")
            out.append(val)
        return np.reshape(out, np.shape(x))

    return DoublePrimitive(g, r, gv, g1)


# ---------------------------------------------------------------- closed forms


def _affine_fit(fn: Callable, box, name: str):
    """Return (a, b) with fn(s) = a + b s on the box, or raise."""
    s = np.linspace(box[0], box[1], 33)
    y = fn(s)
    b, a = np.polyfit(s, y, 1)
    if np.max(np.abs(a + b * s - y)) > 1e-9 * max(1.0, np.max(np.abs(y))):
        raise ConstraintError(f"{name} is not affine in s on [{float(box[0]):g}, {float(box[1]):g}]")
    return float(a), float(b)


@dataclass
class ClosedForm:
    tag: str
    c: tuple
    spec: FunctionalSpec
    field: ScalarField
    kappa: Optional[float] = None
    g: Optional[Payoff] = None
    weight: Optional[Weight] = None

    def value(self, x):
        return self.field.value(x)

    def gradient(self, x):
        return self.field.gradient(x)

    def hessian(self, x):
        return self.field.hessian(x)

    def to_dict(self) -> dict:
        d = {"tag": self.tag, "c": list(self.c), "kappa": self.kappa,
             "functional": self.spec.to_dict()}
        if self.g is not None:
            d["g"] = self.g.to_dict() if self.g.serializable else "custom"
        return d


def _pad(c, n):
    c = tuple(float(v) for v in c)
    if len(c) > n:
        raise ValueError(f"at most {n} constants expected")
    return c + (0.0,) * (n - len(c))


def _stack_grad(*cols):
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _hess3(h):
    """Build (..., 3, 3) from a dict {(i, j): array} with i <= j."""
    ref = next(iter(h.values()))
    shape = np.shape(ref)
    out = np.zeros(shape + (3, 3))
    for (i, j), v in h.items():
        out[..., i, j] = v
        out[..., j, i] = v
    return out


def family(tag: str, c=(1.0,), g: Optional[Payoff] = None, weight: Optional[Weight] = None,
           kappa: Optional[float] = None, F_h: Optional[ScalarField] = None, s_ref: float = 1.0,
           box=(0.5, 2.0)) -> ClosedForm:
    """Closed-form member of a family with analytic derivatives.

    ``weight`` is w_s (MFIV), w_v (MFVV) or w_l (MFIL) as a function of s;
    it defaults to 1/s^2 for MFIV and to 1 otherwise.
    ``box`` is the s-range on which affinity conditions are checked.
    """
    tag = tag.upper()
    if tag == "TVS":
        c1, c2, c3 = _pad(c, 3)
        spec = FunctionalSpec(("S",), (Time(), TimeIntegral("S"), Asset("S")))

        def fn(x):
            t, v, s = x[..., 0], x[..., 1], x[..., 2]
            return c1 * (t * s - v) + c2 * s + c3

        def grad(x):
            t, s = x[..., 0], x[..., 2]
            return _stack_grad(c1 * s, -c1 + 0 * s, c1 * t + c2)

        def hess(x):
            z = 0.0 * x[..., 0]
            return _hess3({(0, 2): c1 + z, (0, 0): z})

        return ClosedForm(tag, (c1, c2, c3), spec, ScalarField(fn, 3, grad, hess, None, "TVS"))

    if g is None:
        raise ValueError(f"{tag} needs the payoff g")
    if weight is None:
        # the log-variance clock makes g''/w constant for g = -2 log
        weight = Weight("inv_square") if tag == "MFIV" else Weight("const")
    w = Weight(weight.kind, 0, weight.c, weight.p, weight.fn)

    if tag == "MFIV":
        c1, c2 = _pad(c, 2)
        kap = STATED_KAPPA["MFIV"] if kappa is None else float(kappa)
        if kap not in (0.5, 1.0):
            raise ValueError("MFIV kappa must be 1 or 1/2")
        a, b = _affine_fit(lambda s: g.d2(s) / w.of(s), box, "g''/w_s")
        spec = FunctionalSpec(("S", "C"), (Asset("S"), TimeValue("S", "C", g), WeightedQV("S", w)))

        def fn(x):
            s, v, q = x[..., 0], x[..., 1], x[..., 2]
            out = c1 * (v + g(s)) + c2 * (kap * (a + b * s) * q - g(s))
            return out + (F_h.value(x) if F_h is not None else 0.0)

        def grad(x):
            s, q = x[..., 0], x[..., 2]
            gs = _stack_grad(c1 * g.d1(s) + c2 * (kap * b * q - g.d1(s)), c1 + 0 * s, c2 * kap * (a + b * s))
            return gs + (F_h.gradient(x) if F_h is not None else 0.0)

        def hess(x):
            s = x[..., 0]
            H = _hess3({(0, 0): (c1 - c2) * g.d2(s), (0, 2): c2 * kap * b + 0 * s})
            return H + (F_h.hessian(x) if F_h is not None else 0.0)

        return ClosedForm(tag, (c1, c2), spec, ScalarField(fn, 3, grad, hess, None, "MFIV"), kap, g, w)

    if tag == "MFVV":
        c1, c2, c3 = _pad(c, 3)
        spec = FunctionalSpec(("S", "C"), (Asset("S"), TimeValue("S", "C", g),
                                           WeightedQV(1, Weight(w.kind, 0, w.c, w.p, w.fn))))

        def fn(x):
            s, v = x[..., 0], x[..., 1]
            return c1 * (g(s) + v) + c2 * s + c3

        def grad(x):
            s = x[..., 0]
            return _stack_grad(c1 * g.d1(s) + c2, c1 + 0 * s, 0 * s)

        def hess(x):
            return _hess3({(0, 0): c1 * g.d2(x[..., 0])})

        return ClosedForm(tag, (c1, c2, c3), spec, ScalarField(fn, 3, grad, hess, None, "MFVV"), None, g, w)

    if tag == "MFIL":
        c1, c2, c3, c4 = _pad(c, 4)
        kap = STATED_KAPPA["MFIL"] if kappa is None else float(kappa)
        if kap not in (0.5, 1.0):
            raise ValueError("MFIL kappa must be 1 or 1/2")
        if c1 != 0.0:
            pa, pb = _affine_fit(lambda s: 1.0 / w.of(s), box, "1/w_l")
        else:
            pa, pb = 0.0, 0.0
        G = g_double_primitive(g, s_ref)
        spec = FunctionalSpec(("S", "C"), (Asset("S"), TimeValue("S", "C", g), CrossVar("S", 1, w)))

        def fn(x):
            s, v, l = x[..., 0], x[..., 1], x[..., 2]
            return c1 * (s * v + kap * G(s) - l * (pa + pb * s)) + c2 * (v + g(s)) + c3 * s + c4

        def grad(x):
            s, v, l = x[..., 0], x[..., 1], x[..., 2]
            return _stack_grad(c1 * (v + kap * G.d1(s) - l * pb) + c2 * g.d1(s) + c3,
                               c1 * s + c2, -c1 * (pa + pb * s))

        def hess(x):
            s = x[..., 0]
            return _hess3({(0, 0): c1 * kap * G.d2(s) + c2 * g.d2(s), (0, 1): c1 + 0 * s,
                           (0, 2): -c1 * pb + 0 * s})

        return ClosedForm(tag, (c1, c2, c3, c4), spec, ScalarField(fn, 3, grad, hess, None, "MFIL"), kap, g, w)

    raise ValueError(f"unknown family {tag!r}")


# ---------------------------------------------------------------- adjudication


@dataclass
class AdjudicationReport:
    tag: str
    residuals: dict  # variant label -> max residual
    kappas: dict  # variant label -> coefficient
    selected: Optional[str]
    discrepancy: bool
    worst_points: dict

    def to_dict(self) -> dict:
        return {"tag": self.tag, "residuals": self.residuals, "kappas": self.kappas,
                "selected": self.selected,
                "selected_kappa": None if self.selected is None else self.kappas[self.selected],
                "discrepancy": self.discrepancy,
                "worst_points": {k: v.tolist() for k, v in self.worst_points.items()}}


def default_box(tag: str, s_box=(0.5, 2.0)) -> np.ndarray:
    tag = tag.upper()
    if tag == "TVS":
        return np.array([[0.0, 1.0], [0.0, 1.0], [0.5, 1.5]])
    third = {"MFIV": (0.0, 1.0), "MFVV": (0.0, 1.0), "MFIL": (-1.0, 1.0)}[tag]
    return np.array([list(s_box), [0.01, 1.0], list(third)])


def adjudicate(tag: str, g: Optional[Payoff] = None, weight: Optional[Weight] = None, box=None,
               n_samples: int = 256, c=None) -> AdjudicationReport:
    """Residual of each coefficient variant on Halton points of the box.

    The stated variant is the coefficient as printed in the closed form's
    statement; the alternative is the one its derivation produces. A variant
    passes below 1e-8; a stated variant above 1e-3 is flagged.
    """
    tag = tag.upper()
    box = default_box(tag) if box is None else np.asarray(box, dtype=float)
    samples = halton_samples(box, n_samples)
    if tag in STATED_KAPPA:
        kappas = {"stated": STATED_KAPPA[tag], "alternative": ALTERNATIVE_KAPPA[tag]}
        c = c if c is not None else ((1.0, 1.0) if tag == "MFIV" else (1.0,))
    else:
        kappas = {"stated": None}
        c = c if c is not None else (1.0,)
    residuals, worst = {}, {}
    for label, kap in kappas.items():
        try:
            cf = family(tag, c, g, weight, kappa=kap, box=tuple(box[0]) if tag != "TVS" else (0.5, 2.0))
        except ConstraintError as e:
            raise AdjudicationFailure(str(e), None) from e
        rep = residual(cf.field, cf.spec, samples)
        residuals[label] = rep.max_abs
        worst[label] = rep.worst_point
    best = min(residuals, key=residuals.get)
    selected = best if residuals[best] < PASS_TOL else None
    report = AdjudicationReport(tag, residuals, kappas, selected, residuals["stated"] >= FLAG_TOL, worst)
    if selected is None:
        raise AdjudicationFailure(f"no {tag} variant passes: {residuals}", report)
    return report


# ---------------------------------------------------------------- Azema-Yor


def azema_yor_residual(path: Path, variant: str = "max", g: Optional[Callable] = None,
                       G: Optional[Callable] = None) -> Path:
    """Discrete residual of the drawdown (or drawup) identity along a path.

    Without ``g``: D_t - <S>_t + 2 sum sqrt(D) dS for D = (M - S)^2, and
    D_t - <S>_t - 2 sum sqrt(D) dS for D = (S - m)^2. With a slope function
    ``g`` (and its antiderivative ``G``, integrated numerically if absent):
    g(M)(M - S) - G(M) + G(S_0) + sum g(M) dS, or the drawup analogue.
    """
    if variant not in ("max", "min"):
        raise ValueError("variant must be 'max' or 'min'")
    s = np.asarray(path.values, dtype=float)
    ds = np.diff(s, axis=-1)
    ext = np.maximum.accumulate(s, axis=-1) if variant == "max" else np.minimum.accumulate(s, axis=-1)
    zero = np.zeros(s.shape[:-1] + (1,))
    if g is None:
        dd = (ext - s) ** 2
        qv = np.concatenate([zero, np.cumsum(ds * ds, axis=-1)], axis=-1)
        sign = 1.0 if variant == "max" else -1.0
        integral = np.concatenate([zero, np.cumsum(np.sqrt(dd[..., :-1]) * ds, axis=-1)], axis=-1)
        return Path(path.grid, dd - qv + sign * 2.0 * integral)
    if G is None:
        s0 = float(np.ravel(s)[0])

        def G(y):
            y = np.asarray(y, dtype=float)
            uniq, inv = np.unique(y, return_inverse=True)
            vals = np.array([integrate.quad(g, s0, u, limit=200)[0] for u in uniq])
            return vals[inv].reshape(y.shape) + 0.0
    gm = np.asarray(g(ext), dtype=float)
    integral = np.concatenate([zero, np.cumsum(gm[..., :-1] * ds, axis=-1)], axis=-1)
    s0 = s[..., :1]
    if variant == "max":
        res = gm * (ext - s) - (G(ext) - G(s0)) + integral
    else:
        res = gm * (s - ext) - integral + (G(ext) - G(s0))
    return Path(path.grid, res)


# ---------------------------------------------------------------- coordinates


def drawdown_spec(weight: Optional[Weight] = None) -> FunctionalSpec:
    """(S, (M - S)^2, int w d<S>)."""
    w = weight if weight is not None else Weight("const")
    return FunctionalSpec(("S",), (Asset("S"), DrawdownSq("max", "S"), WeightedQV("S", w)))


def running_max_spec(weight: Optional[Weight] = None) -> FunctionalSpec:
    """(S, M, int w d<S>); M carries no coefficient triple."""
    w = weight if weight is not None else Weight("const")
    return FunctionalSpec(("S",), (Asset("S"), RunningMax("S"), WeightedQV("S", w)))


def change_coordinates(F: ScalarField, direction: str, eps: float = 1e-12) -> ScalarField:
    """Compose with y(x) = (s, (m - s)^2, q) or its inverse (s, s + sqrt(d), q).

    ``max_to_drawdown`` turns a field over (s, m, q) into one over (s, d, q);
    ``drawdown_to_max`` goes the other way. At d = 0 the d-derivative of the
    drawdown-side field is the right limit 1/2 d2F/dm2 of the max-side field.
    """
    if direction == "max_to_drawdown":
        def to_src(x):
            x = np.asarray(x, dtype=float)
            if np.any(x[..., 1] < 0):
                raise DomainError("squared drawdown coordinate must be nonnegative")
            y = x.copy()
            y[..., 1] = x[..., 0] + np.sqrt(x[..., 1])
            return y

        def fn(x):
            return F.value(to_src(x))

        def grad(x):
            x = np.asarray(x, dtype=float)
            y = to_src(x)
            gm = F.gradient(y)
            r = np.sqrt(x[..., 1])
            small = r < eps
            rr = np.where(small, 1.0, r)
            dd = np.where(small, 0.5 * F.hessian(y)[..., 1, 1], gm[..., 1] / (2 * rr))
            return _stack_grad(gm[..., 0] + gm[..., 1], dd, gm[..., 2])

        def hess(x):
            x = np.asarray(x, dtype=float)
            y = to_src(x)
            gm, H = F.gradient(y), F.hessian(y)
            r = np.maximum(np.sqrt(x[..., 1]), eps)
            out = np.empty(H.shape)
            out[..., 0, 0] = H[..., 0, 0] + 2 * H[..., 0, 1] + H[..., 1, 1]
            out[..., 0, 1] = out[..., 1, 0] = (H[..., 0, 1] + H[..., 1, 1]) / (2 * r)
            out[..., 1, 1] = H[..., 1, 1] / (4 * r * r) - gm[..., 1] / (4 * r**3)
            out[..., 0, 2] = out[..., 2, 0] = H[..., 0, 2] + H[..., 1, 2]
            out[..., 1, 2] = out[..., 2, 1] = H[..., 1, 2] / (2 * r)
            out[..., 2, 2] = H[..., 2, 2]
            return out

        return ScalarField(fn, 3, grad, hess, None, f"D[{F.name}]")

    if direction == "drawdown_to_max":
        def to_src(x):
            x = np.asarray(x, dtype=float)
            if np.any(x[..., 1] < x[..., 0] - 1e-15 * np.maximum(1, np.abs(x[..., 0]))):
                raise DomainError("running maximum must not be below the price")
            y = x.copy()
            y[..., 1] = (x[..., 1] - x[..., 0]) ** 2
            return y

        def fn(x):
            return F.value(to_src(x))

        def grad(x):
            x = np.asarray(x, dtype=float)
            gd = F.gradient(to_src(x))
            u = x[..., 1] - x[..., 0]
            return _stack_grad(gd[..., 0] - 2 * u * gd[..., 1], 2 * u * gd[..., 1], gd[..., 2])

        def hess(x):
            x = np.asarray(x, dtype=float)
            y = to_src(x)
            gd, H = F.gradient(y), F.hessian(y)
            u = x[..., 1] - x[..., 0]
            out = np.empty(H.shape)
            out[..., 0, 0] = H[..., 0, 0] - 4 * u * H[..., 0, 1] + 4 * u * u * H[..., 1, 1] + 2 * gd[..., 1]
            out[..., 0, 1] = out[..., 1, 0] = 2 * u * H[..., 0, 1] - 4 * u * u * H[..., 1, 1] - 2 * gd[..., 1]
            out[..., 1, 1] = 4 * u * u * H[..., 1, 1] + 2 * gd[..., 1]
            out[..., 0, 2] = out[..., 2, 0] = H[..., 0, 2] - 2 * u * H[..., 1, 2]
            out[..., 1, 2] = out[..., 2, 1] = 2 * u * H[..., 1, 2]
            out[..., 2, 2] = H[..., 2, 2]
            return out

        return ScalarField(fn, 3, grad, hess, None, f"M[{F.name}]")

    raise ValueError("direction must be 'max_to_drawdown' or 'drawdown_to_max'")


def mixed_boundary_residual(F: ScalarField, points) -> float:
    """max |dF/dm| at points on the diagonal {s = m} of a field over (s, m, q)."""
    x = np.asarray(points, dtype=float).copy()
    x[..., 1] = x[..., 0]
    return float(np.abs(F.gradient(x)[..., 1]).max())


def bick_square(q: float) -> ScalarField:
    """x1^2 exp(q - x2): the timer value of the squared payoff on the 1/x^2 clock."""
    def fn(x):
        return x[..., 0] ** 2 * np.exp(q - x[..., 1])

    def grad(x):
        e = np.exp(q - x[..., 1])
        return _stack_grad(2 * x[..., 0] * e, -x[..., 0] ** 2 * e)

    def hess(x):
        e = np.exp(q - x[..., 1])
        s = x[..., 0]
        H = np.empty(x.shape + (2,))
        H[..., 0, 0] = 2 * e
        H[..., 0, 1] = H[..., 1, 0] = -2 * s * e
        H[..., 1, 1] = s * s * e
        return H

    return ScalarField(fn, 2, grad, hess, None, "bick_square")
