"""Scalar payoff functions of a single price with analytic derivatives.

A :class:`Payoff` is used both as a terminal payoff of timer claims and as
the convex function ``g`` that defines the time value ``C - g(S)`` of a
traded claim.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

ArrayLike = np.ndarray | float

_KINDS = ("call", "put", "neglog", "power", "linear", "custom")


@dataclass(frozen=True)
class Payoff:
    """Payoff ``g(x)`` with first and second derivative.

    kind:
      call    (x - K)^+
      put     (K - x)^+
      neglog  -scale * log(x)
      power   x**p
      linear  a + b*x
      custom  user callables (not serializable)
    """

    kind: str
    strike: float = 1.0
    scale: float = 2.0
    p: float = 2.0
    a: float = 0.0
    b: float = 1.0
    fn: Optional[Callable] = field(default=None, compare=False, repr=False)
    d1_fn: Optional[Callable] = field(default=None, compare=False, repr=False)
    d2_fn: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom payoff needs fn")

    # constructors
    @staticmethod
    def call(strike: float = 1.0) -> "Payoff":
        return Payoff("call", strike=float(strike))

    @staticmethod
    def put(strike: float = 1.0) -> "Payoff":
        return Payoff("put", strike=float(strike))

    @staticmethod
    def neglog(scale: float = 2.0) -> "Payoff":
        return Payoff("neglog", scale=float(scale))

    @staticmethod
    def power(p: float) -> "Payoff":
        return Payoff("power", p=float(p))

    @staticmethod
    def linear(a: float = 0.0, b: float = 1.0) -> "Payoff":
        return Payoff("linear", a=float(a), b=float(b))

    @staticmethod
    def custom(fn, d1=None, d2=None) -> "Payoff":
        return Payoff("custom", fn=fn, d1_fn=d1, d2_fn=d2)

    def __call__(self, x: ArrayLike) -> ArrayLike:
        return self.value(x)

    def value(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "call":
            return np.maximum(x - self.strike, 0.0)
        if k == "put":
            return np.maximum(self.strike - x, 0.0)
        if k == "neglog":
            with np.errstate(divide="ignore", invalid="ignore"):
                return -self.scale * np.log(x)
        if k == "power":
            return x**self.p
        if k == "linear":
            return self.a + self.b * x
        return np.asarray(self.fn(x), dtype=float)

    def d1(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "call":
            return np.where(x > self.strike, 1.0, 0.0)
        if k == "put":
            return np.where(x < self.strike, -1.0, 0.0)
        if k == "neglog":
            return -self.scale / x
        if k == "power":
            return self.p * x ** (self.p - 1.0)
        if k == "linear":
            return np.full_like(x, self.b)
        if self.d1_fn is not None:
            return np.asarray(self.d1_fn(x), dtype=float)
        h = 1e-5 * np.maximum(1.0, np.abs(x))
        return (self.fn(x + h) - self.fn(x - h)) / (2 * h)

    def d2(self, x: ArrayLike) -> ArrayLike:
        """Second derivative; zero away from the kink for call/put."""
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k in ("call", "put", "linear"):
            return np.zeros_like(x)
        if k == "neglog":
            return self.scale / x**2
        if k == "power":
            return self.p * (self.p - 1.0) * x ** (self.p - 2.0)
        if self.d2_fn is not None:
            return np.asarray(self.d2_fn(x), dtype=float)
        h = 1e-4 * np.maximum(1.0, np.abs(x))
        return (self.fn(x + h) - 2 * self.fn(x) + self.fn(x - h)) / h**2

    @property
    def serializable(self) -> bool:
        return self.kind != "custom"

    def to_dict(self) -> dict:
        k = self.kind
        if k in ("call", "put"):
            return {"kind": k, "strike": self.strike}
        if k == "neglog":
            return {"kind": k, "scale": self.scale}
        if k == "power":
            return {"kind": k, "p": self.p}
        if k == "linear":
            return {"kind": k, "a": self.a, "b": self.b}
        raise TypeError("custom payoffs cannot be serialized")

    @staticmethod
    def from_dict(d: dict) -> "Payoff":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "custom":
            raise ValueError("custom payoffs cannot be read from JSON")
        return Payoff(kind, **{k: float(v) for k, v in d.items()})


def black_price(payoff: Payoff, s: ArrayLike, total_var: ArrayLike) -> np.ndarray:
    """Closed-form lognormal price E g(s exp(sqrt(v) Z - v/2)) where available.

    Returns None for payoffs without a closed form.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(total_var, dtype=float)
    k = payoff.kind
    if k == "neglog":
        return -payoff.scale * np.log(s) + 0.5 * payoff.scale * v
    if k == "power":
        p = payoff.p
        return s**p * np.exp(0.5 * p * (p - 1.0) * v)
    if k == "linear":
        return payoff.a + payoff.b * s + 0.0 * v
    if k in ("call", "put"):
        return payoff.value(s) + black_time_value(payoff, s, v)
    return None


def black_time_value(payoff: Payoff, s: ArrayLike, total_var: ArrayLike) -> np.ndarray:
    """Lognormal price minus intrinsic value, computed without cancellation.

    For calls and puts the out-of-the-money leg is priced directly (put-call
    parity), so the result stays positive where the difference of two nearly
    equal numbers would round to zero.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(total_var, dtype=float)
    k = payoff.kind
    if k in ("call", "put"):
        K = payoff.strike
        sd = np.sqrt(np.maximum(v, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = (np.log(s / K) + 0.5 * v) / sd
            d2 = d1 - sd
            call = s * ndtr(d1) - K * ndtr(d2)
            put = K * ndtr(-d2) - s * ndtr(-d1)
        otm = np.where(s >= K, put, call)
        return np.where(sd > 0, np.maximum(otm, 0.0), 0.0)
    if k == "neglog":
        return 0.5 * payoff.scale * v + 0.0 * s
    if k == "power":
        p = payoff.p
        return s**p * np.expm1(0.5 * p * (p - 1.0) * v)
    if k == "linear":
        return 0.0 * s * v
    return None


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(120)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def lognormal_price(payoff: Payoff, s: ArrayLike, total_var: ArrayLike) -> np.ndarray:
    """E g(s exp(sqrt(v) Z - v/2)); closed form when known, else Gauss-Hermite."""
    closed = black_price(payoff, s, total_var)
    if closed is not None:
        return closed
    s = np.asarray(s, dtype=float)
    v = np.maximum(np.asarray(total_var, dtype=float), 0.0)
    s_b, v_b = np.broadcast_arrays(s, v)
    sd = np.sqrt(v_b)[..., None]
    terminal = s_b[..., None] * np.exp(sd * _GH_NODES - 0.5 * sd**2)
    vals = payoff.value(terminal)
    if not np.all(np.isfinite(vals)):
        raise ValueError("payoff integrand is not finite at the quadrature nodes")
    return np.where(v_b > 0, vals @ _GH_WEIGHTS, payoff.value(s_b))
