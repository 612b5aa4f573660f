"""Named activation functions and their squashability certificates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from ..errors import CertificateError


# Certificate kinds.  Each one names a recipe that produces a width-1 network
# with a sigmoidal window (or, for MonotoneLimit, a direct step approximator).

@dataclass(frozen=True)
class MonotoneLimit:
    side: str = "both"  # "both", "left" or "right": where the finite limit lives


@dataclass(frozen=True)
class Inflection:
    c: float
    delta: float


@dataclass(frozen=True)
class CriticalPoint:
    c: float
    b_search: tuple = (1e-2, 1e3)


@dataclass(frozen=True)
class Kink:
    c: float
    v_minus: float  # one-sided derivative from the left
    v_plus: float   # one-sided derivative from the right

    def check(self):
        if not (self.v_minus * self.v_plus > 0):
            raise CertificateError(
                f"Kink certificate rejected: v_minus*v_plus = {self.v_minus * self.v_plus:g} "
                "violates v_minus*v_plus > 0", stage="certify")
        if self.v_minus == self.v_plus:
            raise CertificateError(
                "Kink certificate rejected: equal one-sided slopes", stage="certify")


@dataclass(frozen=True)
class AnalyticConvex:
    c: float = 0.0
    b_search: tuple = (1.0, 1e3)


@dataclass(frozen=True)
class DirectWindow:
    net: Any
    a: float
    b: float


@dataclass(frozen=True, eq=False)
class ActivationSpec:
    name: str
    fn: Callable = field(repr=False)
    params: dict = field(default_factory=dict)
    monotone: bool = False
    certificate: Any = None
    id_point: float = 0.0

    def __call__(self, x):
        with np.errstate(over="ignore", under="ignore"):
            return self.fn(np.asarray(x, dtype=float))

    @property
    def key(self):
        return (self.name, tuple(sorted((k, _freeze(v)) for k, v in self.params.items())))

    def __eq__(self, other):
        return isinstance(other, ActivationSpec) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def with_certificate(self, certificate):
        return ActivationSpec(self.name, self.fn, dict(self.params), self.monotone,
                              certificate, self.id_point)


def _freeze(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(float(u) for u in v)
    return float(v)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x, alpha=1.0):
    # log(1 + e^{ax})/a, written to stay finite for large ax
    return np.logaddexp(0.0, alpha * x) / alpha


def _elu(x, alpha=1.0):
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def _critical(fprime, lo, hi):
    return float(brentq(fprime, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200))


def _gelu_prime(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


def _swish_prime(x):
    s = _sigmoid(x)
    return s + x * s * (1 - s)


def _mish_prime(x):
    sp = _softplus(x)
    t = np.tanh(sp)
    return t + x * (1 - t * t) * _sigmoid(x)


def sigmoid():
    return ActivationSpec("sigmoid", _sigmoid, {}, True, Inflection(0.0, 8.0))


def tanh():
    return ActivationSpec("tanh", np.tanh, {}, True, Inflection(0.0, 4.0))


def exp():
    return ActivationSpec("exp", np.exp, {}, True, AnalyticConvex(0.0))


def sin():
    return ActivationSpec("sin", np.sin, {}, False, Inflection(0.0, np.pi))


def leaky_relu(alpha=0.01):
    alpha = float(alpha)
    if not 0 <= alpha < 1:
        raise ValueError("leaky_relu slope must lie in [0, 1)")
    return ActivationSpec("leaky_relu", lambda x: np.where(x > 0, x, alpha * x),
                          {"alpha": alpha}, True, Kink(0.0, alpha, 1.0), id_point=1.0)


def relu():
    return ActivationSpec("relu", lambda x: np.where(x > 0, x, 0.0 * x), {}, True,
                          Kink(0.0, 0.0, 1.0), id_point=1.0)


def elu(alpha=1.0):
    alpha = float(alpha)
    return ActivationSpec("elu", lambda x: _elu(x, alpha), {"alpha": alpha}, True,
                          AnalyticConvex(-1.0), id_point=1.0)


def selu(lam=1.0507009873554805, alpha=1.6732632423543772):
    lam, alpha = float(lam), float(alpha)
    return ActivationSpec("selu", lambda x: lam * _elu(x, alpha),
                          {"lam": lam, "alpha": alpha}, True, AnalyticConvex(-1.0), id_point=1.0)


def celu(alpha=1.0):
    alpha = float(alpha)
    return ActivationSpec(
        "celu", lambda x: np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0) / alpha)),
        {"alpha": alpha}, True, AnalyticConvex(-1.0), id_point=1.0)


def softplus(alpha=1.0):
    alpha = float(alpha)
    return ActivationSpec("softplus", lambda x: _softplus(x, alpha), {"alpha": alpha}, True,
                          AnalyticConvex(0.0))


def gelu():
    c = _critical(_gelu_prime, -1.5, -0.1)
    return ActivationSpec("gelu", lambda x: x * ndtr(x), {}, False, CriticalPoint(c))


def swish():
    c = _critical(_swish_prime, -2.0, -0.5)
    return ActivationSpec("swish", lambda x: x * _sigmoid(x), {}, False, CriticalPoint(c))


def mish():
    c = _critical(_mish_prime, -2.0, -0.5)
    return ActivationSpec("mish", lambda x: x * np.tanh(_softplus(x)), {}, False,
                          CriticalPoint(c))


def hardswish():
    def f(x):
        return np.where(x <= -3, 0.0 * x, np.where(x >= 3, x, x * (x + 3) / 6))
    return ActivationSpec("hardswish", f, {}, False, Kink(3.0, 1.5, 1.0), id_point=0.0)


def poly(coeffs):
    """Polynomial with coefficients in ascending order, e.g. ``[0, 1, 0, 1]`` for x^3 + x."""
    coeffs = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if coeffs.size == 0:
        coeffs = np.zeros(1)
    p = np.polynomial.Polynomial(coeffs)
    dp, ddp = p.deriv(1), p.deriv(2)
    monotone = bool(p.degree() >= 1 and not _real_roots_with_sign_change(dp)
                    and dp(0.0) > 0)
    cert, zid = _poly_certificate(p, dp, ddp)
    return ActivationSpec("poly", lambda x: p(x), {"coeffs": tuple(coeffs)}, monotone,
                          cert, id_point=zid)


def _real_roots(q):
    if q.degree() < 1:
        return np.array([])
    r = q.roots()
    return np.sort(r[np.abs(r.imag) < 1e-10].real)


def _real_roots_with_sign_change(q):
    out = []
    for r in _real_roots(q):
        if np.sign(q(r - 1e-6)) != np.sign(q(r + 1e-6)):
            out.append(r)
    return out


def _poly_certificate(p, dp, ddp):
    if p.degree() <= 1:
        return None, 0.0
    # identity point: somewhere the derivative is well away from zero
    crit = _real_roots(dp)
    zid = float(crit.max() + 1.0) if crit.size else 0.0
    if dp(zid) == 0:
        zid += 1.0
    if crit.size:
        return CriticalPoint(float(crit[0])), zid
    # no critical point: odd degree >= 3, eventually convex on one side
    infl = _real_roots(ddp)
    base = float(infl.max() + 1.0) if infl.size else 0.0
    return AnalyticConvex(base), zid


_FACTORIES = {
    "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "sin": sin, "leaky_relu": leaky_relu,
    "relu": relu, "elu": elu, "selu": selu, "celu": celu, "softplus": softplus,
    "gelu": gelu, "swish": swish, "mish": mish, "hardswish": hardswish, "poly": poly,
}


def names():
    return sorted(_FACTORIES)


def get_activation(name, **params):
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise KeyError(f"unknown activation {name!r}; known: {', '.join(names())}") from None
    return factory(**params)


def parse_poly(expr):
    """Parse expressions such as ``x^3 + x`` or ``1 - 2*x^2`` into ascending coefficients."""
    import sympy

    x = sympy.Symbol("x")
    e = sympy.sympify(expr.replace("^", "**"), locals={"x": x})
    coeffs = sympy.Poly(e, x).all_coeffs()[::-1]
    return [float(c) for c in coeffs]
