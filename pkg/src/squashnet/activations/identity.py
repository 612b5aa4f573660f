"""Condition 1 checks and width-1 identity approximators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LambdaUnderflow, NonDifferentiable, ZeroDerivative
from ..netir import NarrowNet


@dataclass(frozen=True)
class DiffPoint:
    z: float
    derivative: float


@dataclass(frozen=True)
class IdentityApproximator:
    net: NarrowNet
    K: tuple
    eps: float
    lam: float
    z: float
    sup_error: float


def _central(act, z, h):
    return float((act(z + h) - act(z - h)) / (2 * h))


def verify_cond_id(act, z, h_min=1e-6, tol=1e-6) -> DiffPoint:
    """Central-difference check that ``act`` is differentiable at z with nonzero slope."""
    z = float(z)
    if not np.isfinite(z):
        raise ValueError("z must be finite")
    if not (0 < h_min < 1) or tol <= 0:
        raise ValueError("need 0 < h_min < 1 and tol > 0")
    h = 1e-3
    found = None
    while h >= h_min:
        d1, d2, d4 = _central(act, z, h), _central(act, z, h / 2), _central(act, z, h / 4)
        if abs(d1 - d2) <= tol and abs(d2 - d4) <= tol:
            # Richardson step removes the O(h^2) term
            found = (4 * d4 - d2) / 3
            break
        h /= 2
    if found is None:
        raise NonDifferentiable(f"difference quotients at z={z:g} do not settle")
    # one-sided quotients catch kinks, where central differences agree spuriously
    hs = max(h_min, 1e-7)
    fwd = float((act(z + hs) - act(z)) / hs)
    bwd = float((act(z) - act(z - hs)) / hs)
    if abs(fwd - bwd) > max(1e-3, 1e3 * tol) * max(1.0, abs(found)):
        raise NonDifferentiable(f"one-sided slopes {bwd:g} and {fwd:g} differ at z={z:g}")
    if abs(found) <= tol:
        raise ZeroDerivative(f"derivative at z={z:g} is {found:g}")
    return DiffPoint(z, found)


def _check_grid(K, n, rng):
    lo, hi = K
    if hi <= lo:
        return np.array([lo], dtype=float)
    x = np.linspace(lo, hi, n)
    step = (hi - lo) / (n - 1)
    x[1:-1] += 0.1 * step * (rng.random(n - 2) - 0.5)
    return x


def build_identity_approx(act, dp: DiffPoint, K, eps, n_grid=10_000, seed=0,
                          lam0=1e-2, lam_min=1e-12) -> IdentityApproximator:
    """``h2 o act o h1`` with h1(x) = z + lam (x - m), h2(y) = (y - act(z)) / (lam act'(z)) + m.

    m is the centre of K; lam halves from ``lam0`` until the sampled error is within eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if dp.derivative == 0:
        raise ZeroDerivative("derivative must be nonzero")
    lo, hi = float(K[0]), float(K[1])
    m = 0.5 * (lo + hi)
    x = _check_grid((lo, hi), n_grid, np.random.default_rng(seed))
    s_z = float(act(dp.z))
    lam = lam0
    while lam >= lam_min:
        w1, b1 = lam, dp.z - lam * m
        w2 = 1.0 / (lam * dp.derivative)
        b2 = m - s_z * w2
        net = NarrowNet.scalar_chain((w1, b1), (w2, b2), act)
        err = float(np.max(np.abs(net.scalar(x) - x)))
        if err <= eps:
            return IdentityApproximator(net, (lo, hi), float(eps), lam, dp.z, err)
        lam /= 2
    raise LambdaUnderflow(f"no lambda >= {lam_min:g} reaches error {eps:g} on [{lo:g}, {hi:g}]")


def default_diff_point(act) -> DiffPoint:
    return verify_cond_id(act, act.id_point)


def identity_factory(act, K, eps):
    """Factory used by identity elimination.

    The error of ``h2 o act o h1`` on a window of half-width R only depends on
    lam * R and shrinks with R, so lam is searched once per power-of-two bucket
    of (R, eps) and reused for every neuron that falls in it.
    """
    lo, hi = float(K[0]), float(K[1])
    dp = _cached_point(act)
    R = max(0.5 * (hi - lo), 1e-300)
    R_b = 2.0 ** np.ceil(np.log2(R))
    eps_b = 2.0 ** np.floor(np.log2(eps))
    key = (act.key, R_b, eps_b)
    if key not in _LAMBDAS:
        ref = build_identity_approx(act, dp, (-R_b, R_b), eps_b, n_grid=2000)
        _LAMBDAS[key] = ref.lam
    lam = _LAMBDAS[key]
    m = 0.5 * (lo + hi)
    h1 = (lam, dp.z - lam * m)
    x = np.linspace(lo, hi, 65)
    # tangent slope from the estimated derivative, and the secant through the
    # window ends; the secant is exact on linear pieces, where a derivative
    # that is off in the last digits would bias every chained copy the same way
    w_t = 1.0 / (lam * dp.derivative)
    calib = [(w_t, m - float(act(dp.z)) * w_t)]
    y_lo, y_hi = (float(v) for v in act(np.array([lam * (lo - m), lam * (hi - m)]) + dp.z))
    if hi > lo and y_hi != y_lo:
        w_s = (hi - lo) / (y_hi - y_lo)
        calib.append((w_s, m - 0.5 * (y_lo + y_hi) * w_s))
    best = None
    for h2 in calib:
        net = NarrowNet.scalar_chain(h1, h2, act)
        err = float(np.max(np.abs(net.scalar(x) - x)))
        if best is None or err < best[1]:
            best = (net, err)
    return IdentityApproximator(best[0], (lo, hi), float(eps), lam, dp.z, best[1])


_LAMBDAS = {}


_POINTS = {}


def _cached_point(act):
    key = act.key
    if key not in _POINTS:
        _POINTS[key] = default_diff_point(act)
    return _POINTS[key]
