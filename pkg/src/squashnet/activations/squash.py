"""Condition 2: width-1 step approximators.

Two routes exist.  Monotone activations with a finite limit get a closed-form
rescaling ``rho(x) = g(M x + v0)``.  Every other certificate first produces a
width-1 net with a sigmoidal window [a, b] (below its chord on (a, c), above
on (c, b)); iterating the chord-normalised map pushes points left of c toward
a and points right of c toward b.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from ..errors import (CertificateError, CertificateFailure, IterationCap, MonotonicityLoss, NoWindowFound,
                      NotIncreasing, StepBuildFailed)
from ..netir import AffineLayer, NarrowNet, compose_all
from .catalog import (AnalyticConvex, CriticalPoint, DirectWindow, Inflection, Kink,
                      MonotoneLimit)


def step(x):
    return (np.asarray(x) >= 0).astype(float)


@dataclass(frozen=True)
class StepApproximator:
    net: NarrowNet
    K: tuple
    eps: float
    zeta: float
    info: dict = field(default_factory=dict, compare=False)

    def __call__(self, x):
        return self.net.scalar(x)


@dataclass(frozen=True)
class StepReport:
    max_error: float
    min_gap: float
    range_lo: float
    range_hi: float
    passed: bool
    in_range: bool
    increasing: bool
    accurate: bool


@dataclass(frozen=True)
class SigmoidalBase:
    net: NarrowNet
    a: float
    b: float
    c: float
    info: dict = field(default_factory=dict, compare=False)


def chain(act, affines):
    """Width-1 net alternating the scalar affine maps ``(w, b)`` with the activation."""
    layers = [AffineLayer([[w]], [b]) for w, b in affines]
    return NarrowNet(layers, [np.ones(1, bool)] * (len(affines) - 1), act)


def scalar_affine(act, w, b):
    return NarrowNet.affine([[w]], [b], act)


def verification_grid(K, n, seed=0):
    """Uniform grid on K with 10% jitter on interior points, plus the endpoints."""
    lo, hi = K
    x = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    rng = np.random.default_rng(seed)
    x[1:-1] += 0.1 * h * (rng.random(n - 2) - 0.5)
    return x


def verify_step_approx(sa: StepApproximator, grid_n=10_000, tie_tol=0.0, seed=0,
                       x=None) -> StepReport:
    if x is None:
        if grid_n < 1000:
            raise ValueError("grid_n must be at least 1000")
        x = verification_grid(sa.K, grid_n, seed)
        x = np.sort(np.concatenate([x, [-sa.zeta, sa.zeta]]))
    y = sa.net.scalar(x)
    off = np.abs(x) >= sa.zeta
    err = float(np.max(np.abs(y[off] - step(x[off])))) if off.any() else 0.0
    gap = float(np.min(np.diff(y))) if y.size > 1 else np.inf
    lo, hi = float(np.min(y)), float(np.max(y))
    in_range = lo >= 0.0 and hi <= 1.0
    increasing = gap > 0 if tie_tol == 0 else gap >= -tie_tol
    accurate = err <= sa.eps
    return StepReport(err, gap, lo, hi, bool(in_range and increasing and accurate),
                      bool(in_range), bool(increasing), bool(accurate))


# ---------------------------------------------------------------------------
# sigmoidal windows


def _chord_signs(x, y, xa, ya, xb, yb, tol):
    m = (yb - ya) / (xb - xa)
    d = y - (ya + m * (x - xa))
    s = np.where(np.abs(d) <= tol, 0, np.sign(d)).astype(int)
    return d, s


def _pattern_ok(s):
    """Signs must read (-1)+ then at most two zeros then (+1)+."""
    nz = np.nonzero(s)[0]
    if nz.size < 2:
        return None
    neg = s[nz] < 0
    changes = np.nonzero(np.diff(neg.astype(int)))[0]
    if not neg[0] or neg[-1] or changes.size != 1:
        return None
    last_neg, first_pos = nz[changes[0]], nz[changes[0] + 1]
    zeros = np.nonzero(s == 0)[0]
    if zeros.size > 2 or np.any((zeros < last_neg) | (zeros > first_pos)):
        return None
    return last_neg, first_pos


def _locate_crossing(rho, xa, xb, lo, hi):
    ya, yb = rho.scalar(np.array([xa, xb]))
    m = (yb - ya) / (xb - xa)

    def g(t):
        return float(rho.scalar(np.array([t]))[0] - (ya + m * (t - xa)))

    if g(lo) == 0:
        return lo
    if g(hi) == 0:
        return hi
    return float(brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def find_sigmoidal_window(rho: NarrowNet, search, grid_n=2001, n_anchors=41):
    """Scan anchor pairs over a grid of ``search``; widest valid pair wins.

    Returns (a, b, c).  Raises NoWindowFound when no pair has the
    below-then-above chord pattern with strict increase.
    """
    if grid_n < 100:
        raise ValueError("grid_n must be at least 100")
    lo, hi = float(search[0]), float(search[1])
    x = np.linspace(lo, hi, grid_n)
    y = rho.scalar(x)
    if not np.all(np.isfinite(y)):
        raise NoWindowFound("network is not finite on the search interval")
    bad = np.concatenate([[0], np.cumsum(np.diff(y) <= 0)])
    tol = 1e-12 * max(1.0, float(np.max(np.abs(y))))
    anchors = np.unique(np.round(np.linspace(0, grid_n - 1, n_anchors)).astype(int))
    pairs = [(i, j) for i in anchors for j in anchors if j - i >= 3]
    pairs.sort(key=lambda p: (-(p[1] - p[0]), p[0]))
    for i, j in pairs:
        if bad[j] - bad[i] > 0:
            continue
        _, s = _chord_signs(x[i + 1:j], y[i + 1:j], x[i], y[i], x[j], y[j], tol)
        hit = _pattern_ok(s)
        if hit is None:
            continue
        ln, fp = hit
        c = _locate_crossing(rho, x[i], x[j], x[i + 1 + ln], x[i + 1 + fp])
        return float(x[i]), float(x[j]), c
    raise NoWindowFound(f"no sigmoidal window in [{lo:g}, {hi:g}]")


def validate_window(rho: NarrowNet, a, b, grid_n=10_000):
    """Check a given window on a dense grid and return its crossing c."""
    x = np.linspace(a, b, grid_n)
    y = rho.scalar(x)
    if not np.all(np.diff(y) > 0):
        raise NotIncreasing(f"network is not strictly increasing on [{a:g}, {b:g}]")
    tol = 1e-12 * max(1.0, float(np.max(np.abs(y))))
    _, s = _chord_signs(x[1:-1], y[1:-1], a, y[0], b, y[-1], tol)
    hit = _pattern_ok(s)
    if hit is None:
        raise NoWindowFound(f"[{a:g}, {b:g}] does not cross its chord from below to above")
    ln, fp = hit
    return _locate_crossing(rho, a, b, x[1 + ln], x[1 + fp])


def _double_psi(act, pre, post):
    """1 - psi(1 - psi(x)) with psi(x) = post_w * act(pre_w x + pre_b) + post_b."""
    (pw, pb), (qw, qb) = pre, post
    # inner: x -> psi(x); then u -> 1 - u feeds psi again; then v -> 1 - v
    return chain(act, [(pw, pb), (-qw * pw, pw * (1 - qb) + pb), (-qw, 1 - qb)])


def _inflection_base(act, cert: Inflection):
    c, h = float(cert.c), float(cert.delta) / 2
    f = lambda t: float(act(np.float64(t)))
    sc = f(c)
    al, ar = sc - f(c - h), f(c + h) - sc
    rho = chain(act, [(1.0, 0.0), (1.0, 0.0)])
    if al >= ar:
        slope = al / h
        g = lambda t: f(t) - (sc + slope * (t - c))
        a, b = c - h, c + h
        if g(b) < 0:
            left = _first_sign(g, c, b, +1)
            b = float(brentq(g, left, b, xtol=1e-15, maxiter=500))
    else:
        slope = ar / h
        g = lambda t: f(t) - (sc + slope * (t - c))
        a, b = c - h, c + h
        if g(a) > 0:
            right = _first_sign(g, c, a, -1)
            a = float(brentq(g, a, right, xtol=1e-15, maxiter=500))
    return rho, a, b, {"alpha": max(al, ar)}


def _first_sign(g, c, far, sign):
    """Point between c and far, as close to c as needed, where g has the given sign."""
    for k in range(1, 60):
        t = c + (far - c) * 2.0 ** -k
        if np.sign(g(t)) == sign:
            return t
    raise NoWindowFound("inflection certificate: chord never separates from the curve")


def _translated_base(act, cert, b_lo, b_hi, n=48):
    """psi(x) = s_c(bx)/s_c(b) with s_c(x) = act(c + x) - act(c); rho = 1 - psi(1 - psi)."""
    c = float(cert.c)
    sc = float(act(np.float64(c)))
    scan = np.geomspace(b_lo, b_hi, n)
    for b in np.concatenate([scan, -scan]):
        D = float(act(np.float64(c + b))) - sc
        if not np.isfinite(D) or D == 0:
            continue
        rho = _double_psi(act, (b, c), (1.0 / D, -sc / D))
        try:
            a, bb, cc = find_sigmoidal_window(rho, (0.0, 1.0), grid_n=1001, n_anchors=21)
        except NoWindowFound:
            continue
        return rho, a, bb, {"b": float(b)}
    raise NoWindowFound(f"no b in the scan range gives a sigmoidal window (base point {c:g})")


def _kink_base(act, cert: Kink):
    cert.check()
    c = float(cert.c)
    sc = float(act(np.float64(c)))
    sgn = 1.0 if cert.v_plus > 0 else -1.0
    vm, vp = sgn * cert.v_minus, sgn * cert.v_plus
    r = 1.0
    while r >= 1e-8:
        if vm < vp:
            pre, post = (r, c), (sgn / (r * vp), -sgn * sc / (r * vp))
        else:
            pre, post = (-r, c), (-sgn / (r * vm), sgn * sc / (r * vm))
        rho = _double_psi(act, pre, post)
        try:
            a, b, _ = find_sigmoidal_window(rho, (-1.0, 2.0), grid_n=3001)
            return rho, a, b, {"r": r}
        except NoWindowFound:
            r /= 2
    raise NoWindowFound("kink certificate: no r down to 1e-8 gives a window")


def build_sigmoidal_base(act) -> SigmoidalBase:
    cert = act.certificate
    if cert is None:
        raise CertificateError(f"{act.name} carries no certificate")
    if isinstance(cert, MonotoneLimit):
        raise CertificateError("MonotoneLimit certificates bypass the window machinery")
    if isinstance(cert, Inflection):
        rho, a, b, info = _inflection_base(act, cert)
    elif isinstance(cert, (CriticalPoint, AnalyticConvex)):
        rho, a, b, info = _translated_base(act, cert, *cert.b_search)
    elif isinstance(cert, Kink):
        rho, a, b, info = _kink_base(act, cert)
    elif isinstance(cert, DirectWindow):
        rho, a, b, info = cert.net, float(cert.a), float(cert.b), {}
    else:
        raise CertificateError(f"unknown certificate {cert!r}")
    c = validate_window(rho, a, b)
    info["kind"] = type(cert).__name__
    return SigmoidalBase(rho, a, b, c, info)


def normalized_base(base: SigmoidalBase) -> NarrowNet:
    """rho_hat = phi^{-1} o rho where phi is the chord of rho over the window."""
    ya, yb = base.net.scalar(np.array([base.a, base.b]))
    m = (yb - ya) / (base.b - base.a)
    return compose_all([base.net, scalar_affine(base.net.activation, 1.0 / m, base.a - ya / m)])


# ---------------------------------------------------------------------------
# closed-form route for monotone activations with a finite limit


def finite_limits(act, far=1e6):
    with np.errstate(all="ignore"):
        vals = act(np.array([-2 * far, -far, far, 2 * far]))
    lo = float(vals[1]) if np.all(np.isfinite(vals[:2])) and abs(vals[0] - vals[1]) <= 1e-9 else None
    hi = float(vals[2]) if np.all(np.isfinite(vals[2:])) and abs(vals[3] - vals[2]) <= 1e-9 else None
    return lo, hi


def strictly_increasing_sample(act, n=20_001):
    y = act(np.linspace(-10, 10, n))
    return bool(np.all(np.diff(y) > 0))


def limit_route_available(act):
    if not act.monotone or not strictly_increasing_sample(act):
        return False
    lo, hi = finite_limits(act)
    return lo is not None or hi is not None


def _squash_core(act):
    """Width-1 net g, strictly increasing from 0 to 1, built from a monotone activation."""
    lo, hi = finite_limits(act)
    if lo is not None and hi is not None:
        return chain(act, [(1.0, 0.0), (1.0 / (hi - lo), -lo / (hi - lo))]), "both"
    if lo is not None:
        # s0 = act - lo vanishes at -inf; psi = (s0(1) - s0(1 - s0(x))) / s0(1)
        s1 = float(act(np.float64(1.0))) - lo
        return chain(act, [(1.0, 0.0), (-1.0, 1.0 + lo), (-1.0 / s1, (s1 + lo) / s1)]), "left"
    if hi is not None:
        # tau(x) = hi - act(-x) vanishes at -inf; same combinator on tau
        t1 = hi - float(act(np.float64(-1.0)))
        return chain(act, [(-1.0, 0.0), (-1.0, hi - 1.0), (1.0 / t1, (t1 - hi) / t1)]), "right"
    raise CertificateError(f"{act.name} has no finite limit")


def _inverse(g, target, lo=-1.0, hi=1.0):
    f = lambda t: float(g.scalar(np.array([t]))[0]) - target
    while f(lo) > 0:
        lo *= 2
        if lo < -1e12:
            raise StepBuildFailed("cannot bracket the inverse of the squashing core")
    while f(hi) < 0:
        hi *= 2
        if hi > 1e12:
            raise StepBuildFailed("cannot bracket the inverse of the squashing core")
    return float(brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def build_limit_step(act, K, eps, zeta) -> StepApproximator:
    g, side = _squash_core(act)
    v0 = _inverse(g, 0.5)
    top = 1.0 - eps
    q_hi = _inverse(g, top) if top < 1.0 else _inverse(g, 1.0 - 2 ** -53)
    q_lo = _inverse(g, eps)
    M = max((q_hi - v0) / zeta, (v0 - q_lo) / zeta) * (1 + 1e-9)
    net = compose_all([scalar_affine(act, M, v0), g])
    return StepApproximator(net, tuple(map(float, K)), float(eps), float(zeta),
                            {"route": "limit", "side": side, "M": M, "v0": v0,
                             "n_iter": 0})


# ---------------------------------------------------------------------------
# fixed-point route


def shrink_window(base: SigmoidalBase, kappa) -> SigmoidalBase:
    """Move both anchors a fraction kappa toward the crossing and revalidate.

    Chord normalisation turns the new anchors into fixed points; unlike the
    original ones they need not be superattracting, which keeps iterates
    from collapsing onto one floating-point value.
    """
    a = base.a + kappa * (base.c - base.a)
    b = base.b - kappa * (base.b - base.c)
    c = validate_window(base.net, a, b)
    return SigmoidalBase(base.net, a, b, c, dict(base.info, shrink=kappa))


def build_window_step(act, K, eps, zeta, max_iter=10_000, base=None, margin=0.99):
    base = base or build_sigmoidal_base(act)
    a, b, c = base.a, base.b, base.c
    rho_hat = normalized_base(base)
    lo, hi = float(K[0]), float(K[1])
    s = margin * min((c - a) / -lo, (b - c) / hi)
    t = scalar_affine(act, s, c)
    target = 0.999 * eps
    up_goal, down_goal = b - (b - a) * target, a + (b - a) * target
    orbit = np.array([c + s * zeta, c - s * zeta])
    history = [orbit.copy()]
    n = 0
    while not (orbit[0] >= up_goal and orbit[1] <= down_goal):
        if n >= max_iter:
            raise IterationCap(f"more than {max_iter} iterations needed")
        orbit = rho_hat.scalar(orbit)
        history.append(orbit.copy())
        n += 1
    n = max(n, 1)
    post = scalar_affine(act, 1.0 / (b - a), -a / (b - a))
    for _ in range(8):
        net = compose_all([t] + [rho_hat] * n + [post])
        vals = net.scalar(np.array([zeta, -zeta]))
        if vals[0] >= 1 - eps and vals[1] <= eps:
            break
        n += 1
    else:
        raise StepBuildFailed("fused network misses the step tolerance")
    info = {"route": "window", "a": a, "b": b, "c": c, "n_iter": n, "scale": s,
            "orbit": np.array(history)}
    info.update(base.info)
    return StepApproximator(net, (lo, hi), float(eps), float(zeta), info)


def build_step_approx(act, K, eps, zeta, strategy="auto", max_iter=10_000, verify_n=10_000,
                      tie_tol=0.0) -> StepApproximator:
    """Width-1 net within eps of Step off (-zeta, zeta), increasing, with range in [0, 1].

    ``strategy`` is "auto" (closed form when available, else fixed-point
    iteration), "limit" or "window".  With ``verify_n`` the result is checked
    on a jittered grid of that size and failures raise.
    """
    lo, hi = float(K[0]), float(K[1])
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    if not lo < 0 < hi:
        raise ValueError("0 must be interior to K")
    if not 0 < zeta < (hi - lo) / 2:
        raise ValueError("zeta must lie in (0, |K|/2)")
    candidates = []
    if strategy in ("auto", "limit") and limit_route_available(act):
        candidates.append("limit")
    if strategy in ("auto", "window") and not isinstance(act.certificate, MonotoneLimit):
        candidates.append("window")
    if not candidates:
        if isinstance(act.certificate, Kink):
            act.certificate.check()
        raise CertificateError(f"no step route for {act.name} with strategy {strategy!r}")
    last = None
    for route in candidates:
        if route == "limit":
            sa = build_limit_step(act, (lo, hi), eps, zeta)
            if not verify_n:
                return sa
            rep = verify_step_approx(sa, verify_n, tie_tol=tie_tol)
            sa.info["report"] = rep
            if rep.passed:
                return sa
            last = rep
            continue
        base = build_sigmoidal_base(act)
        for kappa in (0.0, 0.05, 0.1, 0.2, 0.3):
            try:
                b = shrink_window(base, kappa) if kappa else base
            except (NoWindowFound, NotIncreasing):
                continue
            sa = build_window_step(act, (lo, hi), eps, zeta, max_iter=max_iter, base=b)
            if not verify_n:
                return sa
            rep = verify_step_approx(sa, verify_n, tie_tol=tie_tol)
            sa.info["report"] = rep
            if rep.passed:
                return sa
            last = rep
    if not last.increasing:
        raise MonotonicityLoss(f"minimum successive gap {last.min_gap:.3g} on the grid")
    raise StepBuildFailed(f"grid verification failed: {last}")


def make_step_factory(act, strategy="auto", verify_n=2000):
    """Cached ``(K, eps, zeta) -> StepApproximator`` for use inside larger constructions.

    Inner nets are checked for range and accuracy but ties on the grid are
    tolerated: deep in the tails the increments legitimately round away.
    """
    cache = {}

    def factory(K, eps, zeta):
        key = (round(float(K[0]), 12), round(float(K[1]), 12), float(eps), float(zeta))
        if key not in cache:
            try:
                cache[key] = build_step_approx(act, key[:2], eps, zeta, strategy=strategy,
                                               verify_n=verify_n, tie_tol=np.inf)
            except CertificateFailure as exc:
                raise StepBuildFailed(f"step approximator for K={key[:2]}, eps={eps:g}, "
                                      f"zeta={zeta:g}: {exc}", stage="step") from exc
        return cache[key]

    factory.activation = act
    factory.strategy = strategy
    return factory
