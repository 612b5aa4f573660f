"""Filling curves of [0,1]^d built from width-2 indicator networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial import cKDTree

from .activations.squash import make_step_factory  # noqa: F401  (re-export)
from .errors import BandNotFound, CodePointInfeasible, GapTooSmall, StepBuildFailed
from .netir import AffineLayer, NarrowNet, compose_all, lift

SHRINK = 1e-9


@dataclass
class FillingCurve:
    net: NarrowNet
    N: int
    tracked: Dict[Tuple[int, ...], Tuple[float, float]]
    info: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.net.output_dim

    def cube(self, nu):
        nu = np.asarray(nu)
        return (nu - 1) / self.N, nu / self.N

    def sidecar_rows(self):
        for nu in sorted(self.tracked):
            lo, hi = self.tracked[nu]
            yield list(nu) + [lo, hi]


@dataclass(frozen=True)
class CodePoint:
    nu: tuple
    c: float
    target: np.ndarray
    distance: float


def _feed(act, w_x, w_y, bias):
    """(x, y) -> (x, w_x x + w_y y + bias)."""
    return NarrowNet.affine([[1.0, 0.0], [w_x, w_y]], [0.0, bias], act)


def build_indicator(step_factory, z, gamma, N, info=None) -> NarrowNet:
    """Width-2 net with f(x)_1 = x whose second output alternates between ~0 and ~1
    across the points z, sweeping [1/(2N), 1 - 1/(2N)] inside every B_gamma(z_i)."""
    act = step_factory.activation
    z = np.sort(np.asarray(z, dtype=float))
    if z.size == 0:
        raise ValueError("need at least one point")
    gaps = np.diff(z)
    if gaps.size and gamma >= gaps.min() / 2:
        raise GapTooSmall(f"gamma={gamma:g} is not below half the minimum gap {gaps.min():g}",
                          stage="decoder")
    if z.size % 2:
        # auxiliary breakpoint; it may sit beyond 1 since only its ordering matters
        z = np.append(z, z[-1] + 3 * gamma)
    m = z.size // 2
    # closing breakpoint for the last stage; kept clear of [0, 1]
    z_end = max(1.0, z[-1]) + 3 * gamma
    eps = min(1.0 / (4 * N), gamma / 4)
    zeta = gamma / 2
    K = (-(z_end + 0.1), 1.0 - min(z.min(), 0.0) + 0.1)
    rho = step_factory(K, eps, zeta).net
    lifted = lift(rho, 2, [1])
    zz = np.concatenate([[0.0], z, [z_end]])  # 1-based like the recursion
    parts = [NarrowNet.affine([[1.0], [1.0]], [0.0, -zz[m + 1]], act), lifted]
    for ell in range(2, m + 2):
        p, q = zz[m - ell + 2], zz[m + ell]
        parts += [_feed(act, 1.0, p - q, -p), lifted]
    if info is not None:
        info.update({"eps": eps, "zeta": zeta, "K": K, "m": m, "z": z.tolist()})
    return compose_all(parts)


def _identity_curve(N, act):
    tracked = {(nu,): ((nu - 1) / N + SHRINK, nu / N - SHRINK) for nu in range(1, N + 1)}
    return FillingCurve(NarrowNet.affine([[1.0]], [0.0], act), N, tracked, {"levels": []})


def _widen_first_layer(phi: NarrowNet) -> NarrowNet:
    """View a R->R^2 net as a R^2->R^2 net ignoring its second input."""
    first = phi.layers[0]
    W = np.hstack([first.weights, np.zeros((first.out_dim, 1))])
    return NarrowNet([AffineLayer(W, first.bias)] + list(phi.layers[1:]), phi.tags,
                     phi.activation)


def _bisect(g, a, b):
    ga, gb = g(a), g(b)
    if ga == 0:
        return a
    if gb == 0:
        return b
    if np.sign(ga) == np.sign(gb):
        # the sweep jumps between adjacent floats
        raise BandNotFound(f"no crossing resolvable in double precision on [{a!r}, {b!r}]")
    return float(brentq(g, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300))


def _locate_bands(last, lo, hi, N, z_mid, n_scan=1001):
    """Subintervals of (lo, hi) on which ``last`` stays inside each band [(j-1)/N, j/N]."""
    xs = np.linspace(lo, hi, n_scan)
    ys = last(xs)
    out = {}
    for j in range(1, N + 1):
        lo_b, hi_b, center = (j - 1) / N, j / N, (2 * j - 1) / (2 * N)
        s = np.sign(ys - center)
        idx = np.nonzero(s[:-1] * s[1:] <= 0)[0]
        if idx.size == 0:
            raise BandNotFound(f"band {j} centre never reached on [{lo:.6g}, {hi:.6g}]")
        k = idx[np.argmin(np.abs(xs[idx] - z_mid))]
        xstar = _bisect(lambda t: last(np.array([t]))[0] - center, xs[k], xs[k + 1])

        def inside(v):
            return lo_b <= v <= hi_b

        def edge(direction):
            # walk the scan grid until leaving the band, then bisect on the crossed boundary
            i = k + 1 if direction > 0 else k
            prev = xstar
            while 0 <= i < n_scan and inside(ys[i]) and (xs[i] - xstar) * direction >= 0:
                prev = xs[i]
                i += direction
            if not 0 <= i < n_scan:
                return prev
            bound = hi_b if ys[i] > hi_b else lo_b
            return _bisect(lambda t: last(np.array([t]))[0] - bound, min(prev, xs[i]),
                           max(prev, xs[i]))

        a, b = edge(-1), edge(+1)
        # thin bands get a proportional inset so they survive it
        s = min(SHRINK, 1e-3 * (b - a))
        a, b = a + s, b - s
        if not a < b:
            raise BandNotFound(f"band {j} interval collapsed near x={xstar:.6g}")
        out[j] = (a, b)
    return out


def extend_filling_curve(curve: FillingCurve, step_factory, retries=3,
                         tighten=1.0) -> FillingCurve:
    act = step_factory.activation
    d, N = curve.d, curve.N
    keys = sorted(curve.tracked, key=lambda k: curve.tracked[k][0])
    mids = np.array([0.5 * sum(curve.tracked[k]) for k in keys])
    gamma = min(hi - lo for lo, hi in curve.tracked.values()) / 4
    last_error = None
    for attempt in range(retries + 1):
        scale = tighten * 0.5 ** attempt
        info = {}
        try:
            phi = build_indicator(_scaled_factory(step_factory, scale), mids, gamma, N, info)
        except StepBuildFailed as exc:
            last_error = exc
            continue
        append = NarrowNet.affine(np.vstack([np.eye(d), np.zeros((1, d))]), np.zeros(d + 1),
                                  act)
        net = compose_all([curve.net, append, lift(_widen_first_layer(phi), d + 1, [0, d])])

        def last(t, net=net):
            return net.forward(np.asarray(t, dtype=float).reshape(-1, 1))[:, -1]

        try:
            tracked = {}
            for key, zm in zip(keys, mids):
                lo, hi = curve.tracked[key]
                for j, J in _locate_bands(last, lo, hi, N, zm).items():
                    tracked[key + (j,)] = J
        except BandNotFound as exc:
            last_error = exc
            continue
        levels = curve.info.get("levels", []) + [dict(info, gamma=gamma, attempt=attempt)]
        return FillingCurve(net, N, tracked, {"levels": levels})
    raise BandNotFound(f"extension to dimension {d + 1} failed: {last_error}")


def _scaled_factory(factory, scale):
    if scale == 1.0:
        return factory

    def scaled(K, eps, zeta):
        return factory(K, eps * scale, zeta * scale)

    scaled.activation = factory.activation
    return scaled


def build_filling_curve(N, d, step_factory) -> FillingCurve:
    if N < 1 or d < 1:
        raise ValueError("need N >= 1 and d >= 1")
    curve = _identity_curve(N, step_factory.activation)
    for _ in range(d - 1):
        curve = extend_filling_curve(curve, step_factory)
    return curve


# ---------------------------------------------------------------------------
# verification helpers


def coverage_radius(curve: FillingCurve, n_samples=100_000, grid_per_axis=20):
    t = np.linspace(0.0, 1.0, n_samples)
    pts = curve.net.forward(t.reshape(-1, 1))
    extra = [curve.net.forward(np.linspace(lo, hi, 5).reshape(-1, 1))
             for lo, hi in curve.tracked.values()]
    pts = np.vstack([pts] + extra)
    axes = [np.linspace(0, 1, grid_per_axis)] * curve.d
    targets = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    dist, _ = cKDTree(pts).query(targets, p=np.inf)
    return float(dist.max())


def containment_violation(curve: FillingCurve, samples=100, tol=1e-9):
    """Largest distance by which a sampled image leaves its tracked cube (0 when contained)."""
    worst = 0.0
    for nu, (lo, hi) in curve.tracked.items():
        y = curve.net.forward(np.linspace(lo, hi, samples).reshape(-1, 1))
        c_lo, c_hi = curve.cube(nu)
        worst = max(worst, float(np.max(np.maximum(c_lo - y, y - c_hi))))
    return max(0.0, worst - tol)


def intervals_disjoint(tracked):
    iv = sorted(tracked.values())
    return all(a[1] < b[0] for a, b in zip(iv, iv[1:])) and all(lo < hi for lo, hi in iv)


# ---------------------------------------------------------------------------
# code points


def pick_code_points(curve: FillingCurve, targets, delta, scan=201):
    """Choose c with ||curve(c) - target||_inf <= delta for each target.

    The start is the midpoint of the tracked interval of the cube holding the
    target; if that misses, the tracked interval is scanned and refined.
    """
    if delta < 1.0 / curve.N:
        raise ValueError(f"delta={delta:g} is below the curve resolution 1/N={1 / curve.N:g}")
    f = curve.net

    def dist(t, y):
        return float(np.max(np.abs(f.forward(np.array([[t]]))[0] - y)))

    out = []
    for nu, y in targets.items():
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.size != curve.d or np.any(y < -1e-9) or np.any(y > 1 + 1e-9):
            raise ValueError(f"target for {nu} must lie in [0,1]^{curve.d}")
        cube = tuple(int(v) for v in np.clip(np.ceil(y * curve.N), 1, curve.N))
        lo, hi = curve.tracked[cube]
        c = 0.5 * (lo + hi)
        dc = dist(c, y)
        if dc > delta:
            ts = np.linspace(lo, hi, scan)
            ds = np.max(np.abs(f.forward(ts.reshape(-1, 1)) - y), axis=1)
            k = int(np.argmin(ds))
            a, b = ts[max(k - 1, 0)], ts[min(k + 1, scan - 1)]
            res = minimize_scalar(lambda t: dist(t, y), bounds=(a, b), method="bounded",
                                  options={"xatol": 1e-13})
            c, dc = (float(res.x), float(res.fun)) if res.fun < ds[k] else (float(ts[k]),
                                                                             float(ds[k]))
        if dc > delta:
            raise CodePointInfeasible(f"cell {nu}: best distance {dc:.4g} exceeds {delta:.4g}")
        out.append(CodePoint(tuple(nu) if isinstance(nu, tuple) else (nu,), c, y, dc))
    return out
