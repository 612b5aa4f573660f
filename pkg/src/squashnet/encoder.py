"""Encoders: grid flattening and width-2 piecewise-constant maps."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .activations.squash import make_step_factory
from .errors import BudgetInfeasible, GapTooSmall, StepBuildFailed, VerificationFailed
from .netir import BoxDomain, NarrowNet, compose_all, lift

A_CAP = 1e8
Interval = Tuple[float, float]


@dataclass(frozen=True)
class GridSpec:
    """Cartesian grid of per-axis disjoint compact intervals."""

    axes: Tuple[Tuple[Interval, ...], ...]

    def __post_init__(self):
        axes = tuple(tuple((float(lo), float(hi)) for lo, hi in ax) for ax in self.axes)
        for ax in axes:
            if not ax:
                raise ValueError("every axis needs at least one interval")
            for lo, hi in ax:
                if not lo <= hi:
                    raise ValueError(f"interval ({lo}, {hi}) is reversed")
            for (_, h0), (l1, _) in zip(ax, ax[1:]):
                if not h0 < l1:
                    raise ValueError("axis intervals must be sorted and disjoint")
        object.__setattr__(self, "axes", axes)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def sizes(self):
        return tuple(len(ax) for ax in self.axes)

    def cells(self):
        return itertools.product(*[range(1, n + 1) for n in self.sizes])

    def cell_box(self, idx):
        lo = [self.axes[i][j - 1][0] for i, j in enumerate(idx)]
        hi = [self.axes[i][j - 1][1] for i, j in enumerate(idx)]
        return BoxDomain(lo, hi)


@dataclass(frozen=True)
class CellPartition:
    N: int
    gamma: float
    dx: int

    def __post_init__(self):
        if self.N < 1 or self.dx < 1:
            raise ValueError("need N >= 1 and dx >= 1")
        if not 0 < self.gamma < 0.5:
            raise ValueError("gamma must lie in (0, 0.5)")

    def axis(self):
        N, g = self.N, self.gamma
        return tuple(((k - 1 + g) / N, (k - g) / N) for k in range(1, N + 1))

    def grid(self) -> GridSpec:
        return GridSpec((self.axis(),) * self.dx)

    def cell(self, nu) -> BoxDomain:
        return self.grid().cell_box(nu)

    def indices(self):
        return list(self.grid().cells())

    def contains(self, x):
        """Boolean mask of points lying in some cell."""
        x = np.atleast_2d(x)
        t = x * self.N
        frac = t - np.floor(t)
        inside = (frac >= self.gamma) & (frac <= 1 - self.gamma)
        # the upper edge x = 1 belongs to no cell interior but frac wraps to 0 there
        return np.all(inside & (x >= 0) & (x <= 1), axis=1)

    def sample(self, n, rng):
        """Uniform points of the union of the cells."""
        nu = rng.integers(1, self.N + 1, size=(n, self.dx))
        u = rng.random((n, self.dx))
        return (nu - 1 + self.gamma + (1 - 2 * self.gamma) * u) / self.N

    def index_of(self, x):
        x = np.atleast_2d(x)
        return np.clip(np.floor(x * self.N).astype(int) + 1, 1, self.N)

    def covered_measure(self):
        return (1 - 2 * self.gamma) ** self.dx


@dataclass
class Flattening:
    """A flattening net with the interval each grid cell lands in."""

    net: NarrowNet
    cell_map: Dict[tuple, Interval]
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# separators


def _step(step_factory, lo, hi, eps, zeta):
    return step_factory((lo, hi), eps, zeta).net


def build_separator(b, r, xi, step_factory, K: BoxDomain, eta=None) -> NarrowNet:
    """f = A^-1 o (rho(x1 - b), x2) o A with A = [[1, 0], [-r, 1]].

    ``eta`` is the half-width of the excluded zone of rho around ``b``
    (defaults to ``xi``); ``K`` bounds the inputs.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    if not 0 < xi < 0.5:
        raise ValueError("xi must lie in (0, 0.5)")
    eta = xi if eta is None else eta
    act = step_factory.activation
    lo, hi = float(K.lo[0]) - b, float(K.hi[0]) - b
    pad = 0.01 * max(hi - lo, 1e-12)
    rho = _step(step_factory, lo - pad, hi + pad, xi, eta)
    return compose_all([
        NarrowNet.affine([[1.0, 0.0], [-r, 1.0]], [-b, 0.0], act),
        lift(rho, 2, [0]),
        NarrowNet.affine([[1.0, 0.0], [r, 1.0]], [0.0, r * b], act),
    ])


def _split(step_factory, c, eta, eps, K1):
    """(x1, x2) -> (rho(x1 - c), x2)."""
    act = step_factory.activation
    lo, hi = K1[0] - c, K1[1] - c
    pad = 0.01 * max(hi - lo, 1e-12)
    rho = _step(step_factory, lo - pad, hi + pad, eps, eta)
    return compose_all([NarrowNet.affine(np.eye(2), [-c, 0.0], act), lift(rho, 2, [0])])


def _first_coord(net, x1):
    x1 = np.asarray(x1, dtype=float).ravel()
    return net.forward(np.stack([x1, np.zeros_like(x1)], axis=1))


def _separate_2grid(grid: GridSpec, step_factory, margin=0.99):
    """R^2 -> R^2 net whose second output flattens the 2-grid; see flatten_2grid."""
    if grid.dim != 2:
        raise ValueError("need a 2-grid")
    act = step_factory.activation
    blocks, cols = grid.axes
    n1, n2 = len(blocks), len(cols)
    L = cols[-1][1] - cols[0][0]
    eta2 = min((c1[0] - c0[1] for c0, c1 in zip(cols, cols[1:])), default=np.inf)
    r = [(k - 1) * (L + 1) for k in range(n1 + 1)]  # r[k] for k >= 2
    total = sum(2 * r[k] for k in range(2, n1 + 1))
    # sum_k 2 r_k zeta < min(eta/2, 1/2), with a x0.5 margin
    zeta = 0.5 * min(eta2 / 2, 0.5) / total if total > 0 else 0.25
    zeta = min(zeta, 0.25)
    info = {"L": L, "eta": eta2, "r_k": r[2:], "zeta": zeta, "stages": []}
    if n1 == 1:
        return NarrowNet.identity(2, act, hidden=True), info

    # block extents in the first coordinate, tracked through every stage
    ext = np.array(blocks, dtype=float)
    K1 = (ext[0, 0], ext[-1, 1])
    c1 = 0.5 * (ext[-2, 1] + ext[-1, 0])
    half = margin * 0.5 * (ext[-1, 0] - ext[-2, 1])
    parts = [_split(step_factory, c1, half, zeta, K1)]
    info["stages"].append({"b": c1, "eta": half})

    def push(net, ext):
        out = np.empty_like(ext)
        for i, (lo, hi) in enumerate(ext):
            out[i] = _first_coord(net, [lo, hi])[:, 0]
        return out

    ext = push(parts[-1], ext)
    for k in range(2, n1 + 1):
        y = n1 - k + 1  # 1-based block that moves this stage
        y_lo = ext[y - 1, 0]
        if y > 1:
            x0_hi = ext[: y - 1, 1].max()
            if not x0_hi < y_lo:
                raise BudgetInfeasible(
                    f"stage {k}: first-coordinate images of blocks {y - 1} and {y} merged "
                    f"({x0_hi:.3e} vs {y_lo:.3e}); the step tails are below float resolution",
                    stage="flatten")
            b = 0.5 * (x0_hi + y_lo)
            eta = margin * 0.5 * (y_lo - x0_hi)
        else:
            b = y_lo - 0.25
            eta = margin * 0.25
        if eta <= np.finfo(float).tiny or b == y_lo:
            raise BudgetInfeasible(f"stage {k}: separation {eta:.3e} below the zeta floor",
                                   stage="flatten")
        lo_all = min(ext[:, 0].min(), b) - 0.1
        hi_all = max(ext[:, 1].max(), b) + 0.1
        sep = build_separator(b, r[k], zeta, step_factory, BoxDomain([lo_all], [hi_all]), eta)
        parts.append(sep)
        info["stages"].append({"b": b, "eta": eta, "r": r[k]})
        ext = push(sep, ext)
    return compose_all(parts), info


def _separate_with_fallback(grid, step_factory):
    """Try the given step route, then the other one; their tails lose precision differently."""
    routes = [step_factory]
    strategy = getattr(step_factory, "strategy", None)
    if strategy in ("auto", "limit"):
        routes.append(make_step_factory(step_factory.activation, strategy="window"))
    elif strategy == "window":
        routes.append(make_step_factory(step_factory.activation, strategy="limit"))
    first = None
    for factory in routes:
        try:
            sep, info = _separate_2grid(grid, factory)
            info["route"] = factory.strategy if factory is not step_factory else strategy
            return sep, info
        except (BudgetInfeasible, StepBuildFailed) as exc:
            first = first or exc
    raise first


def _separable_offsets(net, axis_lo, n_samples=257):
    """Range of G on each interval, where net(x)_2 = x_2 + G(x_1)."""
    out = []
    for lo, hi in axis_lo:
        g = _first_coord(net, np.linspace(lo, hi, n_samples))[:, 1]
        out.append((float(g.min()), float(g.max())))
    return out


def flatten_2grid(grid: GridSpec, step_factory) -> Flattening:
    """Width-2 net mapping the n1*n2 cells of a 2-grid into disjoint intervals.

    Lower first-coordinate blocks receive larger shifts, so block 1 lands
    highest; inside a block the second-coordinate order is kept.
    """
    sep, info = _separate_with_fallback(grid, step_factory)
    act = step_factory.activation
    net = compose_all([sep, NarrowNet.affine([[0.0, 1.0]], [0.0], act)])
    offsets = _separable_offsets(sep, grid.axes[0])
    cell_map = {}
    for (i, j) in grid.cells():
        gmin, gmax = offsets[i - 1]
        lo, hi = grid.axes[1][j - 1]
        cell_map[(i, j)] = (lo + gmin, hi + gmax)
    info["offsets"] = offsets
    return Flattening(net, cell_map, info)


def flatten_dgrid(grid: GridSpec, step_factory) -> Flattening:
    """Width-d net mapping each cell of a d-grid into its own interval."""
    act = step_factory.activation
    d = grid.dim
    if d == 1:
        cell_map = {(j,): iv for j, iv in enumerate(grid.axes[0], start=1)}
        return Flattening(NarrowNet.identity(1, act, hidden=True), cell_map, {"stages": []})
    # labels[k] lists, per interval of the current axis k, the original index tuple(s)
    axes = [list(ax) for ax in grid.axes]
    labels = [[(j,) for j in range(1, len(ax) + 1)] for ax in axes]
    parts, stage_info = [], []
    while len(axes) > 1:
        k = len(axes)
        sub = GridSpec((tuple(axes[-2]), tuple(axes[-1])))
        sep, info = _separate_with_fallback(sub, step_factory)
        offsets = _separable_offsets(sep, axes[-2])
        merged = []
        for i, (gmin, gmax) in enumerate(offsets):
            for j, (lo, hi) in enumerate(axes[-1]):
                merged.append(((lo + gmin, hi + gmax), labels[-2][i] + labels[-1][j]))
        merged.sort(key=lambda t: t[0][0])
        for (l0, h0), (l1, h1) in zip([m[0] for m in merged], [m[0] for m in merged[1:]]):
            if not h0 < l1:
                raise BudgetInfeasible(f"flattened images overlap ({h0:.6g} >= {l1:.6g})",
                                       stage="flatten")
        drop = np.delete(np.eye(k), k - 2, axis=0)
        parts += [lift(sep, k, [k - 2, k - 1]), NarrowNet.affine(drop, np.zeros(k - 1), act)]
        axes = axes[:-2] + [[m[0] for m in merged]]
        labels = labels[:-2] + [[m[1] for m in merged]]
        stage_info.append(info)
    cell_map = {lab: iv for lab, iv in zip(labels[0], axes[0])}
    return Flattening(compose_all(parts), cell_map, {"stages": stage_info})


# ---------------------------------------------------------------------------
# piecewise constant


@dataclass
class PiecewiseConstant:
    net: NarrowNet
    info: dict

    def __call__(self, x):
        return self.net.forward(np.asarray(x, dtype=float).reshape(-1, 1))[:, 0]


def _shift_stage(step_factory, x_sep, shift, K_rho, eps, zeta):
    """x -> x + shift * rho(-(x - x_sep))."""
    act = step_factory.activation
    rho = _step(step_factory, K_rho[0], K_rho[1], eps, zeta)
    return compose_all([
        NarrowNet.affine([[1.0], [-1.0]], [0.0, x_sep], act),
        lift(rho, 2, [1]),
        NarrowNet.affine([[1.0, shift]], [0.0], act),
    ])


def _clamp_stage(step_factory, eta, eps_prime, K_rho, upper=False):
    """psi(x) = x + (2/3) rho*(-(x - eta/8)); mirrored as 1 - psi(1 - x) when ``upper``."""
    act = step_factory.activation
    delta = min(1.5 * eps_prime, 0.25)
    rho = _step(step_factory, K_rho[0], K_rho[1], delta, eta / 8)
    s = -1.0 if upper else 1.0
    o = 1.0 if upper else 0.0
    # u = o + s x is the mirrored variable; psi acts on u then maps back
    return compose_all([
        NarrowNet.affine([[s], [-s]], [o, eta / 8 - o], act),
        lift(rho, 2, [1]),
        NarrowNet.affine([[s, s * 2.0 / 3.0]], [o], act),
    ])


def _sample_K(K, intervals, n=10_000):
    pts = [np.linspace(K[0], K[1], n)]
    per = max(5, min(50, 20_000 // max(len(intervals), 1)))
    pts += [np.linspace(lo, hi, per) for lo, hi in intervals]
    return np.concatenate(pts)


def build_piecewise_constant(K, intervals, values, eps, step_factory, alpha_tries=6,
                             n_check=10_000) -> PiecewiseConstant:
    """Width-2 net K -> [0,1] within ``eps`` of ``values[k]`` on ``intervals[k]``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if len(intervals) != len(values) or not intervals:
        raise ValueError("need one value per interval")
    act = step_factory.activation
    order = np.argsort([lo for lo, _ in intervals])
    ivs = [tuple(map(float, intervals[i])) for i in order]
    cs = np.array([float(values[i]) for i in order])
    K = (float(K[0]), float(K[1]))
    if ivs[0][0] < K[0] or ivs[-1][1] > K[1]:
        raise ValueError("intervals must lie inside K")
    for (_, h0), (l1, _) in zip(ivs, ivs[1:]):
        if not h0 < l1:
            raise GapTooSmall(f"intervals touch or overlap at {h0:.6g}", stage="encoder")
    if np.any(cs < 0) or np.any(cs > 1):
        raise ValueError("values must lie in [0, 1]")

    c_snap = np.clip(cs, eps / 2, 1 - eps / 2)
    xi = float(min(np.min(c_snap), np.min(1 - c_snap)))
    eta = min(xi, eps)
    # shift K to start at 0
    off = K[0]
    ivs0 = [(lo - off, hi - off) for lo, hi in ivs]
    n = len(ivs0)
    gaps = [l1 - h0 for (_, h0), (l1, _) in zip(ivs0, ivs0[1:])]
    tail = max(min(gaps, default=K[1] - K[0]) / 2, 1e-3 * max(K[1] - K[0], 1e-12))
    x_sep = [0.5 * (h0 + l1) for (_, h0), (l1, _) in zip(ivs0, ivs0[1:])]
    x_sep.append(max(K[1] - off, ivs0[-1][1] + tail))  # x^(N) sits clear of the last interval
    x_N = x_sep[-1]
    gam = min([g / 2 for g in gaps] + [x_N - ivs0[-1][1]])
    if gam <= 0:
        raise GapTooSmall("no room between intervals and separators", stage="encoder")
    a = 1.01 * max(1.0, 4 * x_N / eta)
    if a > A_CAP:
        raise BudgetInfeasible(f"shift constant a={a:.3g} exceeds the cap {A_CAP:g}",
                               stage="encoder")
    b = x_N - float(c_snap.min())
    shifts = a * (c_snap + b)
    zeta = 0.5 * min(gam, xi)
    K_rho = (-(x_N + shifts.max()) - 1.0, x_N + 1.0)
    xs = _sample_K((K[0] - off, x_N), ivs0, n_check)

    # one batched pass per check; the nets are deep
    per = max(20, min(200, 20_000 // n))
    pts = np.concatenate([np.linspace(lo, hi, per) for lo, hi in ivs])
    want_snap, want = np.repeat(c_snap, per), np.repeat(cs, per)
    xs_in = xs + off
    probe = np.concatenate([xs_in, pts]).reshape(-1, 1)
    m = xs_in.size
    alpha = eta / (8 * float(np.sum(c_snap + b)))
    last = None
    for attempt in range(alpha_tries):
        stages = [NarrowNet.affine([[1.0]], [-off], act)]
        stages += [_shift_stage(step_factory, x_sep[i], shifts[i], K_rho, alpha, zeta)
                   for i in range(n)]
        stages.append(NarrowNet.affine([[1.0 / a]], [-b], act))
        h1 = compose_all(stages)
        vals = h1.forward(probe)[:, 0]
        dev = float(np.max(np.abs(vals[m:] - want_snap)))
        if dev <= eta / 2:
            break
        last = dev
        alpha /= 4
    else:
        raise VerificationFailed(f"shift stages miss the targets by {last:.3g} > {eta / 2:.3g}",
                                 stage="encoder")

    info = {"a": a, "b": b, "eta": eta, "xi": xi, "zeta": zeta, "alpha": alpha,
            "x_sep": [x + off for x in x_sep], "gamma": gam, "N_1": 0, "N_2": 0}
    parts = [h1]
    lo_val, hi_val = float(vals[:m].min()), float(vals[:m].max())
    span = max(hi_val, 1.0) - min(lo_val, 0.0) + 2.0
    for upper in (False, True):
        excess = (vals[:m].max() - 1.0) if upper else -vals[:m].min()
        if excess <= 0:
            continue
        n_iter = int(np.floor(2 * excess)) + 1  # N_1 / 2 > |excess|
        eps_prime = eta / (4 * n_iter) * 0.99
        Kc = (-(span + n_iter) - 1.0, span + 1.0)
        psi = _clamp_stage(step_factory, eta, eps_prime, Kc, upper=upper)
        parts += [psi] * n_iter
        for _ in range(n_iter):
            vals = psi.forward(vals.reshape(-1, 1))[:, 0]
        info["N_2" if upper else "N_1"] = n_iter
    net = compose_all(parts)
    pc = PiecewiseConstant(net, info)
    out = vals[:m]
    if out.min() < -1e-9 or out.max() > 1 + 1e-9:
        raise VerificationFailed(f"range [{out.min():.3g}, {out.max():.3g}] leaves [0, 1]",
                                 stage="encoder")
    worst = float(np.max(np.abs(vals[m:] - want)))
    if worst > eps:
        raise VerificationFailed(f"piecewise constant deviation {worst:.3g} > {eps:.3g}",
                                 stage="encoder")
    info["max_deviation"] = worst
    return pc


# ---------------------------------------------------------------------------
# encoder


@dataclass
class Encoder:
    net: NarrowNet
    flattening: Flattening
    piecewise: PiecewiseConstant
    info: dict


def build_encoder(partition: CellPartition, codes, step_factory, n_range=64) -> Encoder:
    """f_enc = f_2 o f_1 sending each cell T_nu into B_gamma(c_nu)."""
    idx = partition.indices()
    missing = [nu for nu in idx if nu not in codes]
    if missing:
        raise ValueError(f"no code point for cells {missing[:3]}")
    flat = flatten_dgrid(partition.grid(), step_factory)
    # K must hold the whole image of [0,1]^dx, not just the cells
    axes = [np.linspace(0, 1, n_range)] * partition.dx
    grid = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    img = flat.net.forward(grid)[:, 0]
    lo = min(img.min(), min(v[0] for v in flat.cell_map.values()))
    hi = max(img.max(), max(v[1] for v in flat.cell_map.values()))
    pad = 0.01 * max(hi - lo, 1e-9)
    keys = sorted(flat.cell_map, key=lambda k: flat.cell_map[k][0])
    pc = build_piecewise_constant((lo - pad, hi + pad), [flat.cell_map[k] for k in keys],
                                  [codes[k] for k in keys], partition.gamma, step_factory)
    net = compose_all([flat.net, pc.net])
    return Encoder(net, flat, pc, {"K": (lo - pad, hi + pad)})


def encoder_violation(enc: Encoder, partition: CellPartition, codes, samples=100, seed=0):
    """Largest |f_enc(x) - c_nu| over samples of each cell, minus gamma (<= 0 is good)."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for nu in partition.indices():
        box = partition.cell(nu)
        x = np.vstack([box.sample(samples, rng), box.lo, box.hi])
        y = enc.net.forward(x)[:, 0]
        worst = max(worst, float(np.max(np.abs(y - codes[nu]))) - partition.gamma)
    return worst
