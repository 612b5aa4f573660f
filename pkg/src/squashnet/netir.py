"""Narrow feedforward networks with mixed activation/identity neurons."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (ActivationMismatch, BudgetInfeasible, DimensionMismatch, IndexOutOfRange,
                     SchemaError, VerificationFailed)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _frozen(np.atleast_2d(self.weights))
        b = _frozen(np.atleast_1d(self.bias))
        if w.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"weights {w.shape} and bias {b.shape} disagree")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("affine layer entries must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def __call__(self, x):
        return x @ self.weights.T + self.bias

    def then(self, other: "AffineLayer") -> "AffineLayer":
        """The affine map ``other(self(x))`` as a single layer."""
        return AffineLayer(other.weights @ self.weights, other.weights @ self.bias + other.bias)


@dataclass(frozen=True)
class BoxDomain:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(np.atleast_1d(self.lo)), _frozen(np.atleast_1d(self.hi))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must have equal shape and lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, dim, lo=0.0, hi=1.0):
        return cls(np.full(dim, lo), np.full(dim, hi))

    @property
    def dim(self):
        return self.lo.size

    def sample(self, n, rng):
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def grid(self, n_per_axis):
        axes = [np.linspace(a, b, n_per_axis) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


class NarrowNet:
    """``t_L o s_{L-1} o t_{L-1} o ... o s_1 o t_1`` with per-neuron tags.

    ``tags[l][i]`` is True when hidden neuron i of layer l applies the
    activation and False when it passes its input through unchanged.
    """

    def __init__(self, layers: Sequence[AffineLayer], tags: Sequence[np.ndarray], activation):
        layers = tuple(layers)
        tags = tuple(np.array(t, dtype=bool) for t in tags)
        if len(layers) != len(tags) + 1:
            raise DimensionMismatch("need exactly one more affine layer than tag vectors")
        for t in tags:
            t.setflags(write=False)
        for i, t in enumerate(tags):
            if layers[i].out_dim != t.size or layers[i + 1].in_dim != t.size:
                raise DimensionMismatch(f"dimension chain broken at hidden layer {i}")
        self.layers = layers
        self.tags = tags
        self.activation = activation

    # construction helpers

    @classmethod
    def affine(cls, weights, bias, activation):
        return cls([AffineLayer(weights, bias)], [], activation)

    @classmethod
    def identity(cls, dim, activation, hidden=False):
        """Exact identity map; with ``hidden`` it routes through one identity-tagged layer."""
        eye = AffineLayer(np.eye(dim), np.zeros(dim))
        if hidden:
            return cls([eye, eye], [np.zeros(dim, bool)], activation)
        return cls([eye], [], activation)

    @classmethod
    def scalar_chain(cls, pre, post, activation, depth=1):
        """Width-1 net ``post(s(...s(pre(x))))`` from scalar (weight, bias) pairs."""
        layers = [AffineLayer([[pre[0]]], [pre[1]])]
        layers += [AffineLayer([[1.0]], [0.0]) for _ in range(depth - 1)]
        layers.append(AffineLayer([[post[0]]], [post[1]]))
        return cls(layers, [np.ones(1, bool)] * depth, activation)

    # shape

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def width(self):
        return max((t.size for t in self.tags), default=0)

    @property
    def depth(self):
        """Number of hidden layers."""
        return len(self.tags)

    @property
    def n_identity(self):
        return int(sum((~t).sum() for t in self.tags))

    @property
    def is_pure(self):
        return self.n_identity == 0

    def __repr__(self):
        return (f"NarrowNet({self.input_dim}->{self.output_dim}, width={self.width}, "
                f"depth={self.depth}, identity={self.n_identity}, act={self.activation.name})")

    # evaluation

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        d = self.input_dim
        if x.ndim == 0 and d == 1:
            return x.reshape(1, 1), True
        if x.ndim == 1 and x.size == d:
            return x.reshape(1, d), True
        if x.ndim == 1 and d == 1:
            return x.reshape(-1, 1), False
        if x.ndim == 2 and x.shape[1] == d:
            return x, False
        raise DimensionMismatch(f"expected input of dimension {d}, got shape {x.shape}")

    def forward(self, x, trace=False):
        """Evaluate on one point or a batch (rows are points).

        With ``trace`` also return the pre-activation values of every hidden layer.
        """
        X, single = self._check_input(x)
        act = self.activation
        pre = []
        # neurons along rows: contiguous per-neuron vectors are much faster for narrow nets
        H = np.ascontiguousarray(X.T, dtype=float)
        for layer, tag in zip(self.layers[:-1], self.tags):
            Z = layer.weights @ H + layer.bias[:, None]
            if trace:
                pre.append(Z.T.copy())
            if tag.all():
                H = act(Z)
            elif tag.any():
                Z[tag] = act(Z[tag])
                H = Z
            else:
                H = Z
        last = self.layers[-1]
        out = (last.weights @ H + last.bias[:, None]).T
        if single:
            out = out[0]
        return (out, pre) if trace else out

    __call__ = forward

    def scalar(self, x):
        """Evaluate a 1->1 net on an array of scalars, returning the same shape."""
        x = np.asarray(x, dtype=float)
        return self.forward(x.reshape(-1, 1))[:, 0].reshape(x.shape)

    # serialization

    def to_dict(self):
        layers = []
        for i, layer in enumerate(self.layers):
            d = {"weights": layer.weights.tolist(), "bias": layer.bias.tolist()}
            if i < len(self.tags):
                d["tags"] = ["sigma" if t else "id" for t in self.tags[i]]
            layers.append(d)
        params = {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in self.activation.params.items()}
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "activation": {"name": self.activation.name, "params": params},
                "layers": layers}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d, activation=None):
        from .activations.catalog import get_activation

        try:
            if activation is None:
                a = d["activation"]
                activation = get_activation(a["name"], **a.get("params", {}))
            layers, tags = [], []
            for i, ld in enumerate(d["layers"]):
                layers.append(AffineLayer(np.array(ld["weights"], dtype=float).reshape(
                    len(ld["bias"]), -1), ld["bias"]))
                if i < len(d["layers"]) - 1:
                    t = ld["tags"]
                    if any(s not in ("sigma", "id") for s in t):
                        raise SchemaError("tags must be 'sigma' or 'id'")
                    tags.append([s == "sigma" for s in t])
            net = cls(layers, tags, activation)
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed network document: {exc}") from exc
        if net.input_dim != d["input_dim"] or net.output_dim != d["output_dim"]:
            raise SchemaError("declared dimensions disagree with layers")
        return net

    @classmethod
    def from_json(cls, text, activation=None):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not JSON: {exc}") from exc
        return cls.from_dict(d, activation)


def _check_same_activation(a, b):
    if a.activation != b.activation:
        raise ActivationMismatch(
            f"cannot combine {a.activation.name} and {b.activation.name} networks")


def compose(first: NarrowNet, second: NarrowNet) -> NarrowNet:
    """``second o first`` with the seam affine layers fused."""
    return compose_all([first, second])


def compose_all(nets: Sequence[NarrowNet]) -> NarrowNet:
    """Compose nets applied left to right, fusing every seam."""
    nets = list(nets)
    if not nets:
        raise ValueError("nothing to compose")
    layers = list(nets[0].layers)
    tags = list(nets[0].tags)
    for prev, net in zip(nets, nets[1:]):
        if prev.output_dim != net.input_dim:
            raise DimensionMismatch(
                f"output dim {prev.output_dim} does not feed input dim {net.input_dim}")
        _check_same_activation(prev, net)
        layers[-1] = layers[-1].then(net.layers[0])
        layers.extend(net.layers[1:])
        tags.extend(net.tags)
    return NarrowNet(layers, tags, nets[0].activation)


def affine_net(weights, bias, activation) -> NarrowNet:
    return NarrowNet.affine(weights, bias, activation)


def _pad_depth(net: NarrowNet, depth: int) -> NarrowNet:
    """Append identity-tagged layers so the net has exactly ``depth`` hidden layers."""
    extra = depth - net.depth
    if extra <= 0:
        return net
    d = net.output_dim
    eye = AffineLayer(np.eye(d), np.zeros(d))
    layers = list(net.layers) + [eye] * extra
    tags = list(net.tags) + [np.zeros(d, bool)] * extra
    return NarrowNet(layers, tags, net.activation)


def lift(sub: NarrowNet, total_dim: int, coords: Sequence[int]) -> NarrowNet:
    """Apply ``sub`` to the listed coordinates and carry the rest through identity chains.

    Coordinates are 0-based.  ``sub`` must map R^k to R^k with k = len(coords).
    """
    coords = [int(c) for c in coords]
    k = len(coords)
    if len(set(coords)) != k or any(c < 0 or c >= total_dim for c in coords):
        raise IndexOutOfRange(f"coords {coords} invalid for dimension {total_dim}")
    if sub.input_dim != k or sub.output_dim != k:
        raise DimensionMismatch(f"sub maps R^{sub.input_dim}->R^{sub.output_dim}, need R^{k}")
    if k == total_dim and coords == list(range(total_dim)):
        return sub
    rest = [i for i in range(total_dim) if i not in coords]
    m = len(rest)
    if sub.depth == 0:
        W = np.eye(total_dim)
        b = np.zeros(total_dim)
        W[np.ix_(coords, coords)] = sub.layers[0].weights
        b[coords] = sub.layers[0].bias
        return NarrowNet.affine(W, b, sub.activation)
    layers, tags = [], []
    L = len(sub.layers)
    for i, layer in enumerate(sub.layers):
        o, n = layer.out_dim, layer.in_dim
        if i == 0:
            W = np.zeros((o + m, total_dim))
            W[:o, coords] = layer.weights
            W[o + np.arange(m), rest] = 1.0
            b = np.concatenate([layer.bias, np.zeros(m)])
        elif i == L - 1:
            W = np.zeros((total_dim, n + m))
            W[coords, :n] = layer.weights
            W[rest, n + np.arange(m)] = 1.0
            b = np.zeros(total_dim)
            b[coords] = layer.bias
        else:
            W = np.zeros((o + m, n + m))
            W[:o, :n] = layer.weights
            W[o:, n:] = np.eye(m)
            b = np.concatenate([layer.bias, np.zeros(m)])
        layers.append(AffineLayer(W, b))
        if i < L - 1:
            tags.append(np.concatenate([sub.tags[i], np.zeros(m, bool)]))
    return NarrowNet(layers, tags, sub.activation)


def parallel(nets: Sequence[NarrowNet]) -> NarrowNet:
    """Block-diagonal stacking; shorter nets are padded with identity layers."""
    depth = max(n.depth for n in nets)
    nets = [_pad_depth(n, depth) for n in nets]
    act = nets[0].activation
    for n in nets[1:]:
        _check_same_activation(nets[0], n)
    layers, tags = [], []
    for i in range(depth + 1):
        blocks = [n.layers[i] for n in nets]
        W = np.zeros((sum(b.out_dim for b in blocks), sum(b.in_dim for b in blocks)))
        r = c = 0
        for blk in blocks:
            W[r:r + blk.out_dim, c:c + blk.in_dim] = blk.weights
            r += blk.out_dim
            c += blk.in_dim
        layers.append(AffineLayer(W, np.concatenate([b.bias for b in blocks])))
        if i < depth:
            tags.append(np.concatenate([n.tags[i] for n in nets]))
    return NarrowNet(layers, tags, act)


# ---------------------------------------------------------------------------
# moduli of continuity


@dataclass(frozen=True)
class ModulusTable:
    """Non-decreasing step function r -> omega(r) sampled on a ladder of radii.

    Evaluation is conservative: ``omega(r)`` is the tabulated value at the
    smallest ladder radius that is >= r.
    """

    radii: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        r = _frozen(self.radii)
        v = _frozen(np.maximum.accumulate(np.asarray(self.values, dtype=float)))
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "values", v)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(self.radii, r, side="left")
        out = np.where(idx < self.radii.size, self.values[np.minimum(idx, self.radii.size - 1)],
                       np.inf)
        out = np.where(r <= 0, 0.0, out)
        return out if out.ndim else float(out)

    def inverse(self, bound):
        """Largest ladder radius whose tabulated value is <= bound (0 if none)."""
        ok = np.nonzero(self.values <= bound)[0]
        return float(self.radii[ok[-1]]) if ok.size else 0.0

    @classmethod
    def from_function(cls, omega, radii):
        radii = np.asarray(radii, dtype=float)
        return cls(radii, np.array([omega(r) for r in radii]))


def default_radii(diameter, n=60, smallest=1e-9):
    return np.geomspace(smallest * diameter, diameter, n)


def _vector_norm(v, norm):
    if norm == np.inf:
        return np.max(np.abs(v), axis=1)
    return np.sum(np.abs(v) ** norm, axis=1) ** (1.0 / norm)


def estimate_modulus(fmap, box: BoxDomain, n_pairs=2000, radii=None, norm=np.inf,
                     safety=1.5, seed=0) -> ModulusTable:
    """Empirical modulus of continuity from sampled pairs at a ladder of radii.

    ``fmap`` is a NarrowNet or any callable on batches.  Pairs are separated
    by exactly r in the chosen norm (half of them along random box corners),
    reflected back into the box when they leave it.
    """
    if n_pairs < 1000:
        raise ValueError("n_pairs must be at least 1000")
    f = fmap.forward if isinstance(fmap, NarrowNet) else fmap
    rng = np.random.default_rng(seed)
    d = box.dim
    width = box.hi - box.lo
    diam = float(_vector_norm(width[None, :], norm)[0]) or 1.0
    if radii is None:
        radii = default_radii(diam)
    radii = np.asarray(radii, dtype=float)
    values = np.zeros(radii.size)
    for k, r in enumerate(radii):
        x = box.sample(n_pairs, rng)
        u = rng.standard_normal((n_pairs, d))
        half = n_pairs // 2
        u[:half] = rng.choice([-1.0, 1.0], size=(half, d))
        u /= _vector_norm(u, norm)[:, None]
        y = x + r * u
        out = (y < box.lo) | (y > box.hi)
        y = np.where(out, x - r * u, y)
        y = np.clip(y, box.lo, box.hi)
        diff = np.asarray(f(y)) - np.asarray(f(x))
        diff = diff.reshape(n_pairs, -1)
        values[k] = safety * float(np.max(_vector_norm(diff, norm)))
    return ModulusTable(radii, values)


# ---------------------------------------------------------------------------
# identity elimination


@dataclass
class EliminationReport:
    sup_error: float
    layer_budgets: dict
    padding: float
    replaced: int
    attempts: int


def _range_box(values, pad):
    lo, hi = values.min(axis=0), values.max(axis=0)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    half = np.maximum(half * pad, 1e-6 * np.maximum(1.0, np.abs(mid)))
    return mid - half, mid + half


LINEAR_STEP = 1e-2


def _act_slope(act, z):
    """Conservative |sigma'| from one-sided differences (safe at kinks)."""
    h = 1e-6 * np.maximum(1.0, np.abs(z))
    f0 = act(z)
    return np.maximum(np.abs(act(z + h) - f0), np.abs(f0 - act(z - h))) / h


def _hidden_states(net, X, start, stop):
    """Pre-activations (rows are points) of hidden layers start..stop-1, given the
    input to layer ``start``; also returns the state after layer stop-1."""
    out = []
    H = np.ascontiguousarray(X.T)
    for l in range(start, stop):
        layer, tag = net.layers[l], net.tags[l]
        Z = layer.weights @ H + layer.bias[:, None]
        out.append(Z.T.copy())
        Z[tag] = net.activation(Z[tag])
        H = Z
    return out, H.T


def _layer_stats(net, X):
    """Per hidden layer: (min, max) of the pre-activations over the rows of X."""
    stats = []
    H = np.ascontiguousarray(X.T)
    for layer, tag in zip(net.layers[:-1], net.tags):
        Z = layer.weights @ H + layer.bias[:, None]
        stats.append((Z.min(axis=1), Z.max(axis=1)))
        Z[tag] = net.activation(Z[tag])
        H = Z
    return stats


def _sensitivities(net, X, segment=256):
    """For each hidden layer l, max over samples of the output sup-norm change per unit
    perturbation of every identity neuron of layer l (first order, backward pass).

    Activations are recomputed segment by segment from stored checkpoints, so
    memory grows with depth / segment rather than depth.
    """
    H = len(net.tags)
    n = X.shape[0]
    starts = list(range(0, H, segment))
    checkpoints = []
    for a in starts:
        checkpoints.append(X)
        _, X = _hidden_states(net, X, a, min(a + segment, H))
    # J has shape (n, out_dim, state_dim): d output / d post-activation state of layer l
    J = np.broadcast_to(np.asarray(net.layers[-1].weights), (n,) + net.layers[-1].weights.shape)
    sens = {}
    for a, Xa in zip(reversed(starts), reversed(checkpoints)):
        pre, _ = _hidden_states(net, Xa, a, min(a + segment, H))
        for l in range(min(a + segment, H) - 1, a - 1, -1):
            Z = pre[l - a]
            idm = ~net.tags[l]
            if idm.any():
                sens[l] = float(np.max(np.sum(np.abs(J[:, :, idm]), axis=2)))
            d = np.ones_like(Z)
            d[:, net.tags[l]] = _act_slope(net.activation, Z[:, net.tags[l]])
            J = np.einsum("nos,sk->nok", J * d[:, None, :], np.asarray(net.layers[l].weights))
    return sens


def eliminate_identity(net: NarrowNet, K: BoxDomain, eps: float, id_factory: Callable,
                       n_samples=4000, padding=1.2, seed=0, max_attempts=6,
                       return_report=False, sampler: Optional[Callable] = None):
    """Replace every identity neuron by an affine-activation-affine sandwich.

    ``id_factory(activation, (lo, hi), delta)`` must return an object with a
    ``net`` attribute (a width-1 net approximating the identity on [lo, hi]
    within delta) whose first and last affine layers are scalar.

    The sup error is controlled on samples of K, or on ``sampler(n, rng)``
    points when given; neuron ranges always cover samples of all of K.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if net.n_identity == 0:
        rep = EliminationReport(0.0, {}, padding, 0, 0)
        return (net, rep) if return_report else net
    rng = np.random.default_rng(seed)
    box = np.concatenate([K.sample(n_samples, rng), K.grid(2) if K.dim <= 10 else K.lo[None]])

    def draw(n):
        return K.sample(n, rng) if sampler is None else np.asarray(sampler(n, rng), float)

    X = box if sampler is None else draw(n_samples)
    reference = net.forward(X)
    stats_x = _layer_stats(net, X)
    stats_box = _layer_stats(net, box) if sampler is not None else stats_x
    ranges = [np.stack([np.minimum(a[0], b[0]), np.maximum(a[1], b[1])])
              for a, b in zip(stats_x, stats_box)]
    id_layers = [l for l, t in enumerate(net.tags) if (~t).any()]
    share = eps / len(id_layers)

    sens = _sensitivities(net, X)
    budgets = {}
    for l in id_layers:
        idm = ~net.tags[l]
        # identity neurons pass their pre-activation through unchanged
        lo, hi = stats_x[l]
        scale = max(1.0, float(np.max(np.maximum(np.abs(lo[idm]), np.abs(hi[idm])))))
        # keep the next pre-activations inside the range where the first-order model holds
        fan = float(np.max(np.sum(np.abs(net.layers[l + 1].weights[:, idm]), axis=1)))
        delta = min(scale, share / (1.5 * max(sens[l], 1e-300)), LINEAR_STEP / max(fan, 1e-300))
        if delta <= 1e-15 * scale:
            raise BudgetInfeasible(f"identity budget underflows at hidden layer {l}",
                                   stage="eliminate_identity")
        budgets[l] = delta

    err = np.inf
    for attempt in range(1, max_attempts + 1):
        g = _replace_identities(net, ranges, budgets, padding, id_factory)
        err = float(np.max(np.abs(g.forward(X) - reference)))
        if err <= eps:
            # independent check on fresh points
            Y = draw(n_samples)
            err = max(err, float(np.max(np.abs(g.forward(Y) - net.forward(Y)))))
            if err <= eps:
                rep = EliminationReport(err, budgets, padding, net.n_identity, attempt)
                return (g, rep) if return_report else g
        budgets = {l: d / 4 for l, d in budgets.items()}
    raise VerificationFailed(f"identity elimination error {err:.3g} exceeds {eps:.3g}",
                             stage="eliminate_identity")


def _replace_identities(net, pre, budgets, padding, id_factory):
    layers = [AffineLayer(l.weights.copy(), l.bias.copy()) for l in net.layers]
    Ws = [np.array(l.weights) for l in layers]
    bs = [np.array(l.bias) for l in layers]
    tags = [t.copy() for t in net.tags]
    for l, delta in budgets.items():
        lo, hi = _range_box(pre[l], padding)
        for i in np.nonzero(~net.tags[l])[0]:
            ia = id_factory(net.activation, (float(lo[i]), float(hi[i])), delta)
            sub = ia.net
            if sub.depth != 1:
                raise ValueError("identity approximator must have one hidden layer")
            (w1,), (b1,) = sub.layers[0].weights[:, 0], sub.layers[0].bias
            (w2,), (b2,) = sub.layers[1].weights[0], sub.layers[1].bias
            # fuse h1 into the row feeding neuron i and h2 into the column reading it
            Ws[l][i] = w1 * Ws[l][i]
            bs[l][i] = w1 * bs[l][i] + b1
            bs[l + 1] = bs[l + 1] + Ws[l + 1][:, i] * b2
            Ws[l + 1][:, i] = Ws[l + 1][:, i] * w2
            tags[l][i] = True
    new_layers = [AffineLayer(W, b) for W, b in zip(Ws, bs)]
    return NarrowNet(new_layers, tags, net.activation)
