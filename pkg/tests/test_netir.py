import json

import numpy as np
import pytest

from squashnet.activations import get_activation, identity_factory
from squashnet.errors import DimensionMismatch, SchemaError
from squashnet.netir import (AffineLayer, BoxDomain, ModulusTable, NarrowNet, compose,
                             compose_all, eliminate_identity, estimate_modulus, lift, parallel)

SIG = get_activation("sigmoid")


def _mixed():
    W1 = np.array([[1.0, -0.5], [0.3, 2.0]])
    W2 = np.array([[0.7, 0.1], [-1.0, 0.4]])
    return NarrowNet([AffineLayer(W1, [0.1, -0.2]), AffineLayer(W2, [0.0, 0.3]),
                      AffineLayer(np.eye(2), [0.0, 0.0])],
                     [[True, False], [False, True]], SIG)


def test_forward_matches_manual():
    net = _mixed()
    x = np.array([[0.2, 0.9]])
    h = np.array([[0.1, -0.2]]) + x @ np.array([[1.0, -0.5], [0.3, 2.0]]).T
    h[:, 0] = SIG(h[:, 0])
    h = h @ np.array([[0.7, 0.1], [-1.0, 0.4]]).T + [0.0, 0.3]
    h[:, 1] = SIG(h[:, 1])
    assert np.allclose(net.forward(x), h)
    assert net.width == 2 and net.depth == 2 and net.n_identity == 2


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        NarrowNet([AffineLayer(np.eye(2), [0, 0]), AffineLayer(np.eye(3), [0, 0, 0])],
                  [[True, True]], SIG)
    with pytest.raises(DimensionMismatch):
        _mixed().forward(np.zeros((1, 3)))


def test_json_round_trip_exact():
    net = _mixed()
    back = NarrowNet.from_json(net.to_json())
    x = np.random.default_rng(0).random((50, 2))
    assert np.array_equal(back.forward(x), net.forward(x))
    doc = json.loads(net.to_json())
    assert doc["layers"][0]["tags"] == ["sigma", "id"]
    assert "tags" not in doc["layers"][-1]


def test_json_rejects_garbage():
    with pytest.raises(SchemaError):
        NarrowNet.from_json("{")
    doc = _mixed().to_dict()
    doc["layers"][0]["tags"] = ["sigma", "relu"]
    with pytest.raises(SchemaError):
        NarrowNet.from_dict(doc)
    doc = _mixed().to_dict()
    doc["input_dim"] = 5
    with pytest.raises(SchemaError):
        NarrowNet.from_dict(doc)


def test_compose_and_lift():
    a = _mixed()
    b = NarrowNet.affine([[2.0, 0.0], [0.0, -1.0]], [1.0, 0.0], SIG)
    x = np.random.default_rng(1).random((20, 2))
    assert np.allclose(compose(a, b).forward(x), b.forward(a.forward(x)))
    assert np.allclose(compose_all([a, b, a]).forward(x), a.forward(b.forward(a.forward(x))))
    sub = NarrowNet.scalar_chain((1.0, 0.0), (1.0, 0.0), SIG)
    up = lift(sub, 3, [1])
    y = up.forward(np.hstack([x, x[:, :1]]))
    assert np.allclose(y[:, 0], x[:, 0]) and np.allclose(y[:, 2], x[:, 0])
    assert np.allclose(y[:, 1], SIG(x[:, 1]))
    assert up.width == 3


def test_parallel_pads_depth():
    s = NarrowNet.scalar_chain((1.0, 0.0), (1.0, 0.0), SIG, depth=3)
    t = NarrowNet.affine([[2.0]], [0.0], SIG)
    p = parallel([s, t])
    x = np.array([[0.3, 0.4]])
    assert np.allclose(p.forward(x), [[s.scalar(np.array([0.3]))[0], 0.8]])


def test_modulus_linear():
    f = NarrowNet.affine([[2.0]], [0.0], SIG)
    tab = estimate_modulus(f, BoxDomain.cube(1), radii=[0.01, 0.1], safety=1.0)
    assert tab(0.1) == pytest.approx(0.2)
    assert tab(0.0) == 0.0
    assert tab.inverse(0.05) == 0.01


def test_modulus_table_monotone():
    t = ModulusTable([0.1, 0.2, 0.3], [0.5, 0.2, 0.9])
    assert list(t.values) == [0.5, 0.5, 0.9]
    assert t(0.25) == 0.9 and t(1.0) == np.inf


def test_eliminate_identity():
    net = _mixed()
    K = BoxDomain.cube(2)
    pure, rep = eliminate_identity(net, K, 1e-3, identity_factory, return_report=True)
    assert pure.is_pure and pure.width == net.width
    x = np.random.default_rng(3).random((5000, 2))
    assert np.max(np.abs(pure.forward(x) - net.forward(x))) <= 1e-3
    assert rep.replaced == 2
