import numpy as np
import pytest

from squashnet.activations import get_activation, make_step_factory
from squashnet.decoder import (build_filling_curve, build_indicator, containment_violation,
                               coverage_radius, intervals_disjoint, pick_code_points)
from squashnet.errors import BandNotFound, GapTooSmall


@pytest.fixture(scope="module")
def sf():
    return make_step_factory(get_activation("tanh"))


def test_indicator_alternates(sf):
    z = [0.2, 0.5, 0.8]
    net = build_indicator(sf, z, 0.05, 4)
    x = np.array([0.1, 0.35, 0.65, 0.95])
    y = net.forward(np.stack([x, np.zeros_like(x)], axis=1)) if net.input_dim == 2 else \
        net.forward(x.reshape(-1, 1))
    assert np.allclose(y[:, 0], x)
    high = y[:, 1] > 0.5
    # switches at every point of z
    assert list(high[1:] != high[:-1]) == [True, True, True]


def test_indicator_gap_check(sf):
    with pytest.raises(GapTooSmall):
        build_indicator(sf, [0.4, 0.5], 0.06, 4)


def test_curve_1d_is_identity(sf):
    c = build_filling_curve(5, 1, sf)
    t = np.linspace(0, 1, 11).reshape(-1, 1)
    assert np.allclose(c.net.forward(t), t)
    assert len(c.tracked) == 5


def test_curve_2d_properties(sf):
    c = build_filling_curve(3, 2, sf)
    assert c.net.width == 2 and c.d == 2
    assert len(c.tracked) == 9
    assert intervals_disjoint(c.tracked)
    assert containment_violation(c) == 0.0
    assert coverage_radius(c, n_samples=20_000) <= 1 / 3 + 0.02


def test_code_points(sf):
    c = build_filling_curve(3, 2, sf)
    targets = {(1,): [0.1, 0.9], (2,): [0.5, 0.5]}
    cps = pick_code_points(c, targets, 1 / 3)
    for cp in cps:
        y = c.net.forward(np.array([[cp.c]]))[0]
        assert np.max(np.abs(y - cp.target)) <= 1 / 3
    with pytest.raises(ValueError):
        pick_code_points(c, targets, 0.1)


def test_fine_curves_hit_float_resolution():
    # nested indicator sweeps shrink super-exponentially with N
    sf = make_step_factory(get_activation("sigmoid"))
    with pytest.raises(BandNotFound):
        build_filling_curve(16, 2, sf)
