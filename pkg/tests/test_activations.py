import numpy as np
import pytest

from squashnet.activations import (build_identity_approx, build_step_approx, default_diff_point,
                                   find_sigmoidal_window, get_activation, make_step_factory,
                                   names, parse_poly, poly, validate_window, verify_cond_id,
                                   verify_step_approx)
from squashnet.activations.squash import chain
from squashnet.errors import CertificateFailure, NonDifferentiable, ZeroDerivative


def test_catalog_values():
    assert get_activation("sigmoid")(0.0) == 0.5
    lr = get_activation("leaky_relu", alpha=0.3)
    assert lr(-2.0) == pytest.approx(-0.6)
    assert lr(2.0) == 2.0
    assert np.tanh(0.7) == get_activation("tanh")(0.7)
    assert "gelu" in names()


def test_unknown_activation():
    with pytest.raises(KeyError):
        get_activation("nope")


def test_parse_poly_ascending():
    assert parse_poly("x^3 + x") == [0.0, 1.0, 0.0, 1.0]
    assert parse_poly("1 - 2*x^2") == [1.0, 0.0, -2.0]


def test_cond_id_sigmoid_slope():
    dp = verify_cond_id(get_activation("sigmoid"), 0.0)
    assert dp.derivative == pytest.approx(0.25, abs=1e-8)


def test_cond_id_rejects_kink_and_flat_points():
    with pytest.raises(NonDifferentiable):
        verify_cond_id(get_activation("leaky_relu", alpha=0.3), 0.0)
    with pytest.raises(ZeroDerivative):
        verify_cond_id(poly([0, 0, 1]), 0.0)


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "gelu"])
def test_identity_approx_error(name):
    act = get_activation(name)
    ia = build_identity_approx(act, default_diff_point(act), (-1, 1), 1e-3)
    x = np.linspace(-1, 1, 10_000)
    assert np.max(np.abs(ia.net.scalar(x) - x)) <= 1e-3
    assert ia.net.width == 1


@pytest.mark.parametrize("name,params", [("tanh", {}), ("sin", {}),
                                         ("leaky_relu", {"alpha": 0.5})])
def test_step_approx_passes(name, params):
    sa = build_step_approx(get_activation(name, **params), (-2, 2), 0.05, 0.1)
    rep = verify_step_approx(sa)
    assert rep.passed and rep.in_range and rep.increasing
    assert sa.net.width == 1


def test_relu_rejected():
    with pytest.raises(CertificateFailure, match="v_minus"):
        build_step_approx(get_activation("relu"), (-2, 2), 0.05, 0.1)


def test_step_argument_checks():
    act = get_activation("sigmoid")
    with pytest.raises(ValueError):
        build_step_approx(act, (0.5, 2), 0.05, 0.1)
    with pytest.raises(ValueError):
        build_step_approx(act, (-2, 2), 0.7, 0.1)


def test_window_crossing_golden():
    rho = chain(poly([0, 0, 1]), [(1.0, 0.0), (-1.0, 1.0), (-1.0, 1.0)])
    c = validate_window(rho, 0.0, 1.0)
    assert c == pytest.approx((np.sqrt(5) - 1) / 2, abs=1e-12)
    a, b, c2 = find_sigmoidal_window(rho, (-0.2, 1.2))
    assert a < c2 < b


def test_step_factory_caches():
    sf = make_step_factory(get_activation("sigmoid"))
    assert sf((-1, 1), 0.01, 0.05) is sf((-1, 1), 0.01, 0.05)
    assert sf.activation.name == "sigmoid"
