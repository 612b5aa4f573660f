import math

import numpy as np
import pytest

from squashnet.activations import get_activation
from squashnet.approximator import (CSV_COLUMNS, BuildParams, TargetFunction,
                                    build_approximator, check_params, delta_bound, gamma_bound,
                                    measure_lp_error, run_case, select_parameters)
from squashnet.errors import InfeasibleTolerance
from squashnet.netir import ModulusTable, NarrowNet

RADII = np.geomspace(1e-9, 2.0, 400)


def lipschitz(L=1.0):
    return ModulusTable.from_function(lambda r: L * r, RADII)


def test_delta_bound_p1():
    assert delta_bound(0.3, 1, 1) == pytest.approx(0.3 / 9)


def test_select_lipschitz_N():
    pr = select_parameters(0.3, 2, 2, 2, lipschitz(), lipschitz(0.1))
    assert pr.delta <= delta_bound(0.3, 2, 2)
    assert pr.gamma <= gamma_bound(0.3, 2, 2, 2)
    expect = math.ceil((1 - 2 * pr.gamma) * math.sqrt(2) * 3 ** 1.5 / 0.3)
    # table lookup is conservative, so N may be a little larger than the plug-in value
    assert expect <= pr.N <= expect + 2
    assert all(check_params(pr, lipschitz(), lipschitz(0.1)).values())


def test_select_large_eps_gives_one_cell():
    pr = select_parameters(100.0, 1, 1, 1, lipschitz(), lipschitz())
    assert pr.N == 1


def test_select_infeasible():
    flat = ModulusTable(RADII, np.ones_like(RADII))
    with pytest.raises(InfeasibleTolerance):
        select_parameters(0.3, 2, 1, 1, flat, lipschitz())


def test_check_params_flags_violation():
    pr = BuildParams(0.3, 1.0, 1, 1, 0.5, 0.01, 10)
    assert check_params(pr, lipschitz(), lipschitz())["delta"] is False


def test_lp_error_oracles():
    one = TargetFunction(1, 1, lambda x: np.ones((len(x), 1)))
    zero = NarrowNet.affine([[0.0]], [0.0], get_activation("sigmoid"))
    rep = measure_lp_error(zero, one, 2, n=10_000)
    assert rep.lp_estimate == pytest.approx(1.0, abs=0.01)
    ident = TargetFunction(1, 1, lambda x: x)
    same = NarrowNet.affine([[1.0]], [0.0], get_activation("sigmoid"))
    assert measure_lp_error(same, ident, 2, n=10_000).lp_estimate <= 1e-9
    with pytest.raises(ValueError):
        measure_lp_error(same, ident, 2, n=100)


def test_lp_error_seeds_agree():
    f = TargetFunction(1, 1, lambda x: x ** 2)
    g = NarrowNet.affine([[1.0]], [0.0], get_activation("sigmoid"))
    a = measure_lp_error(g, f, 2, n=20_000, seed=1)
    b = measure_lp_error(g, f, 2, n=20_000, seed=2)
    assert abs(a.lp_estimate - b.lp_estimate) <= 3 * max(a.ci_half_width, b.ci_half_width)


def test_target_range_check():
    f = TargetFunction(1, 1, lambda x: 2 * x)
    with pytest.raises(ValueError):
        f(np.array([[0.9]]))


def test_identity_target_end_to_end():
    f = TargetFunction(1, 1, lambda x: x, "identity")
    ap, err, row = run_case(f, get_activation("sigmoid"), 0.3, 1, n=10_000)
    assert ap.net.width == 2 and ap.net.is_pure
    assert err.lp_estimate <= 0.3
    assert tuple(row) == CSV_COLUMNS
    assert err.off_cell_fraction <= 2 * ap.params.gamma + 0.01
    assert all(ap.report["checks"].values())


def test_tiny_eps_is_rejected_quickly():
    f = TargetFunction(1, 1, lambda x: x)
    with pytest.raises(InfeasibleTolerance):
        build_approximator(f, get_activation("sigmoid"), 1e-9, 2)
