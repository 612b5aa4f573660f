"""Acceptance criteria 1-10; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest
import sympy
from scipy.optimize import brentq

from conftest import record
from squashnet.activations import (build_identity_approx, build_step_approx, default_diff_point,
                                   get_activation, identity_factory, make_step_factory, poly,
                                   validate_window, verify_step_approx)
from squashnet.activations.squash import chain
from squashnet.approximator import (CSV_COLUMNS, TargetFunction, check_params,
                                    format_csv_row, run_case, select_parameters)
from squashnet.decoder import (build_filling_curve, containment_violation, coverage_radius,
                               intervals_disjoint)
from squashnet.encoder import CellPartition, GridSpec, build_piecewise_constant, flatten_dgrid
from squashnet.errors import CertificateFailure, SquashError
from squashnet.netir import BoxDomain, ModulusTable, eliminate_identity


def _lrelu():
    return get_activation("leaky_relu", alpha=0.3)


def test_criterion_01_squashability():
    suite = [get_activation("sigmoid"), get_activation("tanh"), get_activation("sin"),
             get_activation("leaky_relu", alpha=0.3), get_activation("leaky_relu", alpha=0.5),
             get_activation("hardswish"), poly([0, 0, 1]), poly([0, 1, 0, 1]),
             get_activation("softplus", alpha=1.0)]
    t0 = time.perf_counter()
    failures = []
    for act in suite:
        try:
            sa = build_step_approx(act, (-2, 2), 0.05, 0.1)
            rep = verify_step_approx(sa, grid_n=10_000)
            if not rep.passed:
                failures.append(f"{act.name}{act.params}: {rep}")
        except SquashError as exc:
            failures.append(f"{act.name}{act.params}: {exc}")
    elapsed = time.perf_counter() - t0
    try:
        build_step_approx(get_activation("relu"), (-2, 2), 0.05, 0.1)
        relu_rejected = False
    except CertificateFailure as exc:
        relu_rejected = "v_minus*v_plus = 0" in str(exc)
    ok = not failures and elapsed < 10 and relu_rejected
    record(1, ok, f"{len(suite) - len(failures)}/{len(suite)} certified in {elapsed:.2f}s, "
                  f"relu rejected={relu_rejected} {failures}")
    assert ok


def test_criterion_02_identity():
    x = np.linspace(-1, 1, 10_000)
    t0 = time.perf_counter()
    errs = {}
    for name in ("sigmoid", "tanh", "gelu"):
        act = get_activation(name)
        ia = build_identity_approx(act, default_diff_point(act), (-1, 1), 1e-3)
        errs[name] = float(np.max(np.abs(ia.net.scalar(x) - x)))
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-3 and elapsed < 1
    record(2, ok, f"sup errors {errs} in {elapsed:.3f}s")
    assert ok


def test_criterion_03_window_oracle():
    rho = chain(poly([0, 0, 1]), [(1.0, 0.0), (-1.0, 1.0), (-1.0, 1.0)])
    c = validate_window(rho, 0.0, 1.0)
    # independent oracle: the chord of [0, 1] is y = x
    oracle = brentq(lambda t: 1 - (1 - t * t) ** 2 - t, 0.3, 0.9, xtol=1e-15)
    exact = (np.sqrt(5) - 1) / 2
    ok = abs(c - oracle) <= 1e-6 and abs(oracle - exact) <= 1e-12
    record(3, ok, f"c={c!r}, oracle={oracle!r}, |c-oracle|={abs(c - oracle):.2e}")
    assert ok


def test_criterion_04_filling_curves():
    t0 = time.perf_counter()
    rows, ok = [], True
    for act in (get_activation("sigmoid"), _lrelu()):
        sf = make_step_factory(act)
        for N, d in ((2, 2), (4, 2), (2, 3)):
            curve = build_filling_curve(N, d, sf)
            cov = coverage_radius(curve, n_samples=100_000, grid_per_axis=20)
            disj = intervals_disjoint(curve.tracked)
            cont = containment_violation(curve, samples=100)
            good = cov <= 1 / N + 0.02 and disj and cont == 0 and len(curve.tracked) == N ** d
            ok &= good
            rows.append(f"{act.name}(N={N},d={d}) cov={cov:.3f}{'' if good else ' BAD'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    record(4, ok, f"{'; '.join(rows)}; {elapsed:.1f}s")
    assert ok


def _expected_order(cells):
    # lower blocks of a merged axis land higher; the last axis keeps its order
    return sorted(cells, key=lambda nu: tuple(-v for v in nu[:-1]) + (nu[-1],))


def test_criterion_05_grid_flattening():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    notes, ok = [], True
    for act in (get_activation("sigmoid"), _lrelu()):
        sf = make_step_factory(act)
        for sizes in ((3, 2), (2, 2, 2)):
            axes = tuple(tuple(((k + 0.1) / n, (k + 0.9) / n) for k in range(n)) for n in sizes)
            grid = GridSpec(axes)
            flat = flatten_dgrid(grid, sf)
            spans = {}
            for nu in grid.cells():
                box = grid.cell_box(nu)
                y = flat.net.forward(np.vstack([box.sample(500, rng), box.grid(2)]))[:, 0]
                spans[nu] = (float(y.min()), float(y.max()))
            order = sorted(spans, key=lambda nu: spans[nu][0])
            gaps = [spans[b][0] - spans[a][1] for a, b in zip(order, order[1:])]
            good = min(gaps) > 0 and order == _expected_order(list(grid.cells()))
            ok &= good
            notes.append(f"{act.name}{sizes} min gap {min(gaps):.3g} "
                         f"order {'ok' if good else 'BAD'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    record(5, ok, f"{'; '.join(notes)}; {elapsed:.1f}s")
    assert ok


def test_criterion_06_piecewise_constant():
    K = (0.0, 1.0)
    intervals, values = [(0.1, 0.4), (0.6, 0.9)], [0.3, 0.8]
    rng = np.random.default_rng(0)
    x = rng.uniform(*K, 10_000)
    notes, ok = [], True
    for act in (get_activation("sigmoid"), get_activation("tanh"), _lrelu()):
        pc = build_piecewise_constant(K, intervals, values, 0.05, make_step_factory(act))
        y = pc(x)
        dev = max(float(np.max(np.abs(y[(x >= lo) & (x <= hi)] - v)))
                  for (lo, hi), v in zip(intervals, values))
        good = dev <= 0.05 and y.min() >= 0 and y.max() <= 1
        ok &= good
        notes.append(f"{act.name} dev={dev:.4f} range=[{y.min():.4f},{y.max():.4f}]")
    record(6, ok, "; ".join(notes))
    assert ok


def test_criterion_07_identity_elimination():
    t = np.linspace(0, 1, 20_001).reshape(-1, 1)
    notes, ok = [], True
    for act in (get_activation("sigmoid"), _lrelu()):
        curve = build_filling_curve(4, 2, make_step_factory(act))
        mixed = curve.net
        pure = eliminate_identity(mixed, BoxDomain.cube(1), 1e-2, identity_factory)
        dev = float(np.max(np.abs(pure.forward(t) - mixed.forward(t))))
        good = (dev <= 1e-2 and pure.width == mixed.width == 2 and pure.n_identity == 0
                and mixed.n_identity > 0)
        ok &= good
        notes.append(f"{act.name}: {mixed.n_identity} id neurons -> 0, dev={dev:.2e}, "
                     f"width {pure.width}")
    record(7, ok, "; ".join(notes))
    assert ok


# criterion 8 targets: 1-Lipschitz in the 2-norm, values in [0,1]
TARGETS = {
    (1, 1): lambda x: 0.5 + 0.2 * np.sin(2 * x[:, :1]),
    (2, 1): lambda x: (x[:, :1] + x[:, 1:2]) / 2,
    (1, 2): lambda x: np.hstack([0.5 + 0.2 * np.sin(2 * x[:, :1]), x[:, :1] ** 2 / 4 + 0.25]),
    (2, 2): lambda x: np.hstack([x[:, :1] * x[:, 1:2] / 2, (x[:, :1] + x[:, 1:2]) / 2]),
}
CASES = [(a, dx, dy) for a in ("sigmoid", "leaky_relu") for (dx, dy) in TARGETS]


def _act(name):
    return _lrelu() if name == "leaky_relu" else get_activation(name)


def _run(name, dx, dy):
    t0 = time.perf_counter()
    target = TargetFunction(dx, dy, TARGETS[(dx, dy)], f"target{dx}{dy}")
    try:
        ap, err, row = run_case(target, _act(name), 0.25, 2.0, n=100_000, seed=0)
        return {"row": row, "ap": ap, "err": err, "time": time.perf_counter() - t0}
    except SquashError as exc:
        return {"error": f"{type(exc).__name__}[{exc.stage}]: {exc}",
                "time": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def e2e_runs():
    return {case: _run(*case) for case in CASES}


def test_criterion_08_end_to_end(e2e_runs):
    notes, ok = [], True
    for (name, dx, dy), res in e2e_runs.items():
        tag = f"{name}({dx},{dy})"
        if "error" in res:
            ok = False
            notes.append(f"{tag} build failed after {res['time']:.0f}s: {res['error'][:160]}")
            continue
        ap, err = res["ap"], res["err"]
        good = (ap.net.width == max(dx, dy, 2) and ap.net.is_pure
                and err.lp_estimate <= 0.25 and res["time"] <= 300)
        ok &= good
        notes.append(f"{tag} L2={err.lp_estimate:.4f}+-{err.ci_half_width:.4f} "
                     f"width={ap.net.width} depth={ap.net.depth} {res['time']:.0f}s"
                     f"{'' if good else ' BAD'}")
    record(8, ok, " | ".join(notes))
    assert ok


def _strip_runtime(row):
    return format_csv_row(row, [c for c in CSV_COLUMNS if c != "runtime_s"])


def test_criterion_09_determinism(e2e_runs):
    notes, ok = [], True
    for case, first in e2e_runs.items():
        second = _run(*case)
        if "error" in first or "error" in second:
            same = first.get("error") == second.get("error")
            notes.append(f"{case} same failure={same}")
        else:
            same = _strip_runtime(first["row"]) == _strip_runtime(second["row"])
            notes.append(f"{case} rows identical={same}")
        ok &= same
    record(9, ok, "runtime_s excluded; " + "; ".join(notes))
    assert ok


def _exact(v):
    return sympy.Rational(float(v))


def test_criterion_10_parameter_selection():
    rng = np.random.default_rng(2024)
    radii = np.geomspace(1e-9, 4.0, 300)
    bad = []
    for k in range(20):
        eps = float(rng.uniform(0.05, 1.0))
        p = float(rng.choice([1.0, 1.5, 2.0, 3.0, rng.uniform(1, 4)]))
        dx, dy = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        L, c = float(rng.uniform(0.2, 3.0)), float(rng.uniform(0.1, 2.0))
        w_star = ModulusTable.from_function(lambda r: L * r, radii)
        w_dec = ModulusTable.from_function(lambda r: c * np.sqrt(r), radii)
        pr = select_parameters(eps, p, dx, dy, w_star, w_dec)
        E, P, G, D = _exact(eps), _exact(p), _exact(pr.gamma), _exact(pr.delta)
        dbound = E / (sympy.Integer(dy) ** (1 / P) * 3 ** (1 + 1 / P))
        checks = {
            "delta": D <= dbound,
            "gamma": G <= E ** P / (3 * dx * dy),
            "decoder": _exact(w_dec(pr.gamma)) <= E / 3 ** (1 + 1 / P),
            "target": _exact(w_star((1 - 2 * pr.gamma) / pr.N)) <= dbound,
        }
        agree = check_params(pr, w_star, w_dec)
        if not all(bool(v) for v in checks.values()) or not all(agree.values()):
            bad.append((k, eps, p, dx, dy, {n: bool(v) for n, v in checks.items()}))
    ok = not bad
    record(10, ok, f"20 random tuples, symbolic violations: {bad if bad else 'none'}")
    assert ok
