"""End-to-end assembly of narrow approximators and L^p error measurement."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .activations import identity_factory, make_step_factory
from .decoder import FillingCurve, build_filling_curve, pick_code_points
from .encoder import CellPartition, build_encoder
from .errors import InfeasibleTolerance, SquashError, VerificationFailed
from .netir import BoxDomain, ModulusTable, NarrowNet, compose, eliminate_identity, estimate_modulus

CSV_COLUMNS = ("activation", "dx", "dy", "p", "eps", "N", "gamma", "delta", "width", "depth",
               "lp_error", "ci", "runtime_s")
PIPELINE_SHARE = 0.9  # the rest of eps goes to identity elimination
_SHAVE = 1 - 1e-12  # keeps float bounds on the safe side of the exact ones


@dataclass
class TargetFunction:
    dx: int
    dy: int
    fn: Callable
    name: str = "target"
    _moduli: dict = field(default_factory=dict, repr=False)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(self.fn(x), dtype=float).reshape(x.shape[0], self.dy)
        if np.any(y < -1e-9) or np.any(y > 1 + 1e-9):
            raise ValueError(f"{self.name} leaves [0,1]^{self.dy}")
        return y

    def modulus(self, p, n_pairs=2000, seed=0) -> ModulusTable:
        """Empirical modulus in the p-norm (x1.5 safety), cached per p."""
        if p not in self._moduli:
            diam = self.dx ** (1.0 / p)
            radii = np.geomspace(1e-9 * diam, diam, 240)
            self._moduli[p] = estimate_modulus(self, BoxDomain.cube(self.dx), n_pairs=n_pairs,
                                               radii=radii, norm=p, seed=seed)
        return self._moduli[p]


@dataclass(frozen=True)
class BuildParams:
    eps: float
    p: float
    dx: int
    dy: int
    delta: float
    gamma: float
    N: int


def delta_bound(eps, p, dy):
    return eps / (dy ** (1.0 / p) * 3 ** (1 + 1.0 / p))


def gamma_bound(eps, p, dx, dy):
    return eps ** p / (3 * dx * dy)


def decoder_bound(eps, p):
    return eps / 3 ** (1 + 1.0 / p)


def check_params(params: BuildParams, omega_star, omega_dec):
    """The four inequalities on delta, gamma and N, evaluated on the tables."""
    e, p, dx, dy = params.eps, params.p, params.dx, params.dy
    return {
        "delta": params.delta <= delta_bound(e, p, dy),
        "gamma": params.gamma <= gamma_bound(e, p, dx, dy),
        "decoder_modulus": omega_dec(params.gamma) <= decoder_bound(e, p),
        "target_modulus": omega_star((1 - 2 * params.gamma) / params.N) <= delta_bound(e, p, dy),
    }


def select_parameters(eps, p, dx, dy, omega_star: ModulusTable, omega_dec: ModulusTable,
                      max_N=100_000) -> BuildParams:
    if not eps > 0 or not p >= 1:
        raise ValueError("need eps > 0 and p >= 1")
    delta = delta_bound(eps, p, dy) * _SHAVE
    gamma = min(gamma_bound(eps, p, dx, dy) * _SHAVE, omega_dec.inverse(decoder_bound(eps, p)),
                0.49)
    if not gamma > 0:
        raise InfeasibleTolerance("decoder modulus never drops below "
                                  f"{decoder_bound(eps, p):.3g} on the probed radii",
                                  stage="select_parameters")
    target = delta_bound(eps, p, dy)
    r = omega_star.inverse(target)
    if not r > 0:
        raise InfeasibleTolerance(f"target modulus never drops below {target:.3g}",
                                  stage="select_parameters")
    N = max(1, math.ceil((1 - 2 * gamma) / r))
    while omega_star((1 - 2 * gamma) / N) > target:
        N += 1
        if N > max_N:
            raise InfeasibleTolerance(f"N would exceed {max_N}", stage="select_parameters")
    return BuildParams(eps, p, dx, dy, delta, gamma, N)


def decoder_modulus(curve: FillingCurve, p, n_radii=200, h=None) -> ModulusTable:
    """Upper bound on the p-norm modulus of a curve from windowed coordinate ranges."""
    if h is None:
        zetas = [lvl["zeta"] for lvl in curve.info.get("levels", [])]
        h = min([1e-5] + [z / 50 for z in zetas])
    t = np.linspace(0.0, 1.0, int(math.ceil(1.0 / h)) + 1)
    h = t[1] - t[0]
    F = curve.net.forward(t.reshape(-1, 1))
    radii = np.geomspace(h, 1.0, n_radii)
    values = np.empty(n_radii)
    for k, r in enumerate(radii):
        size = int(math.ceil(r / h)) + 2
        spread = np.stack([maximum_filter1d(F[:, i], size) - minimum_filter1d(F[:, i], size)
                           for i in range(F.shape[1])], axis=1)
        values[k] = float(np.max(np.sum(spread ** p, axis=1) ** (1.0 / p)))
    return ModulusTable(radii, values)


@dataclass
class ErrorReport:
    lp_estimate: float
    samples: int
    ci_half_width: float
    on_cell_sup: float
    off_cell_fraction: float
    off_cell_contribution: float


def measure_lp_error(net, target: TargetFunction, p, n=100_000, seed=0,
                     partition: Optional[CellPartition] = None) -> ErrorReport:
    """Monte-Carlo (int ||net - f*||_p^p)^(1/p) over [0,1]^dx with a 95% half-width."""
    if n < 10_000:
        raise ValueError("n must be at least 10^4")
    rng = np.random.default_rng(seed)
    x = rng.random((n, target.dx))
    f = net.forward if isinstance(net, NarrowNet) else net
    diff = np.asarray(f(x)).reshape(n, -1) - target(x)
    e = np.sum(np.abs(diff) ** p, axis=1)
    m = float(e.mean())
    est = m ** (1.0 / p)
    sd = float(e.std(ddof=1))
    # delta method for the 1/p power
    hw = 1.96 * sd / math.sqrt(n)
    ci = (hw / p) * m ** (1.0 / p - 1) if m > 0 else hw ** (1.0 / p)
    if partition is None:
        inside = np.ones(n, bool)
    else:
        inside = partition.contains(x)
    on = float((e[inside] ** (1.0 / p)).max()) if inside.any() else 0.0
    return ErrorReport(est, n, float(ci), on, float(1 - inside.mean()),
                       float(e[~inside].sum() / n))


@dataclass
class Approximation:
    net: NarrowNet
    params: BuildParams
    report: dict


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SquashError as exc:
        if exc.stage in (None, "unknown"):
            exc.stage = name
        raise


def build_approximator(target: TargetFunction, act, eps, p, strategy="auto",
                       seed=0, max_N=100_000) -> Approximation:
    """Pure-activation network of width max(dx, dy, 2) within eps of the target in L^p."""
    if not eps > 0 or not p >= 1:
        raise ValueError("need eps > 0 and p >= 1")
    dx, dy = target.dx, target.dy
    sf = make_step_factory(act, strategy=strategy)
    eps_pipe = PIPELINE_SHARE * eps
    eps_elim = (1 - PIPELINE_SHARE) * eps / dy ** (1.0 / p)

    delta = delta_bound(eps_pipe, p, dy) * _SHAVE
    N_dec = math.ceil(1.0 / delta)
    if N_dec > max_N:
        raise InfeasibleTolerance(f"decoder would need N={N_dec} > {max_N}", stage="decoder")
    curve = _stage("decoder", build_filling_curve, N_dec, dy, sf)
    omega_dec = _stage("decoder", decoder_modulus, curve, p)
    omega_star = target.modulus(p, seed=seed)
    params = _stage("select_parameters", select_parameters, eps_pipe, p, dx, dy, omega_star,
                    omega_dec, max_N=max_N)
    part = CellPartition(params.N, params.gamma, dx)
    cells = part.indices()
    centers = (np.array(cells, dtype=float) - 0.5) / params.N
    ys = np.clip(target(centers), 0.0, 1.0)
    codes_list = _stage("decoder", pick_code_points, curve,
                        {nu: y for nu, y in zip(cells, ys)}, params.delta)
    codes = {cp.nu: cp.c for cp in codes_list}
    enc = _stage("encoder", build_encoder, part, codes, sf)
    mixed = compose(enc.net, curve.net)
    # accuracy matters on the cells only; the gaps are charged at full range
    pure, elim = _stage("eliminate_identity", eliminate_identity, mixed, BoxDomain.cube(dx),
                        eps_elim, identity_factory, seed=seed, return_report=True,
                        sampler=part.sample)
    width = max(dx, dy, 2)
    if pure.width != width or not pure.is_pure:
        raise VerificationFailed(f"emitted width {pure.width} (pure={pure.is_pure}), "
                                 f"expected {width}", stage="assemble")
    report = {
        "params": asdict(params),
        "N_dec": N_dec,
        "checks": check_params(params, omega_star, omega_dec),
        "omega_dec_gamma": float(omega_dec(params.gamma)),
        "omega_star_cell": float(omega_star((1 - 2 * params.gamma) / params.N)),
        "max_code_distance": max(cp.distance for cp in codes_list),
        "encoder": {k: v for k, v in enc.piecewise.info.items() if k != "x_sep"},
        "flatten_stages": len(enc.flattening.info.get("stages", [])),
        "elimination": {"sup_error": elim.sup_error, "replaced": elim.replaced,
                        "attempts": elim.attempts, "budget": eps_elim},
        "mixed_width": mixed.width,
        "mixed_depth": mixed.depth,
        "open_case": dx == dy == 1 and not act.monotone,
    }
    return Approximation(pure, params, report)


def run_case(target: TargetFunction, act, eps, p, n=100_000, seed=0, strategy="auto",
             max_N=100_000):
    """Build, measure and return (approximation, error report, csv row dict)."""
    t0 = time.perf_counter()
    ap = build_approximator(target, act, eps, p, strategy=strategy, seed=seed, max_N=max_N)
    part = CellPartition(ap.params.N, ap.params.gamma, target.dx)
    err = measure_lp_error(ap.net, target, p, n=n, seed=seed, partition=part)
    row = csv_row(act.name, ap, err, eps, time.perf_counter() - t0)
    return ap, err, row


def csv_row(activation, ap: Approximation, err: ErrorReport, eps, runtime_s):
    pr = ap.params
    return {"activation": activation, "dx": pr.dx, "dy": pr.dy, "p": repr(float(pr.p)),
            "eps": repr(float(eps)), "N": pr.N, "gamma": repr(pr.gamma),
            "delta": repr(pr.delta), "width": ap.net.width, "depth": ap.net.depth,
            "lp_error": repr(err.lp_estimate), "ci": repr(err.ci_half_width),
            "runtime_s": f"{runtime_s:.3f}"}


def format_csv_row(row, columns=CSV_COLUMNS):
    return ",".join(str(row[c]) for c in columns)
