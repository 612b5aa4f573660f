"""Command-line front end.

Every subcommand reads an optional JSON config (``--config``); flags given on
the command line override config fields, which override built-in defaults.
Artifacts go to ``--out-dir``, else ``$SQUASHNET_OUT_DIR``, else the working
directory, and are written atomically.

Exit codes: 0 pass, 2 certification failure, 3 build failure, 4 I/O or schema
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict

import jsonschema
import numpy as np

from .activations import (build_identity_approx, build_step_approx, default_diff_point,
                          get_activation, parse_poly, verify_step_approx)
from .activations.catalog import Kink
from .errors import CertificateFailure, SchemaError, SquashError, StepBuildFailed

EXIT_OK, EXIT_CERT, EXIT_BUILD, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "SQUASHNET_OUT_DIR"

_NUM = {"type": "number"}
_INTERVAL = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "activation": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
        },
        "K": _INTERVAL,
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "zeta": {"type": "number", "exclusiveMinimum": 0},
        "p": {"type": "number", "minimum": 1},
        "N": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "strategy": {"enum": ["auto", "limit", "window"]},
        "grid_n": {"type": "integer", "minimum": 1000},
        "n_samples": {"type": "integer", "minimum": 10000},
        "max_N": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "name": {"type": "string", "minLength": 1},
        "target": {
            "type": "object",
            "required": ["dx", "expr"],
            "additionalProperties": False,
            "properties": {
                "dx": {"type": "integer", "minimum": 1},
                "expr": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "name": {"type": "string"},
            },
        },
    },
}

DEFAULTS = {
    "certify": {"K": [-2.0, 2.0], "eps": 0.05, "zeta": 0.1, "grid_n": 10_000,
                "strategy": "auto"},
    "build-step": {"K": [-2.0, 2.0], "eps": 0.05, "zeta": 0.1, "grid_n": 10_000,
                   "strategy": "auto"},
    "build-id": {"K": [-1.0, 1.0], "eps": 1e-3, "grid_n": 10_000},
    "build-curve": {"N": 4, "d": 2, "strategy": "auto"},
    "build-approx": {"eps": 0.25, "p": 2.0, "seed": 0, "n_samples": 100_000,
                     "strategy": "auto", "max_N": 100_000},
}
# fields that only say where things go; excluded from the hash
_PLACEMENT = {"name"}


class CliError(Exception):
    def __init__(self, message, code, stage=None):
        super().__init__(message)
        self.code = code
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO, "io") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not JSON: {exc}", EXIT_IO, "io") from exc


def _flag_overrides(args):
    out = {}
    if args.activation is not None or args.poly is not None or args.param or \
            args.alpha is not None:
        params = {}
        for item in args.param:
            key, sep, value = item.partition("=")
            if not sep:
                raise CliError(f"--param expects key=value, got {item!r}", EXIT_IO, "io")
            params[key] = json.loads(value)
        if args.alpha is not None:
            params["alpha"] = args.alpha
        name = args.activation
        if args.poly is not None:
            name = "poly"
            params["coeffs"] = parse_poly(args.poly)
        out["activation"] = {"name": name, "params": params}
    for key in ("K", "eps", "zeta", "p", "N", "d", "strategy", "grid_n", "n_samples",
                "max_N", "seed", "name"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = list(value) if key == "K" else value
    return out


def resolve_config(command, args):
    """defaults < config file < flags, then schema validation."""
    file_cfg = _load_config(args.config)
    flags = _flag_overrides(args)
    cfg = dict(DEFAULTS.get(command, {}))
    cfg.update(file_cfg)
    if "activation" in flags and "activation" in file_cfg and flags["activation"]["name"] is None:
        # --alpha or --param alone refine the configured activation
        merged = dict(file_cfg["activation"])
        merged["params"] = {**file_cfg["activation"].get("params", {}),
                            **flags["activation"]["params"]}
        flags["activation"] = merged
    cfg.update(flags)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CliError(f"invalid config: {exc.message}", EXIT_IO, "io") from exc
    return cfg


def config_hash(cfg):
    body = {k: v for k, v in cfg.items() if k not in _PLACEMENT}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _activation(cfg):
    spec = cfg.get("activation")
    if spec is None:
        raise CliError("no activation given (--activation or config)", EXIT_IO, "io")
    try:
        return get_activation(spec["name"], **spec.get("params", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad activation: {exc}", EXIT_IO, "io") from exc


# ---------------------------------------------------------------------------
# output


def out_dir(args):
    d = args.out_dir or os.environ.get(OUT_ENV) or "."
    os.makedirs(d, exist_ok=True)
    return d


def atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    if isinstance(obj, (str, int)) or obj is None:
        return obj
    return repr(obj)


def _write_json(path, doc):
    atomic_write(path, json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _write_net(path, net, h):
    doc = net.to_dict()
    doc["meta"] = {"config_hash": h}
    atomic_write(path, json.dumps(doc) + "\n")


def _artifact(args, cfg, default, suffix):
    return os.path.join(out_dir(args), f"{cfg.get('name', default)}{suffix}")


# ---------------------------------------------------------------------------
# commands


def _step_report(act, cfg):
    try:
        sa = build_step_approx(act, cfg["K"], cfg["eps"], cfg["zeta"], strategy=cfg["strategy"],
                               verify_n=cfg["grid_n"])
    except ValueError as exc:
        raise CliError(str(exc), EXIT_IO, "io") from exc
    rep = sa.info.get("report") or verify_step_approx(sa, grid_n=cfg["grid_n"])
    return sa, rep


def cmd_certify(args):
    cfg = resolve_config("certify", args)
    act = _activation(cfg)
    h = config_hash(cfg)
    doc = {"command": "certify", "config": cfg, "config_hash": h, "activation": act.name}
    code = EXIT_OK
    try:
        if isinstance(act.certificate, Kink):
            act.certificate.check()
        doc["identity_point"] = asdict(default_diff_point(act))
        sa, rep = _step_report(act, cfg)
        doc["step"] = {"route": sa.info.get("route"), "depth": sa.net.depth,
                       "report": asdict(rep)}
        doc["passed"] = rep.passed
        if not rep.passed:
            doc["stage"] = "step"
            code = EXIT_CERT
    except (CertificateFailure, StepBuildFailed) as exc:
        doc.update(passed=False, stage=exc.stage, error=f"{type(exc).__name__}: {exc}")
        code = EXIT_CERT
    _write_json(_artifact(args, cfg, f"certify-{act.name}", ".report.json"), doc)
    if code:
        raise CliError(doc.get("error", "step verification failed"), code, doc.get("stage"))
    return doc


def cmd_build_step(args):
    cfg = resolve_config("build-step", args)
    act = _activation(cfg)
    h = config_hash(cfg)
    try:
        sa, rep = _step_report(act, cfg)
    except (CertificateFailure, StepBuildFailed) as exc:
        raise CliError(f"{type(exc).__name__}: {exc}", EXIT_CERT, exc.stage) from exc
    if not rep.passed:
        raise CliError(f"step verification failed: {rep}", EXIT_CERT, "step")
    name = f"step-{act.name}"
    _write_net(_artifact(args, cfg, name, ".net.json"), sa.net, h)
    doc = {"command": "build-step", "config": cfg, "config_hash": h,
           "route": sa.info.get("route"), "K": sa.K, "eps": sa.eps, "zeta": sa.zeta,
           "depth": sa.net.depth, "report": asdict(rep)}
    _write_json(_artifact(args, cfg, name, ".report.json"), doc)
    return doc


def cmd_build_id(args):
    cfg = resolve_config("build-id", args)
    act = _activation(cfg)
    h = config_hash(cfg)
    try:
        ia = build_identity_approx(act, default_diff_point(act), cfg["K"], cfg["eps"],
                                   n_grid=cfg["grid_n"])
    except CertificateFailure as exc:
        raise CliError(f"{type(exc).__name__}: {exc}", EXIT_CERT, exc.stage) from exc
    name = f"id-{act.name}"
    _write_net(_artifact(args, cfg, name, ".net.json"), ia.net, h)
    doc = {"command": "build-id", "config": cfg, "config_hash": h, "lambda": ia.lam,
           "z": ia.z, "K": ia.K, "eps": ia.eps, "sup_error": ia.sup_error}
    _write_json(_artifact(args, cfg, name, ".report.json"), doc)
    return doc


def cmd_build_curve(args):
    from .activations import make_step_factory
    from .decoder import build_filling_curve, intervals_disjoint

    cfg = resolve_config("build-curve", args)
    act = _activation(cfg)
    h = config_hash(cfg)
    curve = build_filling_curve(cfg["N"], cfg["d"], make_step_factory(act, cfg["strategy"]))
    name = f"curve-{act.name}-N{cfg['N']}-d{cfg['d']}"
    _write_net(_artifact(args, cfg, name, ".net.json"), curve.net, h)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"nu{i + 1}" for i in range(curve.d)] + ["lo", "hi"])
    for row in curve.sidecar_rows():
        w.writerow(row[:-2] + [repr(float(row[-2])), repr(float(row[-1]))])
    atomic_write(_artifact(args, cfg, name, ".intervals.csv"), buf.getvalue())
    doc = {"command": "build-curve", "config": cfg, "config_hash": h, "N": curve.N,
           "d": curve.d, "width": curve.net.width, "depth": curve.net.depth,
           "disjoint": intervals_disjoint(curve.tracked), "levels": curve.info.get("levels", [])}
    _write_json(_artifact(args, cfg, name, ".report.json"), doc)
    return doc


def target_from_config(spec):
    """TargetFunction from sympy expressions in x1..x{dx}."""
    import sympy

    from .approximator import TargetFunction

    dx = spec["dx"]
    xs = sympy.symbols(" ".join(f"x{i + 1}" for i in range(dx)), seq=True)
    try:
        exprs = [sympy.sympify(e, locals={str(s): s for s in xs}) for e in spec["expr"]]
    except (sympy.SympifyError, TypeError) as exc:
        raise CliError(f"bad target expression: {exc}", EXIT_IO, "io") from exc
    free = set().union(*(e.free_symbols for e in exprs)) - set(xs)
    if free:
        raise CliError(f"target uses unknown symbols {sorted(map(str, free))}", EXIT_IO, "io")
    fns = [sympy.lambdify(xs, e, "numpy") for e in exprs]

    def fn(x):
        cols = [x[:, i] for i in range(dx)]
        return np.stack([np.broadcast_to(np.asarray(f(*cols), dtype=float), (x.shape[0],))
                         for f in fns], axis=1)

    return TargetFunction(dx, len(exprs), fn, spec.get("name", "target"))


def cmd_build_approx(args):
    from .approximator import CSV_COLUMNS, run_case

    cfg = resolve_config("build-approx", args)
    if "target" not in cfg:
        raise CliError("build-approx needs a target in the config", EXIT_IO, "io")
    act = _activation(cfg)
    h = config_hash(cfg)
    target = target_from_config(cfg["target"])
    try:
        ap, err, row = run_case(target, act, cfg["eps"], cfg["p"], n=cfg["n_samples"],
                                seed=cfg["seed"], strategy=cfg["strategy"],
                                max_N=cfg["max_N"])
    except ValueError as exc:
        if isinstance(exc, SchemaError):
            raise
        raise CliError(f"target: {exc}", EXIT_IO, "io") from exc
    name = f"approx-{act.name}-{target.dx}x{target.dy}"
    _write_net(_artifact(args, cfg, name, ".net.json"), ap.net, h)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerow([row[c] for c in CSV_COLUMNS])
    atomic_write(_artifact(args, cfg, name, ".csv"), buf.getvalue())
    doc = {"command": "build-approx", "config": cfg, "config_hash": h,
           "build": ap.report, "error": asdict(err), "row": row,
           "passed": bool(err.lp_estimate <= cfg["eps"])}
    _write_json(_artifact(args, cfg, name, ".report.json"), doc)
    return doc


def _read_net(path):
    from .netir import NarrowNet

    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read network: {exc}", EXIT_IO, "io") from exc
    return NarrowNet.from_json(text)


def cmd_eval(args):
    net = _read_net(args.network)
    try:
        x = np.array([float(v) for v in args.x], dtype=float)
    except ValueError as exc:
        raise CliError(f"input must be numbers: {exc}", EXIT_IO, "io") from exc
    if x.size != net.input_dim:
        raise CliError(f"network expects {net.input_dim} inputs, got {x.size}", EXIT_IO, "io")
    y = net.forward(x.reshape(1, -1))[0]
    line = " ".join(f"{v:.17g}" for v in y)
    print(line)
    return {"output": y.tolist()}


_REPORT_KEYS = ("a", "b", "r_k", "zeta", "eta", "xi", "alpha", "L", "N_1", "N_2", "delta",
                "gamma", "N", "N_dec", "eps", "lp_estimate", "ci_half_width")


def _walk(doc, prefix=""):
    if isinstance(doc, dict):
        for k, v in doc.items():
            yield from _walk(v, f"{prefix}{k}.")
    else:
        yield prefix[:-1], doc


def cmd_report(args):
    """Human-readable digest of a JSON report written by any build command."""
    try:
        with open(args.report, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read report: {exc}", EXIT_IO, "io") from exc
    if not isinstance(doc, dict) or "command" not in doc:
        raise CliError("not a squashnet report", EXIT_IO, "io")
    lines = [f"command: {doc['command']}", f"config hash: {doc.get('config_hash', '?')}"]
    if "passed" in doc:
        lines.append(f"passed: {doc['passed']}")
    for path, value in _walk(doc):
        leaf = path.rsplit(".", 1)[-1]
        if leaf in _REPORT_KEYS and not path.startswith("config."):
            lines.append(f"{path} = {value}")
    print("\n".join(lines))
    return doc


# ---------------------------------------------------------------------------
# parser


def _add_common(sp, fields):
    sp.add_argument("--config", help="JSON config; flags override its fields")
    sp.add_argument("--out-dir", help=f"artifact directory (default ${OUT_ENV} or .)")
    sp.add_argument("--name", help="artifact base name")
    sp.add_argument("--activation", help="catalog name, e.g. sigmoid or leaky_relu")
    sp.add_argument("--alpha", type=float, help="shorthand for --param alpha=...")
    sp.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                    help="activation parameter (JSON value), repeatable")
    sp.add_argument("--poly", help="polynomial activation, e.g. 'x^3 + x'")
    if "K" in fields:
        sp.add_argument("--K", type=float, nargs=2, metavar=("LO", "HI"))
    for name, typ in (("eps", float), ("zeta", float), ("p", float), ("N", int), ("d", int),
                      ("grid_n", int), ("n_samples", int), ("max_N", int), ("seed", int)):
        if name in fields:
            sp.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    if "strategy" in fields:
        sp.add_argument("--strategy", choices=["auto", "limit", "window"])


def build_parser():
    ap = argparse.ArgumentParser(prog="squashnet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    step_fields = {"K", "eps", "zeta", "grid_n", "strategy"}
    _add_common(sub.add_parser("certify", help="check the step and identity conditions"),
                step_fields)
    _add_common(sub.add_parser("build-step", help="export a step approximator"), step_fields)
    _add_common(sub.add_parser("build-id", help="export an identity approximator"),
                {"K", "eps", "grid_n"})
    _add_common(sub.add_parser("build-curve", help="export a filling curve"),
                {"N", "d", "strategy"})
    _add_common(sub.add_parser("build-approx", help="build and measure an approximator"),
                {"eps", "p", "seed", "n_samples", "max_N", "strategy"})
    ev = sub.add_parser("eval", help="evaluate a network file at one input")
    ev.add_argument("network")
    ev.add_argument("x", nargs="+", help="input coordinates")
    rp = sub.add_parser("report", help="summarise a JSON report")
    rp.add_argument("report")
    return ap


COMMANDS = {"certify": cmd_certify, "build-step": cmd_build_step, "build-id": cmd_build_id,
            "build-curve": cmd_build_curve, "build-approx": cmd_build_approx,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        stage = f" [stage={exc.stage}]" if exc.stage else ""
        print(f"error{stage}: {exc}", file=sys.stderr)
        return exc.code
    except SchemaError as exc:
        print(f"error [stage=io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except CertificateFailure as exc:
        print(f"error [stage={exc.stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CERT
    except SquashError as exc:
        print(f"error [stage={exc.stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BUILD
    except OSError as exc:
        print(f"error [stage=io]: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
