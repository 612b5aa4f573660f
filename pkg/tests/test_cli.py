import json

import pytest

from squashnet.cli import EXIT_BUILD, EXIT_CERT, EXIT_IO, config_hash, main


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("SQUASHNET_OUT_DIR", str(tmp_path))
    return tmp_path


def test_certify_tanh(out):
    assert main(["certify", "--activation", "tanh", "--K", "-2", "2", "--eps", "0.05",
                 "--zeta", "0.1", "--name", "t"]) == 0
    doc = json.loads((out / "t.report.json").read_text())
    assert doc["passed"] and doc["step"]["report"]["max_error"] <= 0.05


def test_certify_relu_fails(out, capsys):
    assert main(["certify", "--activation", "relu", "--name", "r"]) == EXIT_CERT
    assert "v_minus*v_plus" in capsys.readouterr().err
    assert json.loads((out / "r.report.json").read_text())["passed"] is False


def test_certify_leaky_and_poly(out):
    assert main(["certify", "--activation", "leaky_relu", "--alpha", "0.3"]) == 0
    assert main(["certify", "--poly", "x^3 + x"]) == 0


def test_build_step_then_eval(out, capsys):
    assert main(["build-step", "--activation", "sigmoid", "--eps", "0.05", "--name", "s"]) == 0
    capsys.readouterr()
    assert main(["eval", str(out / "s.net.json"), "1.0"]) == 0
    v = float(capsys.readouterr().out)
    assert 0.95 <= v <= 1.0


def test_eval_identity_affine(tmp_path, capsys):
    doc = {"input_dim": 1, "output_dim": 1, "activation": {"name": "sigmoid", "params": {}},
           "layers": [{"weights": [[1.0]], "bias": [0.0]}]}
    p = tmp_path / "id.json"
    p.write_text(json.dumps(doc))
    assert main(["eval", str(p), "0.25"]) == 0
    assert capsys.readouterr().out.strip() == "0.25"
    assert main(["eval", str(p), "0.25", "0.5"]) == EXIT_IO
    p.write_text("{not json")
    assert main(["eval", str(p), "0.25"]) == EXIT_IO
    assert main(["eval", str(tmp_path / "missing.json"), "1"]) == EXIT_IO


def test_build_id(out):
    assert main(["build-id", "--activation", "gelu", "--name", "g"]) == 0
    doc = json.loads((out / "g.report.json").read_text())
    assert doc["sup_error"] <= 1e-3


def test_build_curve_sidecar(out):
    assert main(["build-curve", "--activation", "sigmoid", "--N", "2", "--d", "2",
                 "--name", "c"]) == 0
    rows = (out / "c.intervals.csv").read_text().splitlines()
    assert rows[0] == "nu1,nu2,lo,hi" and len(rows) == 5
    assert json.loads((out / "c.report.json").read_text())["disjoint"]


def test_config_precedence_and_schema(out, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"activation": {"name": "tanh"}, "eps": 0.2, "name": "p"}))
    assert main(["certify", "--config", str(cfg), "--eps", "0.05"]) == 0
    doc = json.loads((out / "p.report.json").read_text())
    assert doc["config"]["eps"] == 0.05
    cfg.write_text(json.dumps({"activation": {"name": "tanh"}, "bogus": 1}))
    assert main(["certify", "--config", str(cfg)]) == EXIT_IO
    cfg.write_text(json.dumps({"activation": {"name": "tanh"}, "eps": -1}))
    assert main(["certify", "--config", str(cfg)]) == EXIT_IO


def test_config_hash_ignores_name():
    a = {"activation": {"name": "tanh"}, "eps": 0.1, "name": "x"}
    b = dict(a, name="y")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(dict(a, eps=0.2))


def _approx_cfg(tmp_path, **over):
    cfg = {"activation": {"name": "sigmoid"}, "eps": 0.3, "p": 1, "n_samples": 10000,
           "target": {"dx": 1, "expr": ["x1"]}, "name": "a"}
    cfg.update(over)
    path = tmp_path / "approx.json"
    path.write_text(json.dumps(cfg))
    return path


def test_build_approx_row_and_repeat(out, tmp_path):
    path = _approx_cfg(tmp_path)
    assert main(["build-approx", "--config", str(path)]) == 0
    first = (out / "a.csv").read_text().splitlines()
    assert first[0].startswith("activation,dx,dy,p,eps,N")
    doc = json.loads((out / "a.report.json").read_text())
    assert doc["passed"]
    net = json.loads((out / "a.net.json").read_text())
    assert net["meta"]["config_hash"] == doc["config_hash"]
    assert main(["build-approx", "--config", str(path)]) == 0
    again = (out / "a.csv").read_text().splitlines()
    assert first[1].rsplit(",", 1)[0] == again[1].rsplit(",", 1)[0]


def test_build_approx_infeasible(out, tmp_path, capsys):
    path = _approx_cfg(tmp_path, eps=1e-9)
    assert main(["build-approx", "--config", str(path)]) == EXIT_BUILD
    assert "stage=" in capsys.readouterr().err


def test_build_approx_bad_target(out, tmp_path):
    path = _approx_cfg(tmp_path, target={"dx": 1, "expr": ["y + 1"]})
    assert main(["build-approx", "--config", str(path)]) == EXIT_IO
    path = _approx_cfg(tmp_path, target={"dx": 1, "expr": ["2*x1"]})
    assert main(["build-approx", "--config", str(path)]) == EXIT_IO


def test_report_command(out, capsys):
    assert main(["build-step", "--activation", "tanh", "--name", "rs"]) == 0
    capsys.readouterr()
    assert main(["report", str(out / "rs.report.json")]) == 0
    text = capsys.readouterr().out
    assert "command: build-step" in text and "zeta = 0.1" in text
