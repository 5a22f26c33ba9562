"""CLI contracts: subcommands, exit codes, manifests, overrides."""

import json
from pathlib import Path

import numpy as np
import pytest

from banditlab.cli import main
from banditlab.estimator import read_log_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _tiny_config(tmp_path, **extra):
    doc = {
        "env": {"name": "nonconv_demo", "seed": 0},
        "policy": {"kind": "random"},
        "target": {"family": "misspec_linear"},
        "horizon": 50,
        "replications": 1,
        "seed": 9,
        "levels": [0.5, 0.95],
    }
    doc.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def test_unknown_subcommand_exits_one(capsys):
    assert main(["frobnicate"]) == 1
    assert "unknown subcommand" in capsys.readouterr().err


def test_missing_config_exits_one(tmp_path, capsys):
    rc = main(["coverage", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert rc == 1
    assert "nope.json" in capsys.readouterr().err


def test_unparseable_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["coverage", "--config", str(bad), "--out", str(tmp_path)])
    assert rc == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_infer_missing_log_exits_one(tmp_path, capsys):
    cfg = _tiny_config(tmp_path)
    rc = main(["infer", "--config", str(cfg), "--out", str(tmp_path / "o"),
               "--log", str(tmp_path / "absent.csv")])
    assert rc == 1
    assert "absent.csv" in capsys.readouterr().err


def test_coverage_single_replication(tmp_path):
    cfg = _tiny_config(tmp_path)
    out = tmp_path / "out"
    assert main(["coverage", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "coverage.csv").read_text().strip().splitlines()
    assert lines[0] == "level,arm,coord,empirical_coverage,mc_stderr"
    # one row per (level, arm, coord); R=1 so coverage is an indicator
    assert len(lines) == 1 + 2 * 2
    for line in lines[1:]:
        assert line.split(",")[3] in ("0.000000", "1.000000")
    assert (out / "manifest.json").exists()
    assert (out / "replications.csv").exists()
    oracle = json.loads((out / "oracle.json").read_text())
    assert oracle["theta_star"][0][0] == pytest.approx(-3.0 / 34.0)
    assert "config_hash" in oracle


def test_simulate_pi_min_override(tmp_path):
    cfg = _tiny_config(tmp_path, policy={"kind": "linucb", "pi_min": 0.05},
                       horizon=500)
    out = tmp_path / "sim"
    rc = main(["simulate", "--config", str(cfg), "--out", str(out),
               "--set", "policy.pi_min=0.01"])
    assert rc == 0
    log = read_log_csv(out / "log.csv")
    assert np.all(log.propensities >= 0.01 - 1e-12)
    assert np.any(log.propensities < 0.05)  # override actually lowered the floor
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["policy"]["pi_min"] == 0.01


def test_manifest_rerun_is_byte_identical(tmp_path):
    cfg = _tiny_config(tmp_path, horizon=200)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["simulate", "--config", str(out1 / "manifest.json"),
                 "--out", str(out2)]) == 0
    assert (out1 / "log.csv").read_bytes() == (out2 / "log.csv").read_bytes()


def test_infer_round_trip(tmp_path):
    cfg = _tiny_config(tmp_path, horizon=400)
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(sim)]) == 0
    inf = tmp_path / "inf"
    assert main(["infer", "--config", str(cfg), "--out", str(inf),
                 "--log", str(sim / "log.csv")]) == 0
    doc = json.loads((inf / "report.json").read_text())
    assert len(doc["arms"]) == 2
    rep = doc["arms"][0]
    assert set(rep) == {"arm", "theta", "sigma", "ci", "T"}
    assert rep["T"] == 400
    lo, hi = rep["ci"]["0.95"][0]
    assert lo <= rep["theta"][0] <= hi


def test_diagnose_outputs(tmp_path):
    cfg = _tiny_config(tmp_path, horizon=60, replications=4,
                       diagnostics={"contexts": [[-4.0]]})
    out = tmp_path / "diag"
    assert main(["diagnose", "--config", str(cfg), "--out", str(out)]) == 0
    hist = (out / "diagnostic_ctx0_arm1.csv").read_text().strip().splitlines()
    assert hist[0] == "bin_lo,bin_hi,count"
    assert len(hist) == 51
    assert sum(int(l.split(",")[2]) for l in hist[1:]) == 4


def test_compare_ope_outputs(tmp_path):
    cfg = _tiny_config(
        tmp_path, horizon=120, replications=3,
        policy={"kind": "boltzmann_ridge", "gamma": 20.0, "pi_min": 0.05},
        target={"family": "ope", "target_policy": {"kind": "uniform"}},
        levels=[0.95])
    out = tmp_path / "cmp"
    assert main(["compare-ope", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "compare_ope.csv").read_text().strip().splitlines()
    assert lines[0] == "method,level,coverage,mean_value,variance,v_star"
    methods = {l.split(",")[0] for l in lines[1:]}
    assert methods == {"ipwz", "cadr_zero"}


def test_checked_in_configs_parse(tmp_path):
    from banditlab.cli import build_experiment, load_config

    for path in sorted(CONFIGS.glob("*.json")):
        config = load_config(str(path))
        exp = build_experiment(config)
        assert exp.horizon >= 1


def test_runtime_failure_exits_two(tmp_path, capsys):
    # A one-round horizon leaves an arm unpulled in every replication, so the
    # failure tolerance aborts the experiment at runtime.
    cfg = _tiny_config(tmp_path, horizon=1, replications=4)
    out = tmp_path / "boom"
    rc = main(["coverage", "--config", str(cfg), "--out", str(out)])
    assert rc == 2
    assert "runtime failure" in capsys.readouterr().err
