import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from protoope.behavior import load_model
from protoope.cli import main
from protoope.config import ConfigError, ExperimentConfig, load_config, parse_config_text
from protoope.data import read_jsonl
from protoope.experiment import SWEEP_COLUMNS, cmd_bias_sweep

SMALL = """
horizon = 8
n_train_pairs = 1500
n_calib_pairs = 1500
n_eval_pairs = 1500
epochs = 3
cv = false
metric_bootstrap = 50
value_bootstrap = 20
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL)
    return p


def run(cfg_file, out, *args):
    return main(["--config", str(cfg_file), "--out", str(out), *args])


def digest_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and not p.name.startswith("manifest-")}


# -- config ---------------------------------------------------------------------------


def test_config_parsing(tmp_path):
    text = "seed = 4  # comment\nhorizons = 5, 10\ncv = false\nsweep_estimators = feedforward, prototype:10:2\n"
    (tmp_path / "c.cfg").write_text(text)
    cfg = load_config(str(tmp_path / "c.cfg"))
    assert cfg.seed == 4 and cfg.horizons == [5, 10] and cfg.cv is False
    assert cfg.sweep_estimators == ["feedforward", "prototype:10:2"]


@pytest.mark.parametrize(
    "text,field",
    [("horizon = x", "horizon"), ("colour = red", "colour"), ("q = 20", "q"), ("n_train_pairs = 0", "n_train_pairs"),
     ("sweep_estimators = prototype:3", "sweep_estimators"), ("just text", "line 1")],
)
def test_config_errors_name_field(tmp_path, text, field):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ConfigError, match=field):
        load_config(str(tmp_path / "c.cfg"))


def test_config_error_exit_code_before_work(tmp_path):
    (tmp_path / "c.cfg").write_text("horizon = -1\n")
    assert main(["--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o"), "gen-data"]) == 2
    assert not (tmp_path / "o").exists()


def test_flags_after_subcommand(cfg_file, tmp_path):
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    man = json.loads((tmp_path / "o" / "manifest-gen-data.json").read_text())
    assert man["seed"] == 7 and set(man) >= {"config_hash", "artifacts", "started", "finished", "version"}


# -- gen-data -------------------------------------------------------------------------


def test_gen_data(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path / "a", "gen-data") == 0
    assert run(cfg_file, tmp_path / "b", "gen-data") == 0
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")
    cfg = load_config(str(cfg_file))
    for name in ("train", "calibration", "evaluation"):
        ds = read_jsonl(tmp_path / "a" / "data" / f"{name}.jsonl")
        assert ds.lengths.max() <= cfg.horizon
        assert ds.n_pairs >= 1500 and ds.n_pairs - len(ds[-1]) < 1500
    # splits are drawn from distinct streams
    tr = (tmp_path / "a" / "data" / "train.jsonl").read_text()
    assert tr != (tmp_path / "a" / "data" / "evaluation.jsonl").read_text()


def test_horizon_five(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(SMALL + "horizon = 5\n")
    assert run(p, tmp_path / "o", "gen-data") == 0
    assert read_jsonl(tmp_path / "o" / "data" / "train.jsonl").lengths.max() <= 5


# -- fit-behavior / evaluate / proto-report -----------------------------------------


@pytest.fixture
def fitted(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert run(cfg_file, out, "gen-data") == 0
    before = digest_tree(out / "data")
    assert run(cfg_file, out, "fit-behavior") == 0
    assert digest_tree(out / "data") == before
    return out


def test_fit_behavior_outputs(fitted):
    metrics = json.loads((fitted / "metrics.json").read_text())
    for block in ("uncalibrated", "calibrated"):
        for key in ("accuracy", "auc", "sce"):
            assert {"value", "ci_low", "ci_high"} <= set(metrics[block][key])
    model = load_model(fitted / "model.json")
    train = read_jsonl(fitted / "data" / "train.jsonl")
    for j in range(model.n):
        i, t = model.refs[j]
        assert np.array_equal(model.prototypes[j], model.encode_history(train[i], t))


def test_fit_behavior_with_cv(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(SMALL + "cv = true\nepochs = 1\nn_train_pairs = 300\n")
    assert run(p, tmp_path / "o", "gen-data") == 0
    assert run(p, tmp_path / "o", "fit-behavior") == 0
    cv = json.loads((tmp_path / "o" / "cv.json").read_text())
    assert len(cv["scores"]) == 25
    best = min(cv["scores"], key=lambda s: s["heldout_nll"])
    assert (best["d_min"], best["lambda_d"]) == (cv["d_min"], cv["lambda_d"])
    model = json.loads((tmp_path / "o" / "model.json").read_text())
    assert model["d_min"] == cv["d_min"] and model["lambdas"]["d"] == cv["lambda_d"]


def test_evaluate_zero_drug(fitted, cfg_file):
    before = digest_tree(fitted / "data")
    assert run(cfg_file, fitted, "evaluate", "--target", "zero-drug") == 0
    assert digest_tree(fitted / "data") == before
    rep = json.loads((fitted / "value_report.json").read_text())
    assert rep["overlap"]["flagged_pairs"] > 0
    assert "exact_value_target" in rep and "exact_value_behavior" in rep
    assert set(rep["estimates"]) == {"is_mu_hat", "wis_mu_hat", "is_mu", "wis_mu"}
    assert rep["bootstrap"]["scheme"] == "bootstrap over trajectories"
    for name in ("overlap.csv", "prototype_report.csv", "prototype_values.csv", "encodings.csv", "bootstrap_values.csv"):
        assert (fitted / name).exists(), name
    times = {line.split(",")[1] for line in (fitted / "prototype_values.csv").read_text().splitlines()[1:]}
    assert times == {"0", "2"}


def test_evaluate_learned_target(fitted, cfg_file):
    assert run(cfg_file, fitted, "evaluate") == 0
    rep = json.loads((fitted / "value_report.json").read_text())
    assert rep["target"] == "learned"
    assert rep["abs_error_wis_mu_hat"] == pytest.approx(
        abs(rep["estimates"]["wis_mu_hat"]["value"] - rep["exact_value_target"]))
    assert len((fitted / "bootstrap_values.csv").read_text().splitlines()) == 1 + 20


def test_evaluate_behavior_estimate_target(fitted, cfg_file):
    assert run(cfg_file, fitted, "evaluate", "--target", "behavior-estimate") == 0
    rep = json.loads((fitted / "value_report.json").read_text())
    assert rep["estimates"]["wis_mu_hat"]["value"] == pytest.approx(rep["mean_observed_reward"], abs=1e-12)


def test_evaluate_policy_file_target(fitted, cfg_file):
    target = fitted / "data" / "behavior_policy.json"
    assert run(cfg_file, fitted, "evaluate", "--target", str(target)) == 0
    rep = json.loads((fitted / "value_report.json").read_text())
    # evaluating the true behavior policy under itself: WIS is the mean reward
    assert rep["estimates"]["wis_mu"]["value"] == pytest.approx(rep["mean_observed_reward"], abs=1e-12)
    assert rep["exact_value_target"] == pytest.approx(rep["exact_value_behavior"])


def test_evaluate_missing_model(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path / "o", "gen-data") == 0
    assert run(cfg_file, tmp_path / "o", "evaluate") == 2


def test_proto_report(fitted, cfg_file):
    assert run(cfg_file, fitted, "proto-report") == 0
    lines = (fitted / "prototype_report.csv").read_text().splitlines()
    assert len(lines) == 1 + 10 * 8


def test_numeric_failure_exit_code(fitted, cfg_file):
    assert main(["--config", str(cfg_file), "--out", str(fitted), "--set", "learning_rate=1e300",
                 "--set", "estimator=feedforward", "fit-behavior"]) == 3


def test_feedforward_beats_uniform(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("horizon = 15\nestimator = feedforward\nn_calib_pairs = 2000\nn_eval_pairs = 5000\n"
                 "metric_bootstrap = 20\n")
    assert run(p, tmp_path / "o", "gen-data") == 0
    assert run(p, tmp_path / "o", "fit-behavior") == 0
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics["uncalibrated"]["nll"]["value"] < math.log(8)
    assert metrics["uniform_nll"] == pytest.approx(math.log(8))


def test_determinism_all_commands(cfg_file, tmp_path):
    for out in ("a", "b"):
        for cmd in ("gen-data", "fit-behavior", "evaluate"):
            assert run(cfg_file, tmp_path / out, cmd) == 0
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")


# -- bias sweep -------------------------------------------------------------------------


def test_bias_sweep_schema_and_oracle(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path / "s"), n_train_pairs=300, n_calib_pairs=300, n_eval_pairs=300,
                           horizons=[3, 5], replications=2, epochs=1, sweep_cv=False,
                           sweep_estimators=["feedforward", "prototype:4:2"])
    rows = cmd_bias_sweep(cfg)
    assert len(rows) == 2 * 2 * 2
    lines = (tmp_path / "s" / "bias_sweep.csv").read_text().splitlines()
    assert lines[0].split(",") == list(SWEEP_COLUMNS) and len(lines) == 9
    assert all(r["oracle_median_abs_log_ratio"] == 0.0 for r in rows)
    summary = json.loads((tmp_path / "s" / "bias_sweep_summary.json").read_text())
    assert len(summary["cells"]) == 4
    assert {"abs_error_mean", "abs_error_std"} <= set(summary["cells"][0])


def test_default_sweep_shape():
    cfg = ExperimentConfig()
    assert len(cfg.horizons) * len(cfg.sweep_estimators) * cfg.replications == 6 * 4 * 10
