"""Seeded experiment pipeline behind the command-line tool.

Every command is a function of (config, input files, seed) and writes only
under the configured output directory. Numeric artifacts are written with a
fixed layout so reruns are byte-identical; run manifests carry timestamps and
are the only files that differ between reruns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .behavior import CalibratedEstimator, load_model, prototype_model_of, train_feedforward
from .config import ConfigError, EstimatorSpec, ExperimentConfig
from .data import TrajectoryDataset, read_jsonl, write_jsonl
from .features import StepFeaturizer
from .mdp import StochasticPolicy, estimate_mdp, exact_policy_value, policy_iteration, soften
from .metrics import SigmoidCalibration, bootstrap_metrics, sigmoid_calibrate
from .ope import (
    bootstrap_wis,
    estimate_report,
    overlap_csv,
    overlap_report,
    prototype_values,
    prototype_values_csv,
    weight_ratio_diagnostic,
    wis_value,
)
from .prototype import PrototypeModel, cross_validate, report_csv, train
from .sepsis import N_ACTIONS, N_STATES, exact_transition_tensor, generate_pairs

log = logging.getLogger(__name__)

SPLITS = ("train", "calibration", "evaluation")
_SPLIT_KEY = {"train": 0, "calibration": 1, "evaluation": 2, "model": 3}


# ---------------------------------------------------------------------------
# Manifest and file helpers


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = __version__
    artifacts: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    started: str = ""
    finished: str = ""

    def add(self, name: str, path: Path) -> None:
        self.artifacts[name] = {"path": str(path), "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / f"manifest-{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _start(command: str, cfg: ExperimentConfig) -> tuple[Path, RunManifest]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out, RunManifest(command, cfg.digest(), cfg.seed, started=_now())


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what}: {path} does not exist (run the producing command first)")
    return path


# ---------------------------------------------------------------------------
# Seeds, simulator and data


def seed_sequence(seed: int, horizon: int, replication: int, purpose: str) -> np.random.SeedSequence:
    """Independent stream per (seed, horizon, replication, purpose)."""
    return np.random.SeedSequence([seed, horizon, replication, _SPLIT_KEY[purpose]])


def model_seed(seed: int, horizon: int, replication: int) -> int:
    return int(seed_sequence(seed, horizon, replication, "model").generate_state(1)[0])


@lru_cache(maxsize=4)
def _simulator(discount: float):
    mdp = exact_transition_tensor()
    return mdp, policy_iteration(mdp, discount)


def simulator_mdp():
    return _simulator(1.0)[0]


def behavior_policy(cfg: ExperimentConfig) -> StochasticPolicy:
    """The logging policy: the solved simulator policy mixed with uniform."""
    return soften(_simulator(cfg.discount)[1], cfg.behavior_epsilon)


def generate_splits(cfg: ExperimentConfig, horizon: int, replication: int = 0) -> dict:
    """Three disjoint splits, each holding about the configured pair budget."""
    mu = behavior_policy(cfg)
    budgets = {"train": cfg.n_train_pairs, "calibration": cfg.n_calib_pairs, "evaluation": cfg.n_eval_pairs}
    return {
        name: generate_pairs(mu, budgets[name], horizon,
                             np.random.default_rng(seed_sequence(cfg.seed, horizon, replication, name)))
        for name in SPLITS
    }


def load_splits(data_dir: Path, names=SPLITS) -> dict:
    return {name: read_jsonl(_require(data_dir / f"{name}.jsonl", f"{name} split")) for name in names}


# ---------------------------------------------------------------------------
# Estimators


def fit_estimator(
    cfg: ExperimentConfig, spec: EstimatorSpec, train_split: TrajectoryDataset, seed: int,
    cv_choice: Optional[tuple] = None,
):
    """Train one behavior estimator; returns (model, cv_summary or None)."""
    featurizer = StepFeaturizer("sepsis", N_STATES, N_ACTIONS).fit(train_split)
    tc = cfg.train_config(seed=seed)
    if spec.kind == "feedforward":
        return train_feedforward(train_split, tc, featurizer), None
    tc.n_prototypes, tc.q = spec.n_prototypes, spec.q
    cv_doc = None
    if cv_choice is not None:
        tc.d_min, tc.lambda_d = cv_choice
    elif cfg.cv:
        res = cross_validate(train_split, tc, featurizer, folds=cfg.cv_folds)
        tc.d_min, tc.lambda_d = res.d_min, res.lambda_d
        cv_doc = {"d_min": res.d_min, "lambda_d": res.lambda_d,
                  "scores": [{"d_min": d, "lambda_d": l, "heldout_nll": s} for d, l, s in res.scores]}
    return train(train_split, tc, featurizer), cv_doc


def calibrate(model, calib_split: TrajectoryDataset) -> SigmoidCalibration:
    return sigmoid_calibrate(model.action_probs(calib_split), calib_split.flat_actions())


def learned_target(cfg: ExperimentConfig, train_split: TrajectoryDataset) -> StochasticPolicy:
    """Policy iteration on the MDP estimated from the training split, softened."""
    est = estimate_mdp(train_split, N_STATES, N_ACTIONS)
    return soften(policy_iteration(est, cfg.discount), cfg.target_epsilon)


def zero_drug_policy() -> StochasticPolicy:
    return StochasticPolicy.deterministic(np.zeros(N_STATES, dtype=np.int64), N_ACTIONS)


def resolve_target(cfg: ExperimentConfig, spec: str, train_split: Optional[TrajectoryDataset], behavior=None):
    if spec == "zero-drug":
        return zero_drug_policy()
    if spec == "learned":
        if train_split is None:
            raise ConfigError("target: 'learned' needs the training split")
        return learned_target(cfg, train_split)
    if spec == "behavior-estimate":
        return behavior
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"target: expected 'zero-drug', 'learned', 'behavior-estimate' or a policy file, got {spec!r}")
    return load_model(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    out, manifest = _start("gen-data", cfg)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    splits = generate_splits(cfg, cfg.horizon)
    summary = {}
    for name, ds in splits.items():
        path = data_dir / f"{name}.jsonl"
        write_jsonl(ds, path)
        manifest.add(name, path)
        summary[name] = {"trajectories": len(ds), "pairs": ds.n_pairs, "max_length": int(ds.lengths.max())}
    mu = behavior_policy(cfg)
    path = data_dir / "behavior_policy.json"
    _write_json(path, {"model": "tabular", **mu.to_json()})
    manifest.add("behavior_policy", path)
    manifest.add("summary", _write_json(data_dir / "summary.json", summary))
    manifest.write(out)
    return summary


def cmd_fit_behavior(cfg: ExperimentConfig, data_dir: Optional[str] = None) -> dict:
    out, manifest = _start("fit-behavior", cfg)
    splits = load_splits(Path(data_dir) if data_dir else out / "data")
    spec = EstimatorSpec(cfg.estimator, cfg.n_prototypes, cfg.q)
    model, cv_doc = fit_estimator(cfg, spec, splits["train"], cfg.seed)
    manifest.add("model", _write_text(out / "model.json", json.dumps(model.to_json())))
    if cv_doc is not None:
        manifest.add("cv", _write_json(out / "cv.json", cv_doc))

    ev = splits["evaluation"]
    labels = ev.flat_actions()
    raw = model.action_probs(ev)
    report = {"estimator": spec.label, "evaluation_pairs": int(len(labels)), "uniform_nll": math.log(N_ACTIONS)}
    report["uncalibrated"] = bootstrap_metrics(raw, labels, cfg.metric_bootstrap,
                                               np.random.default_rng(seed_sequence(cfg.seed, cfg.horizon, 0, "evaluation")))
    if cfg.calibrate:
        cal = calibrate(model, splits["calibration"])
        manifest.add("calibration", _write_json(out / "calibration.json", cal.to_json()))
        report["calibrated"] = bootstrap_metrics(cal.apply(raw), labels, cfg.metric_bootstrap,
                                                 np.random.default_rng(seed_sequence(cfg.seed, cfg.horizon, 0, "evaluation")))
    manifest.add("metrics", _write_json(out / "metrics.json", report))
    manifest.write(out)
    return report


def load_estimator(model_path: Path, calibration_path: Optional[Path]):
    model = load_model(_require(model_path, "model"))
    if calibration_path is not None and calibration_path.exists():
        cal = SigmoidCalibration.from_json(json.loads(calibration_path.read_text()))
        return CalibratedEstimator(model, cal)
    return model


def encodings_csv(model: PrototypeModel, dataset: TrajectoryDataset) -> str:
    """Latent codes of every training prefix plus the prototypes, for 2-D projection plots."""
    Z = model.encode_dataset(dataset)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "id", "t", "action"] + [f"z{i}" for i in range(Z.shape[1])])
    for (i, t), a, z in zip(dataset.step_index(), dataset.flat_actions(), Z):
        w.writerow(["sample", i, t, int(a)] + [repr(float(v)) for v in z])
    for j, z in enumerate(model.prototypes):
        ref = model.refs[j]
        w.writerow(["prototype", j, int(ref[1]), ""] + [repr(float(v)) for v in z])
    return buf.getvalue()


def cmd_evaluate(
    cfg: ExperimentConfig, model_path: Optional[str] = None, target: Optional[str] = None,
    data_dir: Optional[str] = None,
) -> dict:
    out, manifest = _start("evaluate", cfg)
    data = Path(data_dir) if data_dir else out / "data"
    splits = load_splits(data, ("train", "evaluation"))
    ev = splits["evaluation"]
    model_file = Path(model_path) if model_path else out / "model.json"
    estimator = load_estimator(model_file, model_file.parent / "calibration.json")
    target_spec = target or cfg.target
    pi = resolve_target(cfg, target_spec, splits["train"], estimator)

    mu_path = data / "behavior_policy.json"
    mu = load_model(mu_path) if mu_path.exists() else None
    report = {"target": target_spec, "horizon": cfg.horizon, "evaluation_trajectories": len(ev),
              "mean_observed_reward": float(ev.rewards().mean()), "estimates": {}}
    for name, behavior in (("mu_hat", estimator), ("mu", mu)):
        if behavior is None:
            continue
        for kind in ("is", "wis"):
            report["estimates"][f"{kind}_{name}"] = estimate_report(ev, pi, behavior, kind)
    if isinstance(pi, StochasticPolicy):
        mdp = simulator_mdp()
        report["exact_value_target"] = exact_policy_value(mdp, pi, cfg.horizon)
        if mu is not None:
            report["exact_value_behavior"] = exact_policy_value(mdp, mu, cfg.horizon)
        est = report["estimates"]["wis_mu_hat"]["value"]
        report["abs_error_wis_mu_hat"] = None if est is None else abs(est - report["exact_value_target"])

    boot = bootstrap_wis(ev, pi, estimator, cfg.value_bootstrap,
                         np.random.default_rng(seed_sequence(cfg.seed, cfg.horizon, 0, "model")))
    ok = boot[~np.isnan(boot)]
    report["bootstrap"] = {
        "scheme": "bootstrap over trajectories",
        "detail": "evaluation trajectories resampled with replacement; behavior estimate held fixed",
        "n_resamples": cfg.value_bootstrap,
        "n_defined": int(len(ok)),
    }
    if len(ok):
        report["bootstrap"].update(mean=float(ok.mean()), std=float(ok.std()),
                                   q025=float(np.quantile(ok, 0.025)), q975=float(np.quantile(ok, 0.975)))
    lines = "".join(f"{b},{'undefined' if np.isnan(v) else repr(v)}\n" for b, v in enumerate(boot.tolist()))
    manifest.add("bootstrap_values", _write_text(out / "bootstrap_values.csv", "resample,wis\n" + lines))

    groups = overlap_report(ev, pi, estimator, cfg.overlap_threshold)
    report["overlap"] = {"threshold": cfg.overlap_threshold,
                         "flagged_pairs": sum(len(v) for v in groups.values()),
                         "by_prototype": {("none" if k is None else str(k)): len(v) for k, v in groups.items()}}
    manifest.add("overlap", _write_text(out / "overlap.csv", overlap_csv(groups)))

    proto = prototype_model_of(estimator)
    if proto is not None:
        manifest.add("prototype_report", _write_text(out / "prototype_report.csv", report_csv(proto)))
        rows = {"target": [r for t in cfg.prototype_times for r in prototype_values(ev, proto, pi, estimator, t)]}
        manifest.add("prototype_values", _write_text(out / "prototype_values.csv", prototype_values_csv(rows)))
        manifest.add("encodings", _write_text(out / "encodings.csv", encodings_csv(proto, splits["train"])))

    manifest.add("value_report", _write_json(out / "value_report.json", report))
    manifest.write(out)
    return report


def cmd_proto_report(cfg: ExperimentConfig, model_path: Optional[str] = None) -> list:
    out, manifest = _start("proto-report", cfg)
    model = load_model(_require(Path(model_path) if model_path else out / "model.json", "model"))
    if not isinstance(model, PrototypeModel):
        raise ConfigError("model: proto-report needs a prototype model")
    manifest.add("prototype_report", _write_text(out / "prototype_report.csv", report_csv(model)))
    manifest.write(out)
    return [{"prototype": j, "trajectory": int(r[0]), "time": int(r[1])} for j, r in enumerate(model.refs)]


# ---------------------------------------------------------------------------
# Bias sweep

SWEEP_COLUMNS = (
    "horizon", "estimator", "replication", "train_trajectories", "train_pairs",
    "median_log_ratio", "q25_log_ratio", "q75_log_ratio", "median_abs_log_ratio", "mean_abs_log_ratio",
    "oracle_median_abs_log_ratio", "v_true", "wis_mu_hat", "wis_mu", "abs_error", "abs_error_mu",
)


def _cv_choices(cfg: ExperimentConfig, specs: list) -> dict:
    """One (d_min, lambda_d) choice per prototype spec, from replication 0 at the CV horizon."""
    choices = {}
    if not cfg.sweep_cv:
        return {s.label: (cfg.d_min, cfg.lambda_d) for s in specs if s.kind == "prototype"}
    splits = None
    for s in specs:
        if s.kind != "prototype":
            continue
        if splits is None:
            splits = generate_splits(cfg, cfg.sweep_cv_horizon, 0)
        featurizer = StepFeaturizer("sepsis", N_STATES, N_ACTIONS).fit(splits["train"])
        tc = cfg.train_config(seed=model_seed(cfg.seed, cfg.sweep_cv_horizon, 0), n_prototypes=s.n_prototypes, q=s.q)
        res = cross_validate(splits["train"], tc, featurizer, folds=cfg.cv_folds)
        choices[s.label] = (res.d_min, res.lambda_d)
        log.info("cv %s: d_min=%s lambda_d=%s", s.label, res.d_min, res.lambda_d)
    return choices


def sweep_cell(cfg: ExperimentConfig, horizon: int, replication: int, specs: list, choices: dict) -> list[dict]:
    """All estimators for one (horizon, replication); self-contained for parallel use."""
    splits = generate_splits(cfg, horizon, replication)
    mu = behavior_policy(cfg)
    ev = splits["evaluation"]
    pi = learned_target(cfg, splits["train"])
    v_true = exact_policy_value(simulator_mdp(), pi, horizon)
    wis_mu = wis_value(ev, pi, mu)
    oracle = weight_ratio_diagnostic(ev, mu, mu).summary()["median_abs_log_ratio"]
    rows = []
    for spec in specs:
        model, _ = fit_estimator(cfg, spec, splits["train"], model_seed(cfg.seed, horizon, replication),
                                 cv_choice=choices.get(spec.label))
        est = CalibratedEstimator(model, calibrate(model, splits["calibration"]))
        diag = weight_ratio_diagnostic(ev, est, mu).summary()
        wis_hat = wis_value(ev, pi, est)
        rows.append({
            "horizon": horizon, "estimator": spec.label, "replication": replication,
            "train_trajectories": len(splits["train"]), "train_pairs": splits["train"].n_pairs,
            "median_log_ratio": diag["median_log_ratio"], "q25_log_ratio": diag["q25_log_ratio"],
            "q75_log_ratio": diag["q75_log_ratio"], "median_abs_log_ratio": diag["median_abs_log_ratio"],
            "mean_abs_log_ratio": diag["mean_abs_log_ratio"], "oracle_median_abs_log_ratio": oracle,
            "v_true": v_true, "wis_mu_hat": wis_hat, "wis_mu": wis_mu,
            "abs_error": abs(wis_hat - v_true), "abs_error_mu": abs(wis_mu - v_true),
        })
        log.info("h=%d rep=%d %s: median|log ratio|=%.4f |err|=%.4f", horizon, replication, spec.label,
                 diag["median_abs_log_ratio"], rows[-1]["abs_error"])
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Per (horizon, estimator): medians and means across replications."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["horizon"], r["estimator"]), []).append(r)
    out = []
    for (h, name), rs in groups.items():
        err = np.array([r["abs_error"] for r in rs])
        out.append({
            "horizon": h, "estimator": name, "replications": len(rs),
            "median_abs_log_ratio": float(np.median([r["median_abs_log_ratio"] for r in rs])),
            "median_log_ratio": float(np.median([r["median_log_ratio"] for r in rs])),
            "abs_error_mean": float(err.mean()), "abs_error_std": float(err.std(ddof=1)) if len(err) > 1 else 0.0,
            "abs_error_mu_mean": float(np.mean([r["abs_error_mu"] for r in rs])),
        })
    return out


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def sweep_csv(rows: list[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    lines += [",".join(_fmt(r[c]) for c in SWEEP_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[dict], dict]:
    specs = [EstimatorSpec.parse(s) for s in cfg.sweep_estimators]
    choices = _cv_choices(cfg, specs)
    cells = [(h, r) for h in cfg.horizons for r in range(cfg.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(sweep_cell, *zip(*[(cfg, h, r, specs, choices) for h, r in cells])))
    else:
        results = [sweep_cell(cfg, h, r, specs, choices) for h, r in cells]
    return [row for cell in results for row in cell], choices


def cmd_bias_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    out, manifest = _start("bias-sweep", cfg)
    rows, choices = run_sweep(cfg, jobs)
    manifest.add("bias_sweep", _write_text(out / "bias_sweep.csv", sweep_csv(rows)))
    summary = {"cv_choices": {k: {"d_min": v[0], "lambda_d": v[1]} for k, v in choices.items()},
               "cells": summarize_sweep(rows)}
    manifest.add("bias_sweep_summary", _write_json(out / "bias_sweep_summary.json", summary))
    manifest.write(out)
    return rows
