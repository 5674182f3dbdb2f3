"""Importance-sampling policy evaluation and its diagnostics.

Policies and behavior estimators are anything with ``action_probs(dataset)``
returning per-step action distributions in flattened (trajectory, t) order.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .behavior import prototype_model_of
from .data import Trajectory, TrajectoryDataset
from .prototype import PrototypeModel


class ZeroPropensityError(ZeroDivisionError):
    pass


@dataclass
class WeightedSample:
    trajectory: int
    partial_weights: np.ndarray  # cumulative products, one per step
    reward: float

    @property
    def full_weight(self) -> float:
        return float(self.partial_weights[-1])


def _taken_probs(policy, dataset: TrajectoryDataset) -> np.ndarray:
    probs = np.asarray(policy.action_probs(dataset), dtype=float)
    actions = dataset.flat_actions()
    return probs[np.arange(len(actions)), actions]


def step_ratios(dataset: TrajectoryDataset, target, behavior, clip: Optional[float] = None) -> np.ndarray:
    """pi(a_t | h_t) / mu_hat(a_t | h_t) for every logged step."""
    p_target = _taken_probs(target, dataset)
    p_behavior = _taken_probs(behavior, dataset)
    zero = np.flatnonzero(p_behavior <= 0)
    if len(zero):
        i, t = dataset.step_index()[zero[0]]
        a = dataset[i].actions[t]
        raise ZeroPropensityError(f"behavior propensity is 0 at trajectory {i}, t={t}, action {a}")
    ratios = p_target / p_behavior
    if clip is not None:
        ratios = np.minimum(ratios, clip)
    return ratios


def dataset_weights(dataset: TrajectoryDataset, target, behavior, clip: Optional[float] = None) -> list[WeightedSample]:
    ratios = step_ratios(dataset, target, behavior, clip)
    off = dataset.offsets
    return [
        WeightedSample(i, np.cumprod(ratios[off[i] : off[i + 1]]), traj.reward)
        for i, traj in enumerate(dataset)
    ]


def importance_weights(trajectory: Trajectory, target, behavior, clip: Optional[float] = None) -> WeightedSample:
    return dataset_weights(TrajectoryDataset([trajectory]), target, behavior, clip)[0]


def _weights_rewards(dataset, target, behavior, clip=None):
    samples = dataset_weights(dataset, target, behavior, clip)
    w = np.array([s.full_weight for s in samples])
    r = np.array([s.reward for s in samples])
    return w, r


def is_value(dataset: TrajectoryDataset, target, behavior, clip: Optional[float] = None) -> float:
    """Ordinary importance sampling: mean of w_i r_i."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    w, r = _weights_rewards(dataset, target, behavior, clip)
    return float(np.sum(w * r) / len(w))


def wis_from_weights(w: np.ndarray, r: np.ndarray) -> float:
    total = np.sum(w)
    if total <= 0:
        raise ZeroDivisionError("all importance weights are zero")
    return float(np.sum(w * r) / total)


def wis_value(dataset: TrajectoryDataset, target, behavior, clip: Optional[float] = None) -> float:
    """Self-normalized importance sampling."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return wis_from_weights(*_weights_rewards(dataset, target, behavior, clip))


def ess(weights) -> float:
    """Effective sample size (sum w)^2 / sum w^2."""
    w = np.asarray(weights, dtype=float)
    if len(w) == 0 or not np.any(w):
        raise ValueError("weights must be non-empty and not all zero")
    w = w / np.max(np.abs(w))  # scale-free; avoids underflow of w**2
    return float(np.sum(w) ** 2 / np.sum(w**2))


def weights_summary(w: np.ndarray) -> dict:
    qs = (0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)
    return {f"q{int(q * 100):02d}": float(np.quantile(w, q)) for q in qs}


def estimate_report(dataset: TrajectoryDataset, target, behavior, estimator: str = "wis") -> dict:
    """Point estimate with its weight diagnostics; WIS is None when every weight is 0."""
    w, r = _weights_rewards(dataset, target, behavior)
    if estimator == "wis":
        value = wis_from_weights(w, r) if np.sum(w) > 0 else None
    else:
        value = float(np.mean(w * r))
    return {
        "estimator": estimator,
        "value": value,
        "ess": ess(w) if np.any(w) else 0.0,
        "m": int(len(w)),
        "weights_summary": weights_summary(w),
    }


def bootstrap_wis(dataset: TrajectoryDataset, target, behavior, n_resamples: int, rng: np.random.Generator) -> np.ndarray:
    """WIS estimates over trajectory-level bootstrap resamples (estimator held fixed)."""
    w, r = _weights_rewards(dataset, target, behavior)
    m = len(w)
    out = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, m, m)
        total = w[idx].sum()
        out[b] = np.sum(w[idx] * r[idx]) / total if total > 0 else np.nan
    return out


# ---------------------------------------------------------------------------
# Overlap


@dataclass
class OverlapFlag:
    trajectory: int
    t: int
    action: int
    target_prob: float
    behavior_prob: float
    prototype: Optional[int] = None
    similarity: Optional[float] = None


def overlap_report(dataset: TrajectoryDataset, target, behavior, threshold: float) -> dict:
    """Actions the target may take but the behavior estimate almost never does.

    Returns ``{prototype id or None: [OverlapFlag, ...]}`` with groups ordered by
    prototype id.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    p_t = np.asarray(target.action_probs(dataset))
    p_b = np.asarray(behavior.action_probs(dataset))
    steps, acts = np.nonzero((p_t > 0) & (p_b < threshold))
    model = prototype_model_of(behavior)
    nearest = sim = None
    if model is not None:
        nearest, sim = model.nearest_prototype(dataset)
    index = dataset.step_index()
    groups: dict = defaultdict(list)
    for s, a in zip(steps, acts):
        i, t = index[s]
        proto = int(nearest[s]) if nearest is not None else None
        groups[proto].append(
            OverlapFlag(i, t, int(a), float(p_t[s, a]), float(p_b[s, a]), proto,
                        float(sim[s]) if sim is not None else None)
        )
    return dict(sorted(groups.items(), key=lambda kv: (kv[0] is None, kv[0] if kv[0] is not None else 0)))


def overlap_csv(groups: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prototype", "trajectory", "t", "action", "target_prob", "behavior_prob", "similarity"])
    for proto, flags in groups.items():
        for f in flags:
            w.writerow(["" if proto is None else proto, f.trajectory, f.t, f.action, repr(f.target_prob),
                        repr(f.behavior_prob), "" if f.similarity is None else repr(f.similarity)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Prototype-level value decomposition


@dataclass
class PrototypeValue:
    prototype: int
    t: int
    value: Optional[float]  # None when the prototype has no weighted mass at t
    prob: float
    contribution: float  # value * prob


def prototype_values(
    dataset: TrajectoryDataset, model: PrototypeModel, target, behavior, t: int
) -> list[PrototypeValue]:
    """Importance-weighted value of the target policy per prototype assignment at time t.

    Trajectories that end before t contribute to neither numerator nor denominator.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    samples = dataset_weights(dataset, target, behavior)
    assign = model.assignment_matrix(dataset)
    off = dataset.offsets
    m = len(dataset)
    prob = np.zeros(model.n)
    num = np.zeros(model.n)
    for i, s in enumerate(samples):
        if len(s.partial_weights) <= t:
            continue
        a = assign[off[i] + t]
        prob += a * s.partial_weights[t]
        num += a * s.full_weight * s.reward
    prob /= m
    num /= m
    return [
        PrototypeValue(j, t, float(num[j] / prob[j]) if prob[j] > 0 else None, float(prob[j]), float(num[j]))
        for j in range(model.n)
    ]


def prototype_values_csv(rows_by_policy: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "t", "prototype", "value", "prob", "contribution"])
    for name, rows in rows_by_policy.items():
        for r in rows:
            w.writerow([name, r.t, r.prototype, "undefined" if r.value is None else repr(r.value),
                        repr(r.prob), repr(r.contribution)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Estimated vs true weights


@dataclass
class RatioDiagnostic:
    log_ratios: np.ndarray  # per trajectory: log prod mu / mu_hat

    @property
    def ratios(self) -> np.ndarray:
        return np.exp(self.log_ratios)

    def summary(self) -> dict:
        lr = self.log_ratios
        return {
            "median_log_ratio": float(np.median(lr)),
            "q25_log_ratio": float(np.quantile(lr, 0.25)),
            "q75_log_ratio": float(np.quantile(lr, 0.75)),
            "iqr_log_ratio": float(np.quantile(lr, 0.75) - np.quantile(lr, 0.25)),
            "median_abs_log_ratio": float(np.median(np.abs(lr))),
            "mean_abs_log_ratio": float(np.mean(np.abs(lr))),
        }


def weight_ratio_diagnostic(dataset: TrajectoryDataset, behavior, true_behavior) -> RatioDiagnostic:
    """Per-trajectory ratio of importance weights under mu_hat and mu.

    Target probabilities cancel, so no target policy is involved.
    """
    log_step = np.log(_taken_probs(true_behavior, dataset)) - np.log(_taken_probs(behavior, dataset))
    off = dataset.offsets
    return RatioDiagnostic(np.array([log_step[off[i] : off[i + 1]].sum() for i in range(len(dataset))]))
