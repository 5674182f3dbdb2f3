"""Classification and calibration metrics for behavior-policy estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import rankdata

LOGIT_CLAMP = 1e-12


def _check(probs, labels):
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels) or len(labels) == 0:
        raise ValueError("need a non-empty (m, k) probability matrix and m labels")
    if np.any((labels < 0) | (labels >= probs.shape[1])):
        raise ValueError("label out of range")
    return probs, labels


def accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs, labels = _check(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_macro_ovr(probs, labels) -> float:
    """Unweighted mean one-vs-rest AUC over the classes present in ``labels``."""
    probs, labels = _check(probs, labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("AUC needs at least two classes among the labels")
    return float(np.mean([binary_auc(probs[:, c], labels == c) for c in present]))


def sce(probs, labels, n_bins: int = 15) -> float:
    """Static calibration error: class- and bin-wise confidence gaps, averaged over classes.

    Every entry of every class column is binned into ``n_bins`` equal-width bins
    on [0, 1]; values on a boundary go to the lower bin.
    """
    probs, labels = _check(probs, labels)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    m, k = probs.shape
    bins = np.clip(np.ceil(probs * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    for c in range(k):
        b = bins[:, c]
        count = np.bincount(b, minlength=n_bins)
        conf = np.bincount(b, weights=probs[:, c], minlength=n_bins)
        hits = np.bincount(b, weights=(labels == c).astype(float), minlength=n_bins)
        nz = count > 0
        total += np.sum(np.abs(hits[nz] - conf[nz])) / m
    return float(total / k)


def reliability_table(probs, labels, n_bins: int = 15) -> list[dict]:
    """Per (class, bin) counts, mean confidence and accuracy, for plotting."""
    probs, labels = _check(probs, labels)
    bins = np.clip(np.ceil(probs * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    rows = []
    for c in range(probs.shape[1]):
        for b in range(n_bins):
            sel = bins[:, c] == b
            if sel.any():
                rows.append(
                    {"class": c, "bin": b, "count": int(sel.sum()),
                     "confidence": float(probs[sel, c].mean()), "accuracy": float(np.mean(labels[sel] == c))}
                )
    return rows


def nll(probs, labels) -> float:
    probs, labels = _check(probs, labels)
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def _logit(p):
    p = np.clip(p, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return np.log(p) - np.log1p(-p)


def _fit_platt(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    def fun(theta):
        a, b = theta
        z = a * x + b
        # log(1 + e^z) - y z
        loss = np.sum(np.logaddexp(0.0, z) - y * z)
        g = expit(z) - y
        return loss / len(x), np.array([g @ x, g.sum()]) / len(x)

    res = minimize(fun, np.array([1.0, 0.0]), jac=True, method="L-BFGS-B", bounds=[(0.0, None), (None, None)])
    return float(res.x[0]), float(res.x[1])


@dataclass
class SigmoidCalibration:
    """Per-class one-vs-rest map p -> sigmoid(a * logit(p) + b), rows renormalized."""

    a: np.ndarray
    b: np.ndarray

    def scores(self, probs) -> np.ndarray:
        return expit(self.a * _logit(np.asarray(probs, dtype=float)) + self.b)

    def apply(self, probs) -> np.ndarray:
        s = self.scores(probs)
        return s / s.sum(axis=1, keepdims=True)

    def to_json(self) -> dict:
        return {"method": "sigmoid", "a": self.a.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "SigmoidCalibration":
        return cls(np.asarray(doc["a"], dtype=float), np.asarray(doc["b"], dtype=float))


def sigmoid_calibrate(probs, labels) -> SigmoidCalibration:
    """Fit the calibration map on a validation split (disjoint from training data)."""
    probs, labels = _check(probs, labels)
    k = probs.shape[1]
    a, b = np.ones(k), np.zeros(k)
    x = _logit(probs)
    for c in range(k):
        y = (labels == c).astype(float)
        if 0 < y.sum() < len(y):
            a[c], b[c] = _fit_platt(x[:, c], y)
        elif y.sum() == 0:
            a[c], b[c] = 0.0, -np.log(len(y) + 1.0)  # class never seen: tiny constant score
    return SigmoidCalibration(a, b)


def bootstrap_metrics(probs, labels, n_boot: int = 1000, rng=None, n_bins: int = 15, level: float = 0.95) -> dict:
    """Point values and percentile intervals for accuracy, AUC and SCE."""
    probs, labels = _check(probs, labels)
    rng = rng if rng is not None else np.random.default_rng(0)
    fns = {
        "accuracy": accuracy,
        "auc": auc_macro_ovr,
        "sce": lambda p, y: sce(p, y, n_bins),
    }
    draws = {name: [] for name in fns}
    m = len(labels)
    for _ in range(n_boot):
        idx = rng.integers(0, m, m)
        p, y = probs[idx], labels[idx]
        for name, fn in fns.items():
            try:
                draws[name].append(fn(p, y))
            except ValueError:
                pass  # resample with a single class: AUC undefined
    lo, hi = (1 - level) / 2 * 100, (1 + level) / 2 * 100
    out = {}
    for name, fn in fns.items():
        d = np.asarray(draws[name])
        out[name] = {
            "value": fn(probs, labels),
            "ci_low": float(np.percentile(d, lo)) if len(d) else None,
            "ci_high": float(np.percentile(d, hi)) if len(d) else None,
            "n_boot": int(len(d)),
        }
    out["nll"] = {"value": nll(probs, labels)}
    return out
