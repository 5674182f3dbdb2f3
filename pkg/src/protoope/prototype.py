"""Prototype-based estimate of a behavior policy.

An encoder maps a history to a latent vector z. The model keeps ``n`` latent
prototypes, each snapped to the encoding of a real training history, and
predicts actions with a softmax over ``B @ s + c`` where ``s_j =
exp(-||z_j~ - z||^2)``. At prediction time only the ``q`` most similar
prototypes are kept.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Trajectory, TrajectoryDataset
from .features import SequenceData, StepFeaturizer
from .nn import (
    Adam,
    NumericalError,
    check_finite,
    encoder_from_json,
    glorot,
    log_softmax,
    make_encoder,
    minibatches,
    nll_and_grad,
    params_to_json,
    softmax,
)

log = logging.getLogger(__name__)

D_MIN_GRID = (1.0, 2.0, 3.0, 4.0, 5.0)
LAMBDA_D_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class TrainConfig:
    n_prototypes: int = 10
    q: int = 2
    lambda_d: float = 1e-3
    lambda_c: float = 1e-3
    lambda_e: float = 1e-3
    d_min: float = 2.0
    epochs: int = 30
    batch_size: int = 128
    projection_period: int = 5
    seed: int = 0
    encoder: str = "ffn"
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3

    def validate(self) -> None:
        if self.n_prototypes < 1:
            raise ValueError("n_prototypes must be >= 1")
        if not 1 <= self.q <= self.n_prototypes:
            raise ValueError("q must satisfy 1 <= q <= n_prototypes")
        if min(self.lambda_d, self.lambda_c, self.lambda_e) < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.d_min <= 0:
            raise ValueError("d_min must be > 0")
        if self.projection_period < 1:
            raise ValueError("projection_period must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.encoder not in ("ffn", "rnn"):
            raise ValueError(f"unknown encoder {self.encoder!r}")


def sq_dists(Z: np.ndarray, P: np.ndarray, chunk_elems: int = 4_000_000) -> np.ndarray:
    """Squared Euclidean distances between rows of Z (N, d) and P (n, d)."""
    N, n, d = len(Z), len(P), P.shape[1]
    out = np.empty((N, n))
    step = max(1, chunk_elems // max(1, n * d))
    for s in range(0, N, step):
        diff = Z[s : s + step, None, :] - P[None, :, :]
        out[s : s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def truncate(similarities: np.ndarray, q: int) -> np.ndarray:
    """Zero every entry below the q-th largest of its row; ties at the threshold are kept."""
    s = np.asarray(similarities, dtype=float)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    n = s2.shape[1]
    if not 1 <= q <= n:
        raise ValueError(f"q must lie in [1, {n}], got {q}")
    if q == n:
        out = s2.copy()
    else:
        kth = -np.partition(-s2, q - 1, axis=1)[:, q - 1 : q]
        out = np.where(s2 >= kth, s2, 0.0)
    return out[0] if single else out


@dataclass
class PrototypeModel:
    featurizer: StepFeaturizer
    encoder: object
    prototypes: np.ndarray  # (n, latent_dim)
    refs: np.ndarray  # (n, 2): trajectory id, time index
    histories: list  # per prototype: {"contexts": [...], "actions": [...]}
    B: np.ndarray  # (k, n)
    c: np.ndarray  # (k,)
    q: int
    lambdas: dict = field(default_factory=lambda: {"d": 0.0, "c": 0.0, "e": 0.0})
    d_min: float = 1.0
    history: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.prototypes)

    @property
    def n_actions(self) -> int:
        return len(self.c)

    @property
    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays (shared, not copied)."""
        p = dict(self.encoder.params)
        p["prototypes"] = self.prototypes
        p["B"] = self.B
        p["c"] = self.c
        return p

    # -- encoding ---------------------------------------------------------
    def encode_history(self, traj: Trajectory, t: Optional[int] = None) -> np.ndarray:
        t = len(traj) - 1 if t is None else t
        return self.encoder.encode_rows(self.featurizer.history_rows(traj, t))

    def encode_dataset(self, dataset: TrajectoryDataset) -> np.ndarray:
        return self.encoder.encode_all(SequenceData(dataset, self.featurizer))

    # -- prediction -------------------------------------------------------
    def similarities(self, Z: np.ndarray) -> np.ndarray:
        return np.exp(-sq_dists(np.atleast_2d(Z), self.prototypes))

    def probs_from_encodings(self, Z: np.ndarray, truncated: bool = True) -> np.ndarray:
        S = self.similarities(Z)
        if truncated:
            S = truncate(S, self.q)
        return softmax(S @ self.B.T + self.c)

    def action_probs(self, dataset: TrajectoryDataset) -> np.ndarray:
        """Truncated propensities for every step, flattened in (trajectory, t) order."""
        return self.probs_from_encodings(self.encode_dataset(dataset))

    def assignment_matrix(self, dataset: TrajectoryDataset) -> np.ndarray:
        """p(J_t = j | h_t) for every step, using untruncated similarities."""
        return softmax(-sq_dists(self.encode_dataset(dataset), self.prototypes))

    def nearest_prototype(self, dataset: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
        D = sq_dists(self.encode_dataset(dataset), self.prototypes)
        j = np.argmin(D, axis=1)
        return j, np.exp(-D[np.arange(len(D)), j])

    def prototype_trajectory(self, j: int) -> Trajectory:
        h = self.histories[j]
        L = len(h["contexts"])
        return Trajectory(list(h["contexts"]), list(h["actions"]), [0.0] * L)

    # -- serialization ----------------------------------------------------
    def to_json(self) -> dict:
        doc = {
            "model": "prototype",
            "featurizer": self.featurizer.to_json(),
            "encoder": self.encoder.to_json(),
            "params": params_to_json(self.encoder.params),
            "latent_prototypes": self.prototypes.tolist(),
            "prototype_refs": self.refs.tolist(),
            "prototype_histories": self.histories,
            "B": self.B.tolist(),
            "c": self.c.tolist(),
            "n": self.n,
            "q": self.q,
            "lambdas": self.lambdas,
            "d_min": self.d_min,
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PrototypeModel":
        return cls(
            featurizer=StepFeaturizer.from_json(doc["featurizer"]),
            encoder=encoder_from_json(doc["encoder"], doc["params"]),
            prototypes=np.asarray(doc["latent_prototypes"], dtype=float),
            refs=np.asarray(doc["prototype_refs"], dtype=np.int64).reshape(-1, 2),
            histories=doc["prototype_histories"],
            B=np.asarray(doc["B"], dtype=float),
            c=np.asarray(doc["c"], dtype=float),
            q=int(doc["q"]),
            lambdas=dict(doc["lambdas"]),
            d_min=float(doc["d_min"]),
        )


def similarity_vector(model: PrototypeModel, z: np.ndarray) -> np.ndarray:
    """Untruncated RBF similarities of one encoding to every latent prototype."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.prototypes.shape[1],):
        raise ValueError("encoding dimension does not match the prototypes")
    return model.similarities(z)[0]


def propensities(model: PrototypeModel, history: Trajectory, t: Optional[int] = None) -> np.ndarray:
    """Estimated behavior distribution over actions after history h_t."""
    z = model.encode_history(history, t)
    return model.probs_from_encodings(z[None])[0]


def assignment_probs(model: PrototypeModel, history: Trajectory, t: Optional[int] = None) -> np.ndarray:
    z = model.encode_history(history, t)
    return softmax(-sq_dists(z[None], model.prototypes))[0]


# ---------------------------------------------------------------------------
# Objective


def diversity_penalty(P: np.ndarray, d_min: float) -> tuple[float, np.ndarray]:
    """sum_{i<j} max(0, d_min - ||p_i - p_j||)^2 and its gradient."""
    n = len(P)
    if n < 2:
        return 0.0, np.zeros_like(P)
    sq = np.einsum("ij,ij->i", P, P)
    r = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * P @ P.T, 0.0))
    gap = np.maximum(d_min - r, 0.0)
    np.fill_diagonal(gap, 0.0)
    total = float(np.sum(np.triu(gap, 1) ** 2))
    # coincident prototypes have no direction to push along
    W = np.divide(2.0 * gap, r, out=np.zeros_like(r), where=r > 0)
    grad = -(W.sum(axis=1)[:, None] * P - W @ P)
    return total, grad


@dataclass
class ObjectiveTerms:
    total: float
    nll: float
    r_d: float
    r_c: float
    r_e: float


def objective_and_grad(
    model: PrototypeModel, Z: np.ndarray, labels: np.ndarray, lambdas: dict, d_min: float
) -> tuple[ObjectiveTerms, dict[str, np.ndarray], np.ndarray]:
    """Regularized NLL on a batch of encodings, gradients for B, c, prototypes and Z.

    NLL uses untruncated similarities. R_c sums, over the batch, the squared
    distance to the closest prototype; R_e sums, over prototypes, the squared
    distance to the closest batch encoding.
    """
    if len(Z) == 0:
        raise ValueError("empty batch")
    P = model.prototypes
    D = np.maximum(
        np.einsum("ij,ij->i", Z, Z)[:, None] + np.einsum("ij,ij->i", P, P)[None, :] - 2.0 * Z @ P.T, 0.0
    )
    S = np.exp(-D)
    logits = S @ model.B.T + model.c
    nll, dlogits = nll_and_grad(logits, labels)
    dB = dlogits.T @ S
    dc = dlogits.sum(axis=0)
    dD = -S * (dlogits @ model.B)

    # argmin on the expanded distances, values recomputed exactly from differences
    jc = np.argmin(D, axis=1)
    r_c = float(np.sum((Z - P[jc]) ** 2))
    ie = np.argmin(D, axis=0)
    r_e = float(np.sum((Z[ie] - P) ** 2))
    lam_d, lam_c, lam_e = lambdas["d"], lambdas["c"], lambdas["e"]
    if lam_c:
        dD[np.arange(len(D)), jc] += lam_c
    if lam_e:
        dD[ie, np.arange(D.shape[1])] += lam_e
    r_d, dP_div = diversity_penalty(P, d_min)

    dZ = 2.0 * (dD.sum(axis=1)[:, None] * Z - dD @ P)
    dP = 2.0 * (dD.sum(axis=0)[:, None] * P - dD.T @ Z) + lam_d * dP_div
    total = nll + lam_d * r_d + lam_c * r_c + lam_e * r_e
    grads = {"prototypes": dP, "B": dB, "c": dc}
    return ObjectiveTerms(total, nll, r_d, r_c, r_e), grads, dZ


def loss_and_grad(
    model: PrototypeModel, data: SequenceData, units: np.ndarray, lambdas: dict, d_min: float
) -> tuple[ObjectiveTerms, dict[str, np.ndarray]]:
    """Full objective on a mini-batch with exact gradients for every parameter."""
    Z, steps, cache = model.encoder.batch_forward(data, units)
    terms, grads, dZ = objective_and_grad(model, Z, data.actions[steps], lambdas, d_min)
    grads.update(model.encoder.batch_backward(cache, dZ))
    check_finite("objective", np.array([terms.total]))
    for name, g in grads.items():
        check_finite(f"gradient of {name}", g)
    return terms, grads


def objective(model: PrototypeModel, dataset: TrajectoryDataset, config: TrainConfig) -> float:
    """J = NLL + lambda_d R_d + lambda_c R_c + lambda_e R_e over a whole batch."""
    data = SequenceData(dataset, model.featurizer)
    Z = model.encoder.encode_all(data)
    lambdas = {"d": config.lambda_d, "c": config.lambda_c, "e": config.lambda_e}
    terms, _, _ = objective_and_grad(model, Z, data.actions, lambdas, config.d_min)
    return terms.total


# ---------------------------------------------------------------------------
# Projection and training


def project(model: PrototypeModel, data: SequenceData) -> PrototypeModel:
    """Snap each latent prototype onto its closest training history (in place).

    Ties go to the earliest (trajectory id, time) pair.
    """
    if data.n_steps == 0:
        raise ValueError("empty dataset")
    Z = model.encoder.encode_all(data)
    nearest = np.argmin(sq_dists(model.prototypes, Z), axis=1)
    for j, step in enumerate(nearest):
        i, t = (int(v) for v in data.refs[step])
        traj = data.dataset[i]
        model.refs[j] = (i, t)
        model.histories[j] = {"contexts": list(traj.contexts[: t + 1]), "actions": list(traj.actions[: t + 1])}
        model.prototypes[j] = model.encode_history(traj, t)
    return model


def _init_model(data: SequenceData, featurizer: StepFeaturizer, config: TrainConfig, rng) -> PrototypeModel:
    encoder = make_encoder(config.encoder, featurizer.dim, config.hidden, rng)
    k = featurizer.n_actions
    n = config.n_prototypes
    # prefer histories with distinct inputs so prototypes start apart
    _, first = np.unique(data.rows, axis=0, return_index=True)
    pool = np.sort(first) if len(first) >= n else np.arange(data.n_steps)
    start = np.sort(rng.choice(pool, size=n, replace=len(pool) < n))
    model = PrototypeModel(
        featurizer=featurizer,
        encoder=encoder,
        prototypes=np.zeros((n, encoder.out_dim)),
        refs=np.zeros((n, 2), dtype=np.int64),
        histories=[None] * n,
        B=glorot(rng, k, n),
        c=np.zeros(k),
        q=config.q,
        lambdas={"d": config.lambda_d, "c": config.lambda_c, "e": config.lambda_e},
        d_min=config.d_min,
    )
    for j, step in enumerate(start):
        i, t = (int(v) for v in data.refs[step])
        traj = data.dataset[i]
        model.refs[j] = (i, t)
        model.histories[j] = {"contexts": list(traj.contexts[: t + 1]), "actions": list(traj.actions[: t + 1])}
        model.prototypes[j] = model.encode_history(traj, t)
    return model


def full_nll(model: PrototypeModel, data: SequenceData, truncated: bool = False) -> float:
    P = model.probs_from_encodings(model.encoder.encode_all(data), truncated=truncated)
    return float(-np.mean(np.log(P[np.arange(data.n_steps), data.actions])))


def train(
    dataset: TrajectoryDataset,
    config: TrainConfig,
    featurizer: Optional[StepFeaturizer] = None,
    track_nll: bool = False,
) -> PrototypeModel:
    """Fit a prototype model with Adam, projecting every ``projection_period`` epochs."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if featurizer is None:
        featurizer = StepFeaturizer("sepsis", 1440, 8)
    if featurizer.mean is None:
        featurizer.fit(dataset)
    data = SequenceData(dataset, featurizer)
    model = _init_model(data, featurizer, config, rng)
    lambdas = model.lambdas
    opt = Adam(config.learning_rate, config.weight_decay)
    params = model.params
    if track_nll:
        model.history.append(full_nll(model, data))
    n_units = model.encoder.n_units(data)
    for epoch in range(1, config.epochs + 1):
        for units in minibatches(n_units, config.batch_size, rng):
            try:
                terms, grads = loss_and_grad(model, data, units, lambdas, config.d_min)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}") from exc
            opt.update(params, grads)
        if epoch % config.projection_period == 0:
            project(model, data)
        if track_nll:
            model.history.append(full_nll(model, data))
    project(model, data)
    return model


# ---------------------------------------------------------------------------
# Cross-validation over (d_min, lambda_d)


@dataclass
class CvResult:
    d_min: float
    lambda_d: float
    scores: list  # (d_min, lambda_d, mean held-out NLL)


def cross_validate(
    dataset: TrajectoryDataset,
    config: TrainConfig,
    featurizer: StepFeaturizer,
    d_min_grid: Sequence[float] = D_MIN_GRID,
    lambda_d_grid: Sequence[float] = LAMBDA_D_GRID,
    folds: int = 3,
) -> CvResult:
    """K-fold selection of the diversity settings by held-out truncated NLL."""
    rng = np.random.default_rng(config.seed + 7919)
    order = rng.permutation(len(dataset))
    parts = np.array_split(order, folds)
    scores = []
    for d_min, lam in itertools.product(d_min_grid, lambda_d_grid):
        losses = []
        for k in range(folds):
            held = np.sort(parts[k])
            fit = np.sort(np.concatenate([parts[i] for i in range(folds) if i != k]))
            cfg = TrainConfig(**{**asdict(config), "d_min": d_min, "lambda_d": lam})
            model = train(dataset.subset(fit), cfg, featurizer)
            losses.append(full_nll(model, SequenceData(dataset.subset(held), featurizer), truncated=True))
        scores.append((d_min, lam, float(np.mean(losses))))
        log.debug("cv d_min=%s lambda_d=%s nll=%.5f", d_min, lam, scores[-1][2])
    best = min(scores, key=lambda s: s[2])
    return CvResult(best[0], best[1], scores)


# ---------------------------------------------------------------------------
# Reporting


def prototype_report(model: PrototypeModel) -> list[dict]:
    """One entry per prototype: its history, coefficient column and predicted action distribution."""
    rows = []
    for j in range(model.n):
        traj = model.prototype_trajectory(j)
        rows.append(
            {
                "prototype": j,
                "trajectory": int(model.refs[j][0]),
                "time": int(model.refs[j][1]),
                "contexts": list(traj.contexts),
                "actions": list(traj.actions),
                "coefficients": model.B[:, j].tolist(),
                "probs": propensities(model, traj).tolist(),
            }
        )
    return rows


def report_csv(model: PrototypeModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prototype", "trajectory", "time", "contexts", "actions", "action", "coefficient", "prob"])
    for row in prototype_report(model):
        for a in range(model.n_actions):
            w.writerow(
                [row["prototype"], row["trajectory"], row["time"], " ".join(map(str, row["contexts"])),
                 " ".join(map(str, row["actions"])), a, repr(row["coefficients"][a]), repr(row["probs"][a])]
            )
    return buf.getvalue()


def save_model(model: PrototypeModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_json()))
