"""Behavior-policy estimators other than the prototype model, and loading helpers.

Every estimator exposes ``action_probs(dataset) -> (n_steps, k)`` with rows in
flattened (trajectory, t) order. ``StochasticPolicy`` satisfies the same
protocol for tabular (true or target) policies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import TrajectoryDataset
from .features import SequenceData, StepFeaturizer
from .mdp import StochasticPolicy
from .nn import Adam, NumericalError, check_finite, encoder_from_json, glorot, make_encoder, minibatches, nll_and_grad, params_to_json, softmax
from .prototype import PrototypeModel, TrainConfig


@dataclass
class FeedforwardPolicy:
    """Encoder followed by a linear softmax head (the black-box baseline)."""

    featurizer: StepFeaturizer
    encoder: object
    W: np.ndarray
    b: np.ndarray
    history: list = field(default_factory=list)

    @property
    def params(self):
        p = dict(self.encoder.params)
        p["head.W"] = self.W
        p["head.b"] = self.b
        return p

    def logits(self, data: SequenceData) -> np.ndarray:
        return self.encoder.encode_all(data) @ self.W + self.b

    def action_probs(self, dataset: TrajectoryDataset) -> np.ndarray:
        return softmax(self.logits(SequenceData(dataset, self.featurizer)))

    def loss_and_grad(self, data: SequenceData, units):
        Z, steps, cache = self.encoder.batch_forward(data, units)
        logits = Z @ self.W + self.b
        loss, dlogits = nll_and_grad(logits, data.actions[steps])
        check_finite("baseline loss", np.array([loss]))
        grads = self.encoder.batch_backward(cache, dlogits @ self.W.T)
        grads["head.W"] = Z.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        return loss, grads

    def to_json(self) -> dict:
        params = params_to_json(self.encoder.params)
        params["head.W"] = self.W.tolist()
        params["head.b"] = self.b.tolist()
        return {"model": "feedforward", "featurizer": self.featurizer.to_json(), "encoder": self.encoder.to_json(), "params": params}

    @classmethod
    def from_json(cls, doc: dict) -> "FeedforwardPolicy":
        return cls(
            StepFeaturizer.from_json(doc["featurizer"]),
            encoder_from_json(doc["encoder"], doc["params"]),
            np.asarray(doc["params"]["head.W"], dtype=float),
            np.asarray(doc["params"]["head.b"], dtype=float),
        )


def train_feedforward(
    dataset: TrajectoryDataset, config: TrainConfig, featurizer: Optional[StepFeaturizer] = None
) -> FeedforwardPolicy:
    """Fit the baseline with the same optimizer settings as the prototype model."""
    rng = np.random.default_rng(config.seed)
    if featurizer is None:
        featurizer = StepFeaturizer("sepsis", 1440, 8)
    if featurizer.mean is None:
        featurizer.fit(dataset)
    data = SequenceData(dataset, featurizer)
    encoder = make_encoder(config.encoder, featurizer.dim, config.hidden, rng)
    k = featurizer.n_actions
    model = FeedforwardPolicy(featurizer, encoder, glorot(rng, encoder.out_dim, k), np.zeros(k))
    opt = Adam(config.learning_rate, config.weight_decay)
    params = model.params
    for epoch in range(1, config.epochs + 1):
        for units in minibatches(encoder.n_units(data), config.batch_size, rng):
            try:
                _, grads = model.loss_and_grad(data, units)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}") from exc
            opt.update(params, grads)
    return model


@dataclass
class CalibratedEstimator:
    """Wraps an estimator with a per-class sigmoid calibration map."""

    base: object
    calibration: object  # metrics.SigmoidCalibration

    def action_probs(self, dataset: TrajectoryDataset) -> np.ndarray:
        return self.calibration.apply(self.base.action_probs(dataset))

    @property
    def prototype_model(self) -> Optional[PrototypeModel]:
        return self.base if isinstance(self.base, PrototypeModel) else None


def prototype_model_of(estimator) -> Optional[PrototypeModel]:
    if isinstance(estimator, PrototypeModel):
        return estimator
    return getattr(estimator, "prototype_model", None)


def model_from_json(doc: dict):
    kind = doc.get("model")
    if kind == "prototype":
        return PrototypeModel.from_json(doc)
    if kind == "feedforward":
        return FeedforwardPolicy.from_json(doc)
    if kind == "tabular":
        return StochasticPolicy.from_json(doc)
    raise ValueError(f"unknown model type {kind!r}")


def load_model(path):
    return model_from_json(json.loads(Path(path).read_text()))


def save_model(model, path) -> None:
    doc = model.to_json()
    if isinstance(model, StochasticPolicy):
        doc = {"model": "tabular", **doc}
    Path(path).write_text(json.dumps(doc))
