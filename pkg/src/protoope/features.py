"""Turn logged histories into standardized network inputs.

Every step t of a trajectory becomes one input row: the features of context
x_t followed by a one-hot of the previous action (all zeros at t = 0). The
feedforward encoder looks at a single row; the recurrent encoder reads the
rows of a history in order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory, TrajectoryDataset
from . import sepsis


@dataclass
class StepFeaturizer:
    kind: str  # "sepsis" or "onehot"
    n_states: int
    n_actions: int
    mean: np.ndarray = field(default=None, repr=False)
    std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sepsis", "onehot"):
            raise ValueError(f"unknown featurizer {self.kind!r}")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=float)
            self.std = np.asarray(self.std, dtype=float)

    @property
    def dim(self) -> int:
        ctx = 8 if self.kind == "sepsis" else self.n_states
        return ctx + self.n_actions

    def _raw(self, contexts: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=np.int64)
        if self.kind == "sepsis":
            ctx = sepsis.state_features(contexts)
        else:
            ctx = np.zeros((len(contexts), self.n_states))
            ctx[np.arange(len(contexts)), contexts] = 1.0
        act = np.zeros((len(contexts), self.n_actions))
        has = prev_actions >= 0
        act[np.flatnonzero(has), prev_actions[has]] = 1.0
        return np.concatenate([ctx, act], axis=1)

    def fit(self, dataset: TrajectoryDataset) -> "StepFeaturizer":
        raw = self._raw(dataset.flat_contexts(), dataset.flat_prev_actions())
        self.mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        self.std = np.where(std > 1e-8, std, 1.0)
        return self

    def transform(self, contexts, prev_actions) -> np.ndarray:
        if self.mean is None:
            raise RuntimeError("featurizer is not fitted")
        return (self._raw(contexts, np.asarray(prev_actions, dtype=np.int64)) - self.mean) / self.std

    def dataset_rows(self, dataset: TrajectoryDataset) -> np.ndarray:
        return self.transform(dataset.flat_contexts(), dataset.flat_prev_actions())

    def history_rows(self, traj: Trajectory, t: int) -> np.ndarray:
        """Input rows for the history ending at context x_t."""
        ctx = np.asarray(traj.contexts[: t + 1], dtype=np.int64)
        prev = np.concatenate([[-1], np.asarray(traj.actions[:t], dtype=np.int64)])
        return self.transform(ctx, prev)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StepFeaturizer":
        return cls(doc["kind"], doc["n_states"], doc["n_actions"], doc["mean"], doc["std"])


class SequenceData:
    """A dataset prepared for an encoder: flat rows plus per-trajectory layout."""

    def __init__(self, dataset: TrajectoryDataset, featurizer: StepFeaturizer):
        self.dataset = dataset
        self.rows = featurizer.dataset_rows(dataset)
        self.actions = dataset.flat_actions()
        self.lengths = dataset.lengths
        self.offsets = dataset.offsets
        self.refs = np.array(dataset.step_index(), dtype=np.int64).reshape(-1, 2)

    @property
    def n_steps(self) -> int:
        return len(self.rows)

    @property
    def n_trajectories(self) -> int:
        return len(self.lengths)

    def steps_of(self, traj_ids) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in traj_ids])

    def padded(self, traj_ids) -> tuple[np.ndarray, np.ndarray]:
        """(batch, T, d) inputs and (batch, T) mask for the given trajectories."""
        traj_ids = np.asarray(traj_ids)
        L = self.lengths[traj_ids]
        T = int(L.max())
        X = np.zeros((len(traj_ids), T, self.rows.shape[1]))
        mask = np.arange(T)[None, :] < L[:, None]
        for b, i in enumerate(traj_ids):
            X[b, : L[b]] = self.rows[self.offsets[i] : self.offsets[i + 1]]
        return X, mask
