"""Trajectory containers and their JSON-lines serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

TERMINATIONS = ("discharged", "died", "censored_at_horizon")


@dataclass
class Trajectory:
    """One logged episode: contexts (state indices), actions and rewards.

    ``final_context`` is the state entered after the last action, when known.
    It is not needed by the estimators but lets ``estimate_mdp`` use the last
    transition of every episode.
    """

    contexts: list[int]
    actions: list[int]
    step_rewards: list[float]
    terminated: str = "censored_at_horizon"
    final_context: Optional[int] = None

    def __post_init__(self):
        if not (len(self.contexts) == len(self.actions) == len(self.step_rewards)):
            raise ValueError("contexts, actions and step_rewards must have equal length")
        if len(self.contexts) == 0:
            raise ValueError("empty trajectory")
        if self.terminated not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.terminated!r}")

    def __len__(self) -> int:
        return len(self.contexts)

    @property
    def terminal_reward(self) -> float:
        for r in reversed(self.step_rewards):
            if r != 0:
                return float(r)
        return 0.0

    @property
    def reward(self) -> float:
        """Total episode reward (equal to the terminal reward in the simulator)."""
        return float(sum(self.step_rewards))

    def to_json(self) -> dict:
        doc = {
            "contexts": [int(c) for c in self.contexts],
            "actions": [int(a) for a in self.actions],
            "reward": self.reward,
            "terminated": self.terminated,
        }
        if self.final_context is not None:
            doc["final_context"] = int(self.final_context)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Trajectory":
        n = len(doc["contexts"])
        rewards = [0.0] * n
        rewards[-1] = float(doc["reward"])
        return cls(
            contexts=[int(c) for c in doc["contexts"]],
            actions=[int(a) for a in doc["actions"]],
            step_rewards=rewards,
            terminated=doc.get("terminated", "censored_at_horizon"),
            final_context=doc.get("final_context"),
        )


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return TrajectoryDataset(self.trajectories[i])
        return self.trajectories[i]

    def subset(self, indices: Iterable[int]) -> "TrajectoryDataset":
        return TrajectoryDataset([self.trajectories[i] for i in indices])

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.trajectories], dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        """Start index of every trajectory in the flattened (trajectory, t) order."""
        return np.concatenate([[0], np.cumsum(self.lengths)])

    @property
    def n_pairs(self) -> int:
        return int(self.lengths.sum())

    def flat_contexts(self) -> np.ndarray:
        return np.concatenate([np.asarray(t.contexts, dtype=np.int64) for t in self.trajectories])

    def flat_actions(self) -> np.ndarray:
        return np.concatenate([np.asarray(t.actions, dtype=np.int64) for t in self.trajectories])

    def flat_prev_actions(self) -> np.ndarray:
        """Action preceding each step, -1 at t = 0."""
        out = []
        for t in self.trajectories:
            prev = np.empty(len(t), dtype=np.int64)
            prev[0] = -1
            prev[1:] = t.actions[:-1]
            out.append(prev)
        return np.concatenate(out)

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=float)

    def step_index(self) -> list[tuple[int, int]]:
        """(trajectory id, time) for every step in flattened order."""
        return [(i, t) for i, traj in enumerate(self.trajectories) for t in range(len(traj))]


def write_jsonl(dataset: TrajectoryDataset, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for traj in dataset:
            fh.write(json.dumps(traj.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> TrajectoryDataset:
    trajs = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                trajs.append(Trajectory.from_json(json.loads(line)))
    return TrajectoryDataset(trajs)
