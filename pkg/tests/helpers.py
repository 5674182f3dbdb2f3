"""Shared builders and oracles for the test suite."""

import numpy as np

from protoope.data import Trajectory, TrajectoryDataset
from protoope.features import SequenceData, StepFeaturizer
from protoope.mdp import StochasticPolicy, random_mdp, sample_trajectories
from protoope.nn import make_encoder
from protoope.prototype import PrototypeModel


def rel_error(a, b, floor=1e-6) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar f() w.r.t. array x (mutated in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def tabular_dataset(seed: int, n: int = 30, n_states: int = 5, n_actions: int = 3, horizon: int = 4):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(n_states, n_actions, rng, n_terminal=2)
    pol = StochasticPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))
    return sample_trajectories(mdp, pol, n, horizon, rng)


def toy_model(dataset, seed: int, n_prototypes: int = 3, q: int = 2, encoder: str = "ffn",
              hidden=(6, 5), n_states: int = 5, n_actions: int = 3, d_min: float = 1.0) -> PrototypeModel:
    """Small prototype model with parameters uniform in [-0.5, 0.5] and free latent prototypes."""
    rng = np.random.default_rng(seed)
    feat = StepFeaturizer("onehot", n_states, n_actions).fit(dataset)
    enc = make_encoder(encoder, feat.dim, hidden, rng)
    for k in enc.params:
        enc.params[k] = rng.uniform(-0.5, 0.5, enc.params[k].shape)
    n = n_prototypes
    return PrototypeModel(
        featurizer=feat, encoder=enc,
        prototypes=rng.uniform(-0.5, 0.5, (n, hidden[-1])),
        refs=np.zeros((n, 2), dtype=np.int64),
        histories=[{"contexts": [0], "actions": [0]} for _ in range(n)],
        B=rng.uniform(-0.5, 0.5, (n_actions, n)), c=rng.uniform(-0.5, 0.5, n_actions),
        q=q, lambdas={"d": 0.3, "c": 0.2, "e": 0.1}, d_min=d_min,
    )


def separable_dataset(n_traj: int = 200, seed: int = 0):
    """Two context clusters, one action each: contexts 0-1 take action 0, contexts 2-3 take action 1."""
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n_traj):
        c = int(rng.integers(4))
        trajs.append(Trajectory([c], [0 if c < 2 else 1], [0.0], "censored_at_horizon"))
    return TrajectoryDataset(trajs)


def straight_line_propensities(model: PrototypeModel, z: np.ndarray) -> np.ndarray:
    """Direct evaluation of the truncated RBF-softmax formula with Python loops."""
    n, k = model.n, model.n_actions
    s = []
    for j in range(n):
        d2 = 0.0
        for a, b in zip(model.prototypes[j], z):
            d2 += (a - b) ** 2
        s.append(np.exp(-d2))
    ranked = sorted(s, reverse=True)
    thr = ranked[model.q - 1]
    s = [v if v >= thr else 0.0 for v in s]
    logits = [model.c[a] + sum(model.B[a, j] * s[j] for j in range(n)) for a in range(k)]
    mx = max(logits)
    e = [np.exp(v - mx) for v in logits]
    tot = sum(e)
    return np.array([v / tot for v in e])


# Acceptance results, printed by the terminal-summary hook in conftest.py
ACCEPTANCE: list = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append((number, f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"))
    return ok
