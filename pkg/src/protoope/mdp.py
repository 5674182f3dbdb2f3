"""Tabular MDPs: exact solvers, policy softening, estimation from logged data.

Rewards are attached to states and paid on *entering* a state. Terminal
states absorb: once entered, no further reward accrues. With ``discount=1``
the value of a policy is its expected total reward, which is finite for the
episodic MDPs used here even when a policy never terminates from some states
(those states earn nothing, provided every state they can reach has zero
reward).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Trajectory, TrajectoryDataset

VI_MAX_SWEEPS = 10_000
PI_MAX_ROUNDS = 1_000
_IMPROVE_EPS = 1e-12


class SolverDivergence(RuntimeError):
    """Raised when a solver hits its iteration cap or a value is unbounded."""


@dataclass
class TabularMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # paid on entering s'
    terminal: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        P = self.transition
        S, A, S2 = P.shape
        if S != S2:
            raise ValueError("transition must have shape (S, A, S)")
        if self.reward.shape != (S,) or self.terminal.shape != (S,) or self.initial_dist.shape != (S,):
            raise ValueError("reward, terminal and initial_dist must have one entry per state")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=atol, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        for s in np.flatnonzero(self.terminal):
            if not np.allclose(P[s, :, s], 1.0, atol=atol, rtol=0):
                raise ValueError(f"terminal state {s} does not self-loop")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > atol:
            raise ValueError("initial_dist must be a probability vector")

    def to_json(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "terminal": self.terminal.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TabularMdp":
        mdp = cls(doc["transition"], doc["reward"], doc["terminal"], doc["initial_dist"])
        if mdp.transition.shape[:2] != (doc["n_states"], doc["n_actions"]):
            raise ValueError("declared sizes disagree with the transition tensor")
        mdp.validate()
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class StochasticPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "StochasticPolicy":
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StochasticPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def action_probs(self, dataset: TrajectoryDataset) -> np.ndarray:
        """Per-step action distributions, flattened in (trajectory, t) order."""
        return self.probs[dataset.flat_contexts()]

    def to_json(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "StochasticPolicy":
        pol = cls(doc["probs"])
        pol.validate()
        return pol


@dataclass
class StateValues:
    values: np.ndarray
    greedy: np.ndarray


def soften(policy: StochasticPolicy, epsilon: float) -> StochasticPolicy:
    """Mix a policy with the uniform one: (1 - eps) * pi + eps / k."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    k = policy.n_actions
    return StochasticPolicy((1.0 - epsilon) * policy.probs + epsilon / k)


def _policy_matrix(mdp: TabularMdp, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    P_pi[mdp.terminal] = 0.0
    r_pi = P_pi @ mdp.reward
    return P_pi, r_pi


def _can_reach_terminal(P_pi: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    reach = terminal.copy()
    while True:
        new = reach | (P_pi[:, reach].sum(axis=1) > 0)
        if np.array_equal(new, reach):
            return reach
        reach = new


def evaluate_policy(mdp: TabularMdp, policy: StochasticPolicy, discount: float = 1.0) -> np.ndarray:
    """Exact state values of a stationary policy (terminal states have value 0)."""
    P_pi, r_pi = _policy_matrix(mdp, policy.probs)
    nt = ~mdp.terminal
    V = np.zeros(mdp.n_states)
    if discount < 1.0:
        idx = np.flatnonzero(nt)
        A = np.eye(len(idx)) - discount * P_pi[np.ix_(idx, idx)]
        V[idx] = np.linalg.solve(A, r_pi[idx])
        return V
    # Undiscounted: states that can never leave the nonterminal set earn their
    # rewards forever, so they must all be zero.
    reach = _can_reach_terminal(P_pi, mdp.terminal)
    closed = nt & ~reach
    if np.any(np.abs(r_pi[closed]) > 0):
        raise SolverDivergence("policy cycles forever through rewarding states; undiscounted value is unbounded")
    idx = np.flatnonzero(nt & reach)
    if len(idx):
        A = np.eye(len(idx)) - P_pi[np.ix_(idx, idx)]
        V[idx] = np.linalg.solve(A, r_pi[idx])
    return V


def q_values(mdp: TabularMdp, values: np.ndarray, discount: float) -> np.ndarray:
    cont = np.where(mdp.terminal, 0.0, values)
    Q = mdp.transition @ (mdp.reward + discount * cont)
    Q[mdp.terminal] = 0.0
    return Q


def policy_iteration(mdp: TabularMdp, discount: float = 1.0) -> StochasticPolicy:
    """Howard policy iteration, returning a deterministic policy.

    Starts from action 0 everywhere; an action is replaced only if another one
    improves its Q-value by more than 1e-12, with ties going to the lowest index.
    """
    if not 0.0 < discount <= 1.0:
        raise ValueError("discount must lie in (0, 1]")
    S, A = mdp.n_states, mdp.n_actions
    actions = np.zeros(S, dtype=np.int64)
    for _ in range(PI_MAX_ROUNDS):
        policy = StochasticPolicy.deterministic(actions, A)
        V = evaluate_policy(mdp, policy, discount)
        Q = q_values(mdp, V, discount)
        best = np.argmax(Q, axis=1)
        current = Q[np.arange(S), actions]
        improve = Q[np.arange(S), best] > current + _IMPROVE_EPS
        if not improve.any():
            return policy
        actions = np.where(improve, best, actions)
    raise SolverDivergence(f"policy iteration did not converge in {PI_MAX_ROUNDS} rounds")


def value_iteration(mdp: TabularMdp, discount: float = 1.0, tol: float = 1e-10) -> StateValues:
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(mdp.n_states)
    for _ in range(VI_MAX_SWEEPS):
        Q = q_values(mdp, V, discount)
        V_new = Q.max(axis=1)
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual <= tol:
            Q = q_values(mdp, V, discount)
            return StateValues(values=V, greedy=np.argmax(Q, axis=1))
    raise SolverDivergence(f"value iteration did not converge in {VI_MAX_SWEEPS} sweeps")


def exact_policy_value(mdp: TabularMdp, policy: StochasticPolicy, horizon: int) -> float:
    """Expected reward of a horizon-capped episode, by forward propagation."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    P_pi, r_pi = _policy_matrix(mdp, policy.probs)
    d = np.where(mdp.terminal, 0.0, mdp.initial_dist)
    total = 0.0
    for _ in range(horizon):
        total += d @ r_pi
        d = d @ P_pi
        d[mdp.terminal] = 0.0
    return float(total)


def estimate_mdp(dataset: TrajectoryDataset, n_states: int, n_actions: int) -> TabularMdp:
    """Maximum-likelihood MDP from logged trajectories.

    Unseen (s, a) pairs become deterministic self-loops. The final transition of
    a trajectory is used only when its ``final_context`` is recorded.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    counts = np.zeros((n_states, n_actions, n_states))
    reward_sum = np.zeros(n_states)
    reward_n = np.zeros(n_states)
    terminal = np.zeros(n_states, dtype=bool)
    init = np.zeros(n_states)
    for traj in dataset:
        init[traj.contexts[0]] += 1
        nxt = list(traj.contexts[1:]) + [traj.final_context]
        for s, a, s2, r in zip(traj.contexts, traj.actions, nxt, traj.step_rewards):
            if s2 is None:
                continue
            counts[s, a, s2] += 1
            reward_sum[s2] += r
            reward_n[s2] += 1
        if traj.final_context is not None and traj.terminated != "censored_at_horizon":
            terminal[traj.final_context] = True
    reward = np.divide(reward_sum, reward_n, out=np.zeros(n_states), where=reward_n > 0)
    totals = counts.sum(axis=2, keepdims=True)
    P = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    unseen = totals[..., 0] == 0
    s_idx, a_idx = np.nonzero(unseen)
    P[s_idx, a_idx, s_idx] = 1.0
    reward[~terminal & (reward_n == 0)] = 0.0
    for s in np.flatnonzero(terminal):
        P[s] = 0.0
        P[s, :, s] = 1.0
    return TabularMdp(P, reward, terminal, init / init.sum())


def sample_trajectories(
    mdp: TabularMdp, policy: StochasticPolicy, n: int, horizon: int, rng: np.random.Generator
) -> TrajectoryDataset:
    """Vectorized rollouts of a tabular MDP (episodes capped at ``horizon`` actions)."""
    init_cdf = np.cumsum(mdp.initial_dist)
    pol_cdf = np.cumsum(policy.probs, axis=1)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    states = np.minimum(np.searchsorted(init_cdf, rng.random(n), side="right"), mdp.n_states - 1)
    S = np.zeros((n, horizon), dtype=np.int64)
    Acts = np.zeros((n, horizon), dtype=np.int64)
    R = np.zeros((n, horizon))
    length = np.zeros(n, dtype=np.int64)
    final = np.full(n, -1, dtype=np.int64)
    alive = ~mdp.terminal[states]
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        s = states[idx]
        u = rng.random(len(idx))
        a = np.minimum((u[:, None] >= pol_cdf[s]).sum(axis=1), mdp.n_actions - 1)
        u = rng.random(len(idx))
        s2 = np.minimum((u[:, None] >= P_cdf[s, a]).sum(axis=1), mdp.n_states - 1)
        S[idx, t] = s
        Acts[idx, t] = a
        R[idx, t] = mdp.reward[s2]
        length[idx] += 1
        final[idx] = s2
        states[idx] = s2
        alive[idx] = ~mdp.terminal[s2]
    trajs = []
    for i in range(n):
        L = length[i]
        if L == 0:
            continue
        r = R[i, :L].tolist()
        ended = mdp.terminal[final[i]]
        last = r[-1]
        status = "censored_at_horizon"
        if ended:
            status = "discharged" if last > 0 else "died" if last < 0 else "censored_at_horizon"
        trajs.append(Trajectory(S[i, :L].tolist(), Acts[i, :L].tolist(), r, status, int(final[i])))
    return TrajectoryDataset(trajs)


def random_mdp(
    n_states: int, n_actions: int, rng: np.random.Generator, n_terminal: int = 2, sparsity: float = 0.0
) -> TabularMdp:
    """Random episodic MDP with +1/-1 terminal states (last ``n_terminal`` states)."""
    P = rng.random((n_states, n_actions, n_states))
    if sparsity > 0:
        P *= rng.random(P.shape) >= sparsity
        P[..., 0] += 1e-3
    P /= P.sum(axis=2, keepdims=True)
    terminal = np.zeros(n_states, dtype=bool)
    reward = np.zeros(n_states)
    if n_terminal:
        terminal[-n_terminal:] = True
        reward[-n_terminal:] = np.where(np.arange(n_terminal) % 2 == 0, 1.0, -1.0)
    for s in np.flatnonzero(terminal):
        P[s] = 0.0
        P[s, :, s] = 1.0
    init = np.where(terminal, 0.0, rng.random(n_states) + 0.1)
    return TabularMdp(P, reward, terminal, init / init.sum())
