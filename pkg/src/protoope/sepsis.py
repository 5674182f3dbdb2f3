"""Self-contained discrete sepsis simulator.

A patient is described by a diabetes flag, four discretized vitals and the
treatments given at the previous step. Eight actions switch antibiotics,
vasopressors and mechanical ventilation on or off. A patient dies (reward -1)
as soon as three or more vitals are abnormal and is discharged (reward +1)
when all vitals are normal and no treatment was just given.

``step`` samples the dynamics effect by effect; ``exact_transition_tensor``
composes the same effects as per-vital stochastic matrices. The two are kept
deliberately independent so one can check the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Trajectory, TrajectoryDataset
from .mdp import StochasticPolicy, TabularMdp

N_HR, N_SBP, N_O2, N_GLU = 3, 3, 2, 5
N_ACTIONS = 8
N_STATES = 2 * N_HR * N_SBP * N_O2 * N_GLU * N_ACTIONS  # 1440

LOW, NORMAL, HIGH = 0, 1, 2
GLU_NORMAL = 2
P_DIABETIC = 0.2

HR_LEVELS = ("low", "normal", "high")
SBP_LEVELS = ("low", "normal", "high")
O2_LEVELS = ("low", "normal")
GLU_LEVELS = ("very_low", "low", "normal", "high", "very_high")

# Initial vital marginals (before conditioning on a nonterminal start).
INIT_HR = np.full(N_HR, 1 / 3)
INIT_SBP = np.full(N_SBP, 1 / 3)
INIT_O2 = np.array([0.2, 0.8])
INIT_GLU = {
    False: np.array([0.0, 0.15, 0.7, 0.15, 0.0]),
    True: np.array([0.1, 0.2, 0.4, 0.2, 0.1]),
}

# Treatment and fluctuation constants.
ABX_FIX = 0.5
ABX_RELAPSE = 0.1
VENT_FIX = 0.7
VENT_RELAPSE = 0.1
VASO_UP = 0.7
VASO_UP1_DIAB, VASO_UP2_DIAB = 0.5, 0.4
VASO_GLU_UP = 0.5
VASO_DROP = {False: 0.1, True: 0.05}
FLUCT = 0.1
FLUCT_GLU_DIAB = 0.3


@dataclass(frozen=True)
class TreatmentAction:
    abx: bool = False
    vaso: bool = False
    vent: bool = False

    @property
    def index(self) -> int:
        return int(self.abx) + 2 * int(self.vaso) + 4 * int(self.vent)

    @classmethod
    def from_index(cls, index: int) -> "TreatmentAction":
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index {index} out of range")
        return cls(bool(index & 1), bool(index & 2), bool(index & 4))


@dataclass(frozen=True)
class PatientState:
    diabetic: bool
    heart_rate: int
    sys_bp: int
    oxygen: int
    glucose: int
    prev_abx: bool = False
    prev_vaso: bool = False
    prev_vent: bool = False

    @property
    def index(self) -> int:
        prev = TreatmentAction(self.prev_abx, self.prev_vaso, self.prev_vent).index
        return state_index(self.diabetic, self.heart_rate, self.sys_bp, self.oxygen, self.glucose, prev)

    @classmethod
    def from_index(cls, index: int) -> "PatientState":
        d, hr, sbp, o2, glu, prev = (int(v) for v in decode_states(np.asarray([index]))[:, 0])
        act = TreatmentAction.from_index(prev)
        return cls(bool(d), hr, sbp, o2, glu, act.abx, act.vaso, act.vent)

    @property
    def n_abnormal(self) -> int:
        return int(n_abnormal(self.heart_rate, self.sys_bp, self.oxygen, self.glucose))

    @property
    def is_terminal(self) -> bool:
        return bool(is_death(self.index) or is_discharge(self.index))


def state_index(diabetic, hr, sbp, o2, glu, prev_action):
    return ((((np.asarray(diabetic, dtype=np.int64) * N_HR + hr) * N_SBP + sbp) * N_O2 + o2) * N_GLU + glu) * N_ACTIONS + prev_action


def decode_states(index) -> np.ndarray:
    """Rows: diabetic, hr, sbp, o2, glucose, previous action index."""
    idx = np.asarray(index, dtype=np.int64)
    if np.any((idx < 0) | (idx >= N_STATES)):
        raise ValueError("state index out of range")
    prev = idx % N_ACTIONS
    idx = idx // N_ACTIONS
    glu = idx % N_GLU
    idx = idx // N_GLU
    o2 = idx % N_O2
    idx = idx // N_O2
    sbp = idx % N_SBP
    idx = idx // N_SBP
    hr = idx % N_HR
    d = idx // N_HR
    return np.stack([d, hr, sbp, o2, glu, prev])


def n_abnormal(hr, sbp, o2, glu):
    return (
        (np.asarray(hr) != NORMAL).astype(int)
        + (np.asarray(sbp) != NORMAL)
        + (np.asarray(o2) != 1)
        + (np.asarray(glu) != GLU_NORMAL)
    )


def is_death(index):
    _, hr, sbp, o2, glu, _ = decode_states(index)
    return n_abnormal(hr, sbp, o2, glu) >= 3


def is_discharge(index):
    _, hr, sbp, o2, glu, prev = decode_states(index)
    return (n_abnormal(hr, sbp, o2, glu) == 0) & (prev == 0)


def state_features(index) -> np.ndarray:
    """Numeric features per state: diabetic, four vital levels, three treatment flags."""
    d, hr, sbp, o2, glu, prev = decode_states(index)
    return np.stack([d, hr, sbp, o2, glu, prev & 1, (prev >> 1) & 1, (prev >> 2) & 1], axis=-1).astype(float)


# --------------------------------------------------------------------------
# Sampling dynamics


def initial_states(n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized draw of ``n`` nonterminal start states (indices)."""
    diabetic = rng.random(n) < P_DIABETIC
    hr = np.empty(n, dtype=np.int64)
    sbp = np.empty(n, dtype=np.int64)
    o2 = np.empty(n, dtype=np.int64)
    glu = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    cdf_nd, cdf_d = np.cumsum(INIT_GLU[False]), np.cumsum(INIT_GLU[True])
    while len(todo):
        m = len(todo)
        hr[todo] = rng.integers(0, N_HR, m)
        sbp[todo] = rng.integers(0, N_SBP, m)
        o2[todo] = (rng.random(m) < INIT_O2[1]).astype(np.int64)
        u = rng.random(m)
        g_nd = np.searchsorted(cdf_nd, u, side="right")
        g_d = np.searchsorted(cdf_d, u, side="right")
        glu[todo] = np.minimum(np.where(diabetic[todo], g_d, g_nd), N_GLU - 1)
        k = n_abnormal(hr[todo], sbp[todo], o2[todo], glu[todo])
        todo = todo[(k >= 3) | (k == 0)]
    return state_index(diabetic, hr, sbp, o2, glu, 0)


def initial_state(rng: np.random.Generator) -> PatientState:
    return PatientState.from_index(int(initial_states(1, rng)[0]))


def _fluctuate(level, p, n_levels, u_move, u_dir):
    move = u_move < p
    step = np.where(u_dir < 0.5, -1, 1)
    return np.where(move, np.clip(level + step, 0, n_levels - 1), level)


def step_batch(states: np.ndarray, actions: np.ndarray, rng: np.random.Generator):
    """Advance many patients one step. Returns (next_states, rewards, done)."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    if np.any(is_death(states) | is_discharge(states)):
        raise ValueError("cannot step a terminal state")
    d, hr, sbp, o2, glu, prev = decode_states(states)
    d = d.astype(bool)
    abx, vaso, vent = (actions & 1) > 0, (actions & 2) > 0, (actions & 4) > 0
    p_abx, p_vaso, p_vent = (prev & 1) > 0, (prev & 2) > 0, (prev & 4) > 0
    n = len(states)
    u = rng.random((n, 16))

    # antibiotics
    hr = np.where(abx & (hr == HIGH) & (u[:, 0] < ABX_FIX), NORMAL, hr)
    sbp = np.where(abx & (sbp == HIGH) & (u[:, 1] < ABX_FIX), NORMAL, sbp)
    withdrawn = p_abx & ~abx
    hr = np.where(withdrawn & (hr == NORMAL) & (u[:, 2] < ABX_RELAPSE), HIGH, hr)
    sbp = np.where(withdrawn & (sbp == NORMAL) & (u[:, 3] < ABX_RELAPSE), HIGH, sbp)

    # ventilation
    o2 = np.where(vent & (o2 == 0) & (u[:, 4] < VENT_FIX), 1, o2)
    o2 = np.where(p_vent & ~vent & (o2 == 1) & (u[:, 5] < VENT_RELAPSE), 0, o2)

    # vasopressors
    up = np.where(
        d,
        np.where(u[:, 6] < VASO_UP1_DIAB, 1, np.where(u[:, 6] < VASO_UP1_DIAB + VASO_UP2_DIAB, 2, 0)),
        np.where(u[:, 6] < VASO_UP, 1, 0),
    )
    sbp = np.where(vaso, np.minimum(sbp + up, N_SBP - 1), sbp)
    glu = np.where(vaso & d & (u[:, 7] < VASO_GLU_UP), np.minimum(glu + 1, N_GLU - 1), glu)
    drop = np.where(d, VASO_DROP[True], VASO_DROP[False])
    sbp = np.where(p_vaso & ~vaso & (u[:, 8] < drop), np.maximum(sbp - 1, 0), sbp)

    # spontaneous fluctuation of untreated vitals
    hr = np.where(~abx, _fluctuate(hr, FLUCT, N_HR, u[:, 9], u[:, 10]), hr)
    sbp = np.where(~(abx | vaso), _fluctuate(sbp, FLUCT, N_SBP, u[:, 11], u[:, 12]), sbp)
    o2 = np.where(~vent, _fluctuate(o2, FLUCT, N_O2, u[:, 13], u[:, 14]), o2)
    p_glu = np.where(d, FLUCT_GLU_DIAB, FLUCT)
    # one uniform drives both move and direction for glucose
    g_move = u[:, 15] < p_glu
    g_dir = np.where(u[:, 15] < p_glu / 2, -1, 1)
    glu = np.where(~(vaso & d) & g_move, np.clip(glu + g_dir, 0, N_GLU - 1), glu)

    nxt = state_index(d, hr, sbp, o2, glu, actions)
    dead = is_death(nxt)
    home = is_discharge(nxt)
    reward = np.where(dead, -1.0, np.where(home, 1.0, 0.0))
    return nxt, reward, dead | home


def step(state: PatientState, action: TreatmentAction, rng: np.random.Generator):
    nxt, reward, done = step_batch(np.array([state.index]), np.array([action.index]), rng)
    return PatientState.from_index(int(nxt[0])), float(reward[0]), bool(done[0])


def generate_trajectories(
    policy: StochasticPolicy, n: int, max_len: int, rng: np.random.Generator
) -> TrajectoryDataset:
    """Roll out ``n`` independent episodes of at most ``max_len`` steps."""
    if n < 1 or max_len < 1:
        raise ValueError("n and max_len must be >= 1")
    cdf = np.cumsum(policy.probs, axis=1)
    states = initial_states(n, rng)
    S = np.zeros((n, max_len), dtype=np.int64)
    A = np.zeros((n, max_len), dtype=np.int64)
    R = np.zeros((n, max_len))
    length = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)  # 0 censored, 1 discharged, 2 died
    alive = np.ones(n, dtype=bool)
    for t in range(max_len):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        s = states[idx]
        a = np.minimum((rng.random(len(idx))[:, None] >= cdf[s]).sum(axis=1), N_ACTIONS - 1)
        s2, r, done = step_batch(s, a, rng)
        S[idx, t], A[idx, t], R[idx, t] = s, a, r
        length[idx] += 1
        states[idx] = s2
        status[idx] = np.where(r > 0, 1, np.where(r < 0, 2, 0))
        alive[idx] = ~done
    names = ("censored_at_horizon", "discharged", "died")
    trajs = [
        Trajectory(S[i, : length[i]].tolist(), A[i, : length[i]].tolist(), R[i, : length[i]].tolist(),
                   names[status[i]], int(states[i]))
        for i in range(n)
    ]
    return TrajectoryDataset(trajs)


def generate_pairs(
    policy: StochasticPolicy, n_pairs: int, max_len: int, rng: np.random.Generator, chunk: int = 1024
) -> TrajectoryDataset:
    """Collect whole episodes until they hold at least ``n_pairs`` state-action pairs."""
    trajs: list[Trajectory] = []
    total = 0
    while total < n_pairs:
        for traj in generate_trajectories(policy, chunk, max_len, rng):
            trajs.append(traj)
            total += len(traj)
            if total >= n_pairs:
                break
    return TrajectoryDataset(trajs)


# --------------------------------------------------------------------------
# Analytic transition tensor


def _keep(n):
    return np.eye(n)


def _move(n, src, dst, p):
    M = np.eye(n)
    M[src, src] -= p
    M[src, dst] += p
    return M


def _shift(n, probs):
    """Each level moves up by k (clamped) with probability probs[k]."""
    M = np.zeros((n, n))
    for lvl in range(n):
        M[lvl, lvl] += 1.0 - sum(probs.values())
        for k, p in probs.items():
            M[lvl, min(max(lvl + k, 0), n - 1)] += p
    return M


def _fluct_matrix(n, p):
    return _shift(n, {-1: p / 2, 1: p / 2})


def vital_matrices(diabetic: bool, prev: int, action: int):
    """Per-vital one-step transition matrices (hr, sbp, o2, glucose)."""
    abx, vaso, vent = action & 1, action & 2, action & 4
    p_abx, p_vaso, p_vent = prev & 1, prev & 2, prev & 4
    hr, sbp, o2, glu = _keep(N_HR), _keep(N_SBP), _keep(N_O2), _keep(N_GLU)
    if abx:
        hr = hr @ _move(N_HR, HIGH, NORMAL, ABX_FIX)
        sbp = sbp @ _move(N_SBP, HIGH, NORMAL, ABX_FIX)
    elif p_abx:
        hr = hr @ _move(N_HR, NORMAL, HIGH, ABX_RELAPSE)
        sbp = sbp @ _move(N_SBP, NORMAL, HIGH, ABX_RELAPSE)
    if vent:
        o2 = o2 @ _move(N_O2, 0, 1, VENT_FIX)
    elif p_vent:
        o2 = o2 @ _move(N_O2, 1, 0, VENT_RELAPSE)
    if vaso:
        if diabetic:
            sbp = sbp @ _shift(N_SBP, {1: VASO_UP1_DIAB, 2: VASO_UP2_DIAB})
            glu = glu @ _shift(N_GLU, {1: VASO_GLU_UP})
        else:
            sbp = sbp @ _shift(N_SBP, {1: VASO_UP})
    elif p_vaso:
        sbp = sbp @ _shift(N_SBP, {-1: VASO_DROP[bool(diabetic)]})
    if not abx:
        hr = hr @ _fluct_matrix(N_HR, FLUCT)
    if not (abx or vaso):
        sbp = sbp @ _fluct_matrix(N_SBP, FLUCT)
    if not vent:
        o2 = o2 @ _fluct_matrix(N_O2, FLUCT)
    if not (vaso and diabetic):
        glu = glu @ _fluct_matrix(N_GLU, FLUCT_GLU_DIAB if diabetic else FLUCT)
    return hr, sbp, o2, glu


def exact_initial_dist() -> np.ndarray:
    dist = np.zeros(N_STATES)
    for d in (False, True):
        joint = np.einsum("a,b,c,d->abcd", INIT_HR, INIT_SBP, INIT_O2, INIT_GLU[d])
        hr, sbp, o2, glu = np.indices(joint.shape)
        k = n_abnormal(hr, sbp, o2, glu)
        joint = np.where((k >= 3) | (k == 0), 0.0, joint)
        joint /= joint.sum()
        idx = state_index(d, hr, sbp, o2, glu, 0)
        dist[idx.ravel()] += (P_DIABETIC if d else 1 - P_DIABETIC) * joint.ravel()
    return dist


def exact_transition_tensor() -> TabularMdp:
    """The simulator as a 1440-state tabular MDP."""
    P = np.zeros((N_STATES, N_ACTIONS, N_STATES))
    all_idx = np.arange(N_STATES)
    death, home = is_death(all_idx), is_discharge(all_idx)
    terminal = death | home
    reward = np.where(death, -1.0, np.where(home, 1.0, 0.0))
    d_all, hr_all, sbp_all, o2_all, glu_all, prev_all = decode_states(all_idx)
    grid = np.indices((N_HR, N_SBP, N_O2, N_GLU)).reshape(4, -1)
    for d in (0, 1):
        for prev in range(N_ACTIONS):
            rows = np.flatnonzero((d_all == d) & (prev_all == prev) & ~terminal)
            for a in range(N_ACTIONS):
                M_hr, M_sbp, M_o2, M_glu = vital_matrices(bool(d), prev, a)
                dest = state_index(d, grid[0], grid[1], grid[2], grid[3], a)
                for s in rows:
                    joint = np.einsum(
                        "a,b,c,d->abcd", M_hr[hr_all[s]], M_sbp[sbp_all[s]], M_o2[o2_all[s]], M_glu[glu_all[s]]
                    ).ravel()
                    P[s, a, dest] = joint
    for s in np.flatnonzero(terminal):
        P[s, :, s] = 1.0
    return TabularMdp(P, reward, terminal, exact_initial_dist())
