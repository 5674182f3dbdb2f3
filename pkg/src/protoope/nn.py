"""Small numpy networks with hand-written reverse-mode gradients.

Parameters live in flat ``dict[str, ndarray]`` objects keyed by layer name
(``enc.0.W``, ``head.b``, ...). Every forward pass returns a cache that the
matching backward pass consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import SequenceData


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite."""


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values in {name}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def nll_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. logits."""
    m = len(labels)
    logp = log_softmax(logits)
    loss = -logp[np.arange(m), labels].mean()
    d = np.exp(logp)
    d[np.arange(m), labels] -= 1.0
    return float(loss), d / m


class FfnEncoder:
    """Rectified feedforward encoder; reads only the last row of a history."""

    kind = "ffn"
    prefix = "enc"

    def __init__(self, in_dim: int, hidden=(64, 64), rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.params: dict[str, np.ndarray] = {}
        rng = rng or np.random.default_rng(0)
        sizes = (in_dim,) + self.hidden
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"{self.prefix}.{i}.W"] = glorot(rng, a, b)
            self.params[f"{self.prefix}.{i}.b"] = np.zeros(b)

    @property
    def out_dim(self) -> int:
        return self.hidden[-1]

    def forward(self, X: np.ndarray):
        if X.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got {X.shape[-1]}")
        acts = [X]
        h = X
        for i in range(len(self.hidden)):
            h = np.maximum(h @ self.params[f"{self.prefix}.{i}.W"] + self.params[f"{self.prefix}.{i}.b"], 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dZ: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        d = dZ
        for i in reversed(range(len(self.hidden))):
            d = d * (acts[i + 1] > 0)
            grads[f"{self.prefix}.{i}.W"] = acts[i].T @ d
            grads[f"{self.prefix}.{i}.b"] = d.sum(axis=0)
            d = d @ self.params[f"{self.prefix}.{i}.W"].T
        return grads

    # training units are individual steps
    def n_units(self, data: SequenceData) -> int:
        return data.n_steps

    def batch_forward(self, data: SequenceData, units: np.ndarray):
        Z, cache = self.forward(data.rows[units])
        return Z, units, cache

    def batch_backward(self, cache, dZ):
        return self.backward(cache, dZ)

    def encode_all(self, data: SequenceData) -> np.ndarray:
        return self.forward(data.rows)[0]

    def encode_rows(self, rows: np.ndarray) -> np.ndarray:
        """Encoding of one history given its input rows."""
        return self.forward(rows[-1:])[0][0]

    def to_json(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "hidden": list(self.hidden)}


class RnnEncoder:
    """Stacked Elman cells with tanh; the encoding is the top hidden state."""

    kind = "rnn"
    prefix = "enc"

    def __init__(self, in_dim: int, hidden=(64, 64), rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.params: dict[str, np.ndarray] = {}
        rng = rng or np.random.default_rng(0)
        sizes = (in_dim,) + self.hidden
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"{self.prefix}.{i}.Wx"] = glorot(rng, a, b)
            self.params[f"{self.prefix}.{i}.Wh"] = glorot(rng, b, b)
            self.params[f"{self.prefix}.{i}.b"] = np.zeros(b)

    @property
    def out_dim(self) -> int:
        return self.hidden[-1]

    def forward(self, X: np.ndarray):
        """X: (batch, T, d). Returns top-layer states for every prefix, (batch, T, h)."""
        if X.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got {X.shape[-1]}")
        B, T, _ = X.shape
        layer_in = X
        states = []
        for i, h_dim in enumerate(self.hidden):
            Wx = self.params[f"{self.prefix}.{i}.Wx"]
            Wh = self.params[f"{self.prefix}.{i}.Wh"]
            b = self.params[f"{self.prefix}.{i}.b"]
            xw = layer_in @ Wx + b
            H = np.zeros((B, T, h_dim))
            h = np.zeros((B, h_dim))
            for t in range(T):
                h = np.tanh(xw[:, t] + h @ Wh)
                H[:, t] = h
            states.append(H)
            layer_in = H
        return layer_in, (X, states)

    def backward(self, cache, dH: np.ndarray) -> dict[str, np.ndarray]:
        X, states = cache
        grads = {}
        d_out = dH
        for i in reversed(range(len(self.hidden))):
            Wx = self.params[f"{self.prefix}.{i}.Wx"]
            Wh = self.params[f"{self.prefix}.{i}.Wh"]
            H = states[i]
            inp = X if i == 0 else states[i - 1]
            B, T, h_dim = H.shape
            d_pre = np.zeros_like(H)
            carry = np.zeros((B, h_dim))
            for t in reversed(range(T)):
                dh = d_out[:, t] + carry
                dp = dh * (1.0 - H[:, t] ** 2)
                d_pre[:, t] = dp
                carry = dp @ Wh.T
            prev = np.concatenate([np.zeros((B, 1, h_dim)), H[:, :-1]], axis=1)
            grads[f"{self.prefix}.{i}.Wx"] = np.einsum("btd,bth->dh", inp, d_pre)
            grads[f"{self.prefix}.{i}.Wh"] = np.einsum("btk,bth->kh", prev, d_pre)
            grads[f"{self.prefix}.{i}.b"] = d_pre.sum(axis=(0, 1))
            d_out = d_pre @ Wx.T
        return grads

    # training units are whole trajectories
    def n_units(self, data: SequenceData) -> int:
        return data.n_trajectories

    def batch_forward(self, data: SequenceData, units: np.ndarray):
        X, mask = data.padded(units)
        H, cache = self.forward(X)
        steps = data.steps_of(units)
        return H[mask], steps, (cache, mask)

    def batch_backward(self, cache, dZ):
        inner, mask = cache
        dH = np.zeros(mask.shape + (self.out_dim,))
        dH[mask] = dZ
        return self.backward(inner, dH)

    def encode_all(self, data: SequenceData, chunk: int = 256) -> np.ndarray:
        out = np.zeros((data.n_steps, self.out_dim))
        ids = np.arange(data.n_trajectories)
        for start in range(0, len(ids), chunk):
            units = ids[start : start + chunk]
            Z, steps, _ = self.batch_forward(data, units)
            out[steps] = Z
        return out

    def encode_rows(self, rows: np.ndarray) -> np.ndarray:
        if len(rows) == 0:
            raise ValueError("empty history")
        return self.forward(rows[None])[0][0, -1]

    def to_json(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "hidden": list(self.hidden)}


def make_encoder(kind: str, in_dim: int, hidden=(64, 64), rng=None):
    if kind == "ffn":
        return FfnEncoder(in_dim, hidden, rng)
    if kind == "rnn":
        return RnnEncoder(in_dim, hidden, rng)
    raise ValueError(f"unknown encoder {kind!r}")


def encoder_from_json(doc: dict, params: dict):
    enc = make_encoder(doc["kind"], doc["in_dim"], doc["hidden"])
    for name in enc.params:
        enc.params[name] = np.asarray(params[name], dtype=float)
    return enc


@dataclass
class Adam:
    """Adam with decoupled weight decay."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of ``params``."""
        self.step += 1
        b1c = 1.0 - self.beta1**self.step
        b2c = 1.0 - self.beta2**self.step
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            decay = self.learning_rate * self.weight_decay * p if self.weight_decay else 0.0
            p -= self.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps) + decay


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def params_to_json(params: dict[str, np.ndarray]) -> dict:
    return {k: v.tolist() for k, v in params.items()}
