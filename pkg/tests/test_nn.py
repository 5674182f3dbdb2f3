import numpy as np
import pytest

from protoope.features import SequenceData
from protoope.nn import Adam, FfnEncoder, NumericalError, RnnEncoder, check_finite, nll_and_grad, softmax

from helpers import central_diff, rel_error, tabular_dataset, toy_model


def test_zero_weights_give_zero_encoding():
    enc = FfnEncoder(4, (3, 2))
    for v in enc.params.values():
        v[...] = 0.0
    assert np.all(enc.forward(np.random.default_rng(0).normal(size=(5, 4)))[0] == 0.0)


def test_rnn_length_one_is_single_cell():
    rng = np.random.default_rng(1)
    enc = RnnEncoder(3, (4, 2), rng)
    x = rng.normal(size=3)
    h1 = np.tanh(x @ enc.params["enc.0.Wx"] + enc.params["enc.0.b"])
    h2 = np.tanh(h1 @ enc.params["enc.1.Wx"] + enc.params["enc.1.b"])
    np.testing.assert_allclose(enc.encode_rows(x[None]), h2, atol=1e-15)


@pytest.mark.parametrize("kind", ["ffn", "rnn"])
def test_encoder_jacobian(kind):
    rng = np.random.default_rng(2)
    enc = (FfnEncoder if kind == "ffn" else RnnEncoder)(3, (4, 3), rng)
    for k in enc.params:
        enc.params[k] = rng.uniform(-0.5, 0.5, enc.params[k].shape)
    X = rng.uniform(-1, 1, (2, 3)) if kind == "ffn" else rng.uniform(-1, 1, (2, 3, 3))
    G = rng.normal(size=enc.forward(X)[0].shape)

    def f():
        return float(np.sum(enc.forward(X)[0] * G))

    _, cache = enc.forward(X)
    grads = enc.backward(cache, G)
    for name, p in enc.params.items():
        assert rel_error(grads[name], central_diff(f, p)) < 1e-4, name


def test_rnn_order_sensitive_ffn_order_free():
    ds = tabular_dataset(3)
    traj = max(ds, key=len)
    assert len(traj) >= 2 and len(set(traj.contexts)) > 1
    m_rnn = toy_model(ds, 0, encoder="rnn")
    m_ffn = toy_model(ds, 0, encoder="ffn")
    rows = m_rnn.featurizer.history_rows(traj, len(traj) - 1)
    assert not np.allclose(m_rnn.encoder.encode_rows(rows), m_rnn.encoder.encode_rows(rows[::-1]))
    # the feedforward encoder only reads the final row
    padded = np.concatenate([rows[::-1], rows[-1:]])
    assert np.array_equal(m_ffn.encoder.encode_rows(rows), m_ffn.encoder.encode_rows(padded))


def test_uniform_nll_is_log_k():
    loss, _ = nll_and_grad(np.zeros((1, 8)), np.array([3]))
    assert loss == pytest.approx(np.log(8))


def test_nll_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    _, g = nll_and_grad(logits, y)
    assert rel_error(g, central_diff(lambda: nll_and_grad(logits, y)[0], logits)) < 1e-6


def test_softmax_stable():
    p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_adam_zero_gradient_no_decay():
    p = {"w": np.array([1.0, -2.0])}
    Adam(1e-3, 0.0).update(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -5.0, 1e-3])
    Adam(1e-2, 0.0).update(p, {"w": g})
    np.testing.assert_allclose(p["w"] - [1.0, -2.0, 0.5], -1e-2 * np.sign(g), rtol=1e-4)


def test_adam_quadratic():
    rng = np.random.default_rng(5)
    A = np.diag(rng.uniform(0.5, 2.0, 4))
    b = rng.normal(size=4)
    p = {"x": np.zeros(4)}
    opt = Adam(0.1, 0.0)
    for _ in range(200):
        opt.update(p, {"x": A @ p["x"] - b})
    assert np.linalg.norm(A @ p["x"] - b) < 1e-3


def test_adam_decoupled_decay():
    p = {"w": np.array([2.0])}
    Adam(0.1, 0.5).update(p, {"w": np.array([0.0])})
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_check_finite():
    with pytest.raises(NumericalError):
        check_finite("x", np.array([1.0, np.nan]))
