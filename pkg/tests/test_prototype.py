import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from protoope.data import Trajectory, TrajectoryDataset
from protoope.features import SequenceData, StepFeaturizer
from protoope.nn import softmax
from protoope.prototype import (
    PrototypeModel,
    TrainConfig,
    cross_validate,
    diversity_penalty,
    full_nll,
    loss_and_grad,
    objective,
    objective_and_grad,
    project,
    propensities,
    prototype_report,
    report_csv,
    similarity_vector,
    sq_dists,
    train,
    truncate,
)

from helpers import central_diff, rel_error, separable_dataset, straight_line_propensities, tabular_dataset, toy_model


@pytest.fixture(scope="module")
def ds():
    return tabular_dataset(0, n=40)


# -- similarity and truncation ----------------------------------------------------


def test_similarity_kernel(ds):
    m = toy_model(ds, 1)
    z = m.prototypes[1].copy()
    assert similarity_vector(m, z)[1] == 1.0
    u = np.zeros_like(z)
    u[0] = 1.0
    m.prototypes[0] = z + u
    assert similarity_vector(m, z)[0] == pytest.approx(np.exp(-1.0), abs=1e-15)


@given(st.floats(0, 5), st.floats(0, 5))
def test_similarity_monotone(a, b):
    m = toy_model(tabular_dataset(0, n=5), 0, n_prototypes=1)
    direction = np.ones(m.prototypes.shape[1]) / np.sqrt(m.prototypes.shape[1])
    s_a = similarity_vector(m, m.prototypes[0] + a * direction)[0]
    s_b = similarity_vector(m, m.prototypes[0] + b * direction)[0]
    if a < b:
        assert s_a >= s_b


def test_truncate_examples():
    s = np.array([0.9, 0.5, 0.1])
    assert np.array_equal(truncate(s, 3), s)
    assert np.array_equal(truncate(s, 1), [0.9, 0.0, 0.0])
    # tie at the q-th value keeps both
    assert np.array_equal(truncate(np.array([0.9, 0.5, 0.5, 0.1]), 2), [0.9, 0.5, 0.5, 0.0])
    with pytest.raises(ValueError):
        truncate(s, 0)


@given(st.lists(st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.7, 1.0]), min_size=1, max_size=8), st.data())
def test_truncate_support(values, data):
    s = np.array(values)
    q = data.draw(st.integers(1, len(s)))
    out = truncate(s, q)
    kept = np.flatnonzero(out > 0)
    if np.any(s > 0):
        assert np.argmax(s) in kept or out[np.argmax(s)] == s.max()
    if len(kept) > q:
        # only ties at the threshold may push the support past q
        thr = np.sort(s)[::-1][q - 1]
        assert np.sum(s > thr) < q and np.all(out[s == thr] == thr)
    np.testing.assert_array_equal(out[out > 0], s[out > 0])


# -- propensities ------------------------------------------------------------------


def test_zero_coefficients_uniform(ds):
    m = toy_model(ds, 2)
    m.B[...] = 0.0
    m.c[...] = 0.0
    np.testing.assert_allclose(propensities(m, ds[0]), 1 / 3)


def test_single_prototype_definition(ds):
    m = toy_model(ds, 3, n_prototypes=1, q=1)
    z = m.encode_history(ds[0])
    s = np.exp(-np.sum((m.prototypes[0] - z) ** 2))
    np.testing.assert_allclose(propensities(m, ds[0]), softmax(s * m.B[:, 0] + m.c), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_propensities_match_straight_line(ds, seed):
    m = toy_model(ds, seed, n_prototypes=2, q=1)
    for traj in list(ds)[:5]:
        for t in range(len(traj)):
            z = m.encode_history(traj, t)
            np.testing.assert_allclose(propensities(m, traj, t), straight_line_propensities(m, z), atol=1e-12)


def test_action_probs_consistent_with_propensities(ds):
    m = toy_model(ds, 4)
    P = m.action_probs(ds)
    for s, (i, t) in enumerate(ds.step_index()):
        np.testing.assert_allclose(P[s], propensities(m, ds[i], t), atol=1e-12)


# -- objective -----------------------------------------------------------------------


def test_diversity_examples():
    P = np.array([[0.0], [2.0]])
    assert diversity_penalty(P, 3.0)[0] == pytest.approx(1.0)
    assert diversity_penalty(P, 2.0)[0] == 0.0
    far = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert diversity_penalty(far, 5.0)[0] == 0.0


def test_cluster_evidence_zero_at_prototypes(ds):
    m = toy_model(ds, 5)
    terms, _, _ = objective_and_grad(m, m.prototypes.copy(), np.zeros(m.n, dtype=np.int64), m.lambdas, 1.0)
    assert terms.r_c == 0.0 and terms.r_e == 0.0


def test_objective_without_regularizers_is_nll(ds):
    m = toy_model(ds, 6)
    cfg = TrainConfig(n_prototypes=3, q=2, lambda_d=0.0, lambda_c=0.0, lambda_e=0.0)
    nll = full_nll(m, SequenceData(ds, m.featurizer), truncated=False)
    assert abs(objective(m, ds, cfg) - nll) < 1e-12


@pytest.mark.parametrize("encoder", ["ffn", "rnn"])
def test_objective_gradient(ds, encoder):
    m = toy_model(ds, 7, encoder=encoder)
    data = SequenceData(ds, m.featurizer)
    units = np.arange(m.encoder.n_units(data))[:6]
    _, grads = loss_and_grad(m, data, units, m.lambdas, m.d_min)

    def f():
        return loss_and_grad(m, data, units, m.lambdas, m.d_min)[0].total

    for name, p in m.params.items():
        assert rel_error(grads[name], central_diff(f, p)) < 1e-4, name


# -- projection --------------------------------------------------------------------


def test_projection_single_history():
    one = TrajectoryDataset([Trajectory([1], [0], [0.0], "censored_at_horizon")])
    m = toy_model(tabular_dataset(0, n=5), 8)
    m.featurizer = StepFeaturizer("onehot", 5, 3).fit(one)
    m.encoder.in_dim = m.featurizer.dim
    project(m, SequenceData(one, m.featurizer))
    assert np.all(m.refs == [0, 0])
    z = m.encode_history(one[0])
    assert all(np.array_equal(p, z) for p in m.prototypes)


def test_projection_brute_force_and_idempotent(ds):
    m = toy_model(ds, 9)
    data = SequenceData(ds, m.featurizer)
    before = m.prototypes.copy()
    project(m, data)
    for j in range(m.n):
        best, best_d = None, np.inf
        for i, traj in enumerate(ds):
            for t in range(len(traj)):
                d = np.sum((m.encode_history(traj, t) - before[j]) ** 2)
                if d < best_d - 1e-12:
                    best, best_d = (i, t), d
        i, t = m.refs[j]
        d_chosen = np.sum((m.encode_history(ds[i], t) - before[j]) ** 2)
        assert d_chosen <= best_d + 1e-12
    refs, protos = m.refs.copy(), m.prototypes.copy()
    project(m, data)
    assert np.array_equal(m.refs, refs) and np.array_equal(m.prototypes, protos)


# -- training ------------------------------------------------------------------------


def _separable_config(**kw):
    base = dict(n_prototypes=2, q=2, epochs=50, batch_size=32, learning_rate=1e-2, seed=0, hidden=(8, 4))
    base.update(kw)
    return TrainConfig(**base)


def test_separable_toy():
    ds = separable_dataset()
    feat = StepFeaturizer("onehot", 4, 2)
    m = train(ds, _separable_config(), feat, track_nll=True)
    acc = np.mean(np.argmax(m.action_probs(ds), axis=1) == ds.flat_actions())
    assert acc >= 0.95
    clusters = {int(h["contexts"][-1] >= 2) for h in m.histories}
    assert clusters == {0, 1}
    assert m.history[-1] < m.history[0]


def test_zero_epochs_is_projected_init():
    ds = tabular_dataset(1, n=30)
    feat = StepFeaturizer("onehot", 5, 3)
    m = train(ds, TrainConfig(n_prototypes=3, q=2, epochs=0, hidden=(6, 5)), feat)
    before = (m.refs.copy(), m.prototypes.copy())
    project(m, SequenceData(ds, feat))
    assert np.array_equal(before[0], m.refs) and np.array_equal(before[1], m.prototypes)


def test_training_deterministic():
    ds = tabular_dataset(2, n=30)
    cfg = TrainConfig(n_prototypes=3, q=2, epochs=5, hidden=(6, 5), seed=3)
    a = train(ds, cfg, StepFeaturizer("onehot", 5, 3))
    b = train(ds, cfg, StepFeaturizer("onehot", 5, 3))
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


@pytest.mark.parametrize("encoder", ["ffn", "rnn"])
def test_prototype_realness(encoder):
    ds = tabular_dataset(4, n=40)
    m = train(ds, TrainConfig(n_prototypes=4, q=2, epochs=7, hidden=(6, 5), encoder=encoder, projection_period=3),
              StepFeaturizer("onehot", 5, 3))
    for j in range(m.n):
        i, t = m.refs[j]
        assert np.array_equal(m.prototypes[j], m.encode_history(ds[i], t))
        assert m.histories[j]["contexts"] == ds[i].contexts[: t + 1]


def test_json_roundtrip(ds):
    m = train(ds, TrainConfig(n_prototypes=3, q=2, epochs=2, hidden=(6, 5)), StepFeaturizer("onehot", 5, 3))
    back = PrototypeModel.from_json(json.loads(json.dumps(m.to_json())))
    np.testing.assert_array_equal(back.action_probs(ds), m.action_probs(ds))


def test_cross_validation_picks_grid_minimum(ds):
    cfg = TrainConfig(n_prototypes=3, q=2, epochs=2, hidden=(6, 5))
    res = cross_validate(ds, cfg, StepFeaturizer("onehot", 5, 3).fit(ds), (1.0, 3.0), (1e-3, 1e-1), folds=3)
    assert len(res.scores) == 4
    best = min(res.scores, key=lambda s: s[2])
    assert (res.d_min, res.lambda_d) == best[:2]


# -- reporting --------------------------------------------------------------------------


def test_report_rows():
    ds = tabular_dataset(5, n=60)
    m = train(ds, TrainConfig(n_prototypes=10, q=2, epochs=1, hidden=(6, 5)), StepFeaturizer("onehot", 5, 3))
    rows = prototype_report(m)
    assert len(rows) == 10
    for r in rows:
        assert sum(r["probs"]) == pytest.approx(1.0)
    assert report_csv(m).count("\n") == 1 + 10 * 3


def test_report_separated_prototypes(ds):
    m = toy_model(ds, 10, n_prototypes=3, q=3)
    # push the non-referenced prototypes far away from every encoding
    m.prototypes[1:] += 50.0
    traj = Trajectory(ds[0].contexts[:1], ds[0].actions[:1], [0.0])
    m.histories[0] = {"contexts": traj.contexts, "actions": traj.actions}
    m.prototypes[0] = m.encode_history(traj)
    row = prototype_report(m)[0]
    np.testing.assert_allclose(row["probs"], softmax(m.B[:, 0] + m.c), atol=1e-9)


def test_sq_dists_exact_zero():
    Z = np.random.default_rng(0).normal(size=(7, 5))
    D = sq_dists(Z, Z[2:4])
    assert D[2, 0] == 0.0 and D[3, 1] == 0.0
