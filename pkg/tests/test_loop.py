"""Alternating-trainer machinery: query selection, proxy fitting, embedding
retraining, early stopping, and the round driver."""

import numpy as np
import pytest

from repadvise.loop import (
    EmbedResult,
    Experiment,
    LoopConfig,
    LoopError,
    ProxyFit,
    Query,
    ResponseBuffer,
    ResponseRecord,
    SessionState,
    blr_early_stop,
    blr_mean_variance,
    fit_proxy,
    init_computer_only,
    issue_queries,
    optimize_embedding,
    run_round,
    scheduled_lr,
    select_queries,
    session_from_doc,
    session_to_doc,
)
from repadvise.nn import Dense, Activation, Network, Tensor, bce_loss


def _buffer(zs, responses, round_index=0):
    buf = ResponseBuffer()
    buf.add_round(
        [
            ResponseRecord(f"r{round_index}-q{i}", np.zeros(1), np.asarray(z, float), a, round_index)
            for i, (z, a) in enumerate(zip(zs, responses))
        ]
    )
    return buf


# ----------------------------------------------------------------------
# config defaults and schedule
# ----------------------------------------------------------------------
def test_config_defaults_match_training_recipe():
    cfg = LoopConfig()
    assert cfg.epochs_proxy == 500
    assert cfg.epochs_embed == 300
    assert cfg.lr_proxy == pytest.approx(0.07)
    assert cfg.lr_embed == pytest.approx(0.03)
    assert cfg.proxy_splits == 15
    assert cfg.blr_cadence == 50


def test_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(lr_proxy=-1.0)
    with pytest.raises(ValueError):
        LoopConfig(restarts_proxy=0)


def test_lr_schedule_raises_with_error_and_decays_with_rounds():
    cfg = LoopConfig()
    base = cfg.lr_embed
    assert scheduled_lr(base, 0, 1.0, cfg) == pytest.approx(base)
    assert scheduled_lr(base, 0, 0.5, cfg) == pytest.approx(base * 1.5)
    assert scheduled_lr(base, 2, 1.0, cfg) == pytest.approx(base * 0.81)


# ----------------------------------------------------------------------
# select_queries
# ----------------------------------------------------------------------
def test_select_all_is_a_permutation():
    idx = select_queries(10, 10, np.random.default_rng(0))
    assert sorted(idx) == list(range(10))


def test_select_200_of_75933_distinct():
    idx = select_queries(75_933, 200, np.random.default_rng(1))
    assert len(idx) == 200
    assert len(set(idx.tolist())) == 200


def test_select_deterministic_under_seed():
    a = select_queries(1000, 50, np.random.default_rng(42))
    b = select_queries(1000, 50, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_select_too_many_raises():
    with pytest.raises(LoopError):
        select_queries(5, 6, np.random.default_rng(0))


# ----------------------------------------------------------------------
# fit_proxy
# ----------------------------------------------------------------------
ARCH_2D = [
    {"kind": "dense", "in": 2, "out": 8, "bias": True},
    {"kind": "relu"},
    {"kind": "dense", "in": 8, "out": 1, "bias": True},
    {"kind": "sigmoid"},
]

FAST = dict(epochs_proxy=200, restarts_proxy=2, proxy_splits=3)


def test_constant_responses_saturate_proxy():
    rng = np.random.default_rng(0)
    zs = rng.normal(size=(24, 2))
    buf = _buffer(zs, np.ones(24))
    fit = fit_proxy(buf, LoopConfig(**FAST), np.random.default_rng(1), ARCH_2D)
    out = fit.network.forward(zs).data.reshape(-1)
    assert np.all(out > 0.99)


def test_restart_selection_takes_min_mean_split_error():
    rng = np.random.default_rng(2)
    zs = rng.normal(size=(30, 2))
    a = (zs[:, 0] > 0).astype(float)
    buf = _buffer(zs, a)
    fit = fit_proxy(buf, LoopConfig(restarts_proxy=4, proxy_splits=3, epochs_proxy=120), np.random.default_rng(3), ARCH_2D)
    assert fit.validation_error == pytest.approx(min(fit.restart_errors))
    assert len(fit.restart_errors) == 4


def test_linearly_separable_beats_logistic_oracle_threshold():
    # oracle: scikit-learn logistic regression separates this data essentially
    # perfectly, so a competent proxy must reach held-out error < 0.05 too
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(4)
    zs = np.vstack([rng.normal(-2.0, 0.4, size=(40, 2)), rng.normal(2.0, 0.4, size=(40, 2))])
    a = np.array([0.0] * 40 + [1.0] * 40)
    oracle = LogisticRegression().fit(zs, a)
    assert oracle.score(zs, a) == 1.0

    buf = _buffer(zs, a)
    fit = fit_proxy(buf, LoopConfig(epochs_proxy=300, restarts_proxy=2, proxy_splits=5), np.random.default_rng(5), ARCH_2D)
    assert fit.validation_error < 0.05


def test_empty_buffer_raises():
    with pytest.raises(LoopError):
        fit_proxy(ResponseBuffer(), LoopConfig(), np.random.default_rng(0), ARCH_2D)


def test_reuse_flag_controls_rounds_used():
    rng = np.random.default_rng(6)
    buf = ResponseBuffer()
    for rnd in range(3):
        buf.add_round(
            [
                ResponseRecord(f"r{rnd}-q{i}", np.zeros(1), rng.normal(size=2), float(i % 2), rnd)
                for i in range(12)
            ]
        )
    cfg_reuse = LoopConfig(reuse_previous_round=True, **FAST)
    cfg_only = LoopConfig(reuse_previous_round=False, **FAST)
    assert fit_proxy(buf, cfg_reuse, np.random.default_rng(0), ARCH_2D).rounds_used == [1, 2]
    assert fit_proxy(buf, cfg_only, np.random.default_rng(0), ARCH_2D).rounds_used == [2]


# ----------------------------------------------------------------------
# optimize_embedding
# ----------------------------------------------------------------------
def _direct_predict(phi, hhat, batch):
    return hhat.forward(phi.forward(batch))


def _frozen_hhat_passthrough():
    # stand-in that reads coordinate 0 of z through a steep sigmoid
    lin = Dense(2, 1, bias=False, rng=np.random.default_rng(0))
    lin.weight.data[:] = np.array([[8.0], [0.0]])
    return Network([lin, Activation("sigmoid")])


def test_regularizer_only_objective_tracks_regularizer():
    rng = np.random.default_rng(7)
    phi = Network([Dense(2, 2, bias=False, rng=rng)])
    hhat = _frozen_hhat_passthrough()
    x = rng.normal(size=(16, 2))
    y = (x[:, 0] > 0).astype(float)

    seen = []

    def reg(net):
        value = (net.layers[0].weight ** 2).sum()
        seen.append(value.item())
        return value

    cfg = LoopConfig(epochs_embed=20, loss_weight=0.0)
    result = optimize_embedding(phi, hhat, x, y, cfg, predict=_direct_predict, regularizers=[reg])
    assert result.losses == pytest.approx(seen)


def test_embedding_matches_direct_supervision_oracle():
    # oracle: train phi directly against labels with the same architecture;
    # training through the frozen pass-through stand-in must do as well
    rng = np.random.default_rng(8)
    x = rng.normal(size=(64, 3))
    y = (x @ np.array([1.0, -1.0, 0.5]) > 0).astype(float)
    cfg = LoopConfig(epochs_embed=300, lr_embed=0.03)

    direct = Network([Dense(3, 2, rng=np.random.default_rng(9)), Activation("tanh")])
    head = _frozen_hhat_passthrough()
    res = optimize_embedding(direct, head, x, y, cfg, predict=_direct_predict)
    assert res.losses[-1] < 0.1

    phi = Network([Dense(3, 2, rng=np.random.default_rng(9)), Activation("tanh")])
    res2 = optimize_embedding(phi, head, x, y, cfg, predict=_direct_predict)
    assert res2.losses[-1] < 0.1


def test_hhat_parameters_bit_identical_after_embedding_training():
    rng = np.random.default_rng(10)
    phi = Network([Dense(2, 2, rng=rng)])
    hhat = Network([Dense(2, 4, rng=rng), Activation("relu"), Dense(4, 1, rng=rng), Activation("sigmoid")])
    before = hhat.state_vector().copy()
    x = rng.normal(size=(32, 2))
    y = (x[:, 0] > 0).astype(float)
    optimize_embedding(phi, hhat, x, y, LoopConfig(epochs_embed=50), predict=_direct_predict)
    np.testing.assert_array_equal(before, hhat.state_vector())


def test_embedding_checkpoints_every_cadence():
    rng = np.random.default_rng(11)
    phi = Network([Dense(2, 2, rng=rng)])
    hhat = _frozen_hhat_passthrough()
    x = rng.normal(size=(16, 2))
    y = (x[:, 0] > 0).astype(float)
    cfg = LoopConfig(epochs_embed=100, blr_cadence=25)
    res = optimize_embedding(
        phi, hhat, x, y, cfg, predict=_direct_predict, feature_fn=lambda p: p.forward(x).data
    )
    assert [c[0] for c in res.checkpoints] == [0, 25, 50, 75, 100]


# ----------------------------------------------------------------------
# blr_early_stop
# ----------------------------------------------------------------------
def test_constant_features_never_stop_early():
    f = np.random.default_rng(12).normal(size=(10, 3))
    cfg = LoopConfig(blr_cadence=50)
    trajectory = [f.copy() for _ in range(5)]
    stop = blr_early_stop(trajectory, np.zeros(10), cfg)
    assert stop == 4 * 50


def test_norm_doubling_trips_the_rule_at_checkpoint_three():
    # closed-form oracle: with noise precision ~0 and prior precision 1,
    # mean variance is mean_i f_i' (I + b F'F)^-1 f_i ~= mean ||f_i||^2,
    # so doubling feature norms quadruples the variance
    rng = np.random.default_rng(13)
    base = rng.normal(size=(12, 4))
    cfg = LoopConfig(blr_cadence=50, blr_prior_precision=1.0, blr_noise_precision=1e-12)
    scales = [1.0, 1.0, 1.0, 2.0, 2.0]
    trajectory = [s * base for s in scales]

    def oracle_variance(f):
        cov = np.linalg.inv(np.eye(4) + 1e-12 * f.T @ f)
        return np.mean([row @ np.linalg.solve(np.linalg.inv(cov), row) for row in f])

    v = [oracle_variance(f) for f in trajectory]
    assert v[3] / v[0] == pytest.approx(4.0, rel=1e-6)
    for f, expected in zip(trajectory, v):
        got = blr_mean_variance(f, 1.0, 1e-12)
        assert got == pytest.approx(expected, rel=1e-9)

    stop = blr_early_stop(trajectory, np.zeros(12), cfg)
    assert stop <= 3 * 50


def test_blr_needs_two_checkpoints():
    with pytest.raises(LoopError):
        blr_early_stop([np.ones((3, 2))], np.zeros(3), LoopConfig())


def test_blr_row_count_must_match_targets():
    with pytest.raises(LoopError):
        blr_early_stop([np.ones((3, 2)), np.ones((3, 2))], np.zeros(4), LoopConfig())


# ----------------------------------------------------------------------
# run_round with a toy experiment
# ----------------------------------------------------------------------
class ToyExperiment(Experiment):
    """Inputs in R^2, label = sign of first coordinate, identity featurize."""

    hhat_architecture = ARCH_2D

    def __init__(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        self.x = rng.normal(size=(n, 2))
        self.y = (self.x[:, 0] > 0).astype(float)

    def dataset_size(self):
        return len(self.x)

    def input_at(self, index):
        return self.x[index]

    def label_at(self, index):
        return self.y[index]

    def represent(self, phi, index):
        return phi.forward(self.x[index : index + 1]).data[0]

    def featurize(self, z):
        return np.asarray(z, dtype=np.float64)

    def predict(self, phi, hhat, batch):
        return hhat.forward(phi.forward(batch))

    def training_arrays(self):
        return self.x, self.y


def _toy_session(seed):
    phi = Network([Dense(2, 2, rng=np.random.default_rng(seed + 100))])
    return SessionState(0, phi, None, ResponseBuffer(), rng=np.random.default_rng(seed))


def _oracle_respond(queries):
    return {q.query_id: float(q.z[0] > 0) for q in queries}


TOY_CFG = LoopConfig(epochs_proxy=80, epochs_embed=40, restarts_proxy=1, proxy_splits=2)


def test_run_round_appends_metrics_and_advances():
    exp = ToyExperiment()
    state = _toy_session(1)
    queries = issue_queries(state, exp, 10)
    assert len(queries) == 10
    run_round(state, _oracle_respond(queries), TOY_CFG, exp)
    assert state.round_index == 1
    assert len(state.metrics) == 1
    assert "proxy_validation_error" in state.metrics[0]


def test_run_round_rejects_unknown_id():
    exp = ToyExperiment()
    state = _toy_session(2)
    queries = issue_queries(state, exp, 5)
    responses = _oracle_respond(queries)
    responses["r0-q99"] = 1.0
    with pytest.raises(LoopError, match="r0-q99"):
        run_round(state, responses, TOY_CFG, exp)
    assert state.round_index == 0
    assert len(state.buffer) == 0


def test_run_round_rejects_partial_submission():
    exp = ToyExperiment()
    state = _toy_session(3)
    queries = issue_queries(state, exp, 5)
    responses = _oracle_respond(queries)
    responses.pop(queries[0].query_id)
    with pytest.raises(LoopError, match="missing"):
        run_round(state, responses, TOY_CFG, exp)


def test_two_runs_same_seed_identical_metrics():
    def run(seed):
        exp = ToyExperiment(seed=7)
        state = _toy_session(seed)
        for _ in range(3):
            queries = issue_queries(state, exp, 8)
            run_round(state, _oracle_respond(queries), TOY_CFG, exp)
        return state

    s1, s2 = run(5), run(5)
    assert s1.metrics == s2.metrics
    np.testing.assert_array_equal(s1.phi.state_vector(), s2.phi.state_vector())


def test_contradictory_labels_leave_proxy_at_chance():
    # same z submitted with both labels equally often: validation error ~ ln 2
    exp = ToyExperiment()
    state = _toy_session(6)
    queries = issue_queries(state, exp, 10)
    z_shared = np.array([0.3, -0.2])
    for q in queries:
        q.z = z_shared
    responses = {q.query_id: float(i % 2) for i, q in enumerate(queries)}
    run_round(state, responses, TOY_CFG, exp)
    assert state.metrics[0]["proxy_validation_error"] == pytest.approx(np.log(2), abs=0.25)
    assert state.round_index == 1  # embedding step still executed


# ----------------------------------------------------------------------
# init_computer_only
# ----------------------------------------------------------------------
def test_computer_only_head_separates_toy_data():
    rng = np.random.default_rng(20)
    x = np.vstack([rng.normal(-2, 0.3, size=(40, 2)), rng.normal(2, 0.3, size=(40, 2))])
    y = np.array([0.0] * 40 + [1.0] * 40)
    phi = Network([Dense(2, 2, rng=rng), Activation("tanh")])
    head = Network([Dense(2, 1, rng=rng), Activation("sigmoid")])
    acc = init_computer_only(phi, head, x, y, _direct_predict, epochs=200, lr=0.05, rng=rng)
    assert acc == 1.0


def test_computer_only_shuffled_labels_near_chance():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(200, 2))
    y = rng.integers(0, 2, size=200).astype(float)
    phi = Network([Dense(2, 2, rng=rng), Activation("tanh")])
    head = Network([Dense(2, 1, rng=rng), Activation("sigmoid")])
    acc = init_computer_only(phi, head, x, y, _direct_predict, epochs=150, lr=0.05, rng=rng)
    assert 0.25 <= acc <= 0.75


# ----------------------------------------------------------------------
# session persistence
# ----------------------------------------------------------------------
def test_session_round_trips_and_replays_identically():
    exp = ToyExperiment(seed=7)
    state = _toy_session(9)
    queries = issue_queries(state, exp, 8)
    run_round(state, _oracle_respond(queries), TOY_CFG, exp)

    doc = session_to_doc(state, TOY_CFG)
    restored, cfg = session_from_doc(doc)
    np.testing.assert_array_equal(state.phi.state_vector(), restored.phi.state_vector())
    assert restored.metrics == state.metrics

    # replay one more round on both; identical label sequences -> identical phi
    q1 = issue_queries(state, exp, 8)
    q2 = issue_queries(restored, exp, 8)
    assert [q.query_id for q in q1] == [q.query_id for q in q2]
    labels = _oracle_respond(q1)
    run_round(state, labels, TOY_CFG, exp)
    run_round(restored, labels, cfg, exp)
    np.testing.assert_array_equal(state.phi.state_vector(), restored.phi.state_vector())
    assert state.metrics == restored.metrics
