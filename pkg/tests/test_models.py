import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from riskforge.evaluation import auc
from riskforge.features import FeatureMatrix
from riskforge.models import (
    EPS,
    InjectionWeights,
    LogisticConfig,
    MlpConfig,
    SchemaMismatchError,
    auc_weights,
    cross_entropy,
    fuse_weighted_average,
    init_network,
    layer_sizes,
    load_model,
    logistic_loss_and_grad,
    model_from_dict,
    model_to_dict,
    network_logits,
    network_loss_and_grad,
    predict,
    save_model,
    sigmoid,
    train_df_wa,
    train_logistic,
    train_meta_fusion,
    train_mlp,
    train_tsnn,
)

FAST = MlpConfig(epochs=5, seed=3)


def fm(X, names=None):
    X = np.asarray(X, dtype=float)
    names = names or [f"f{j}" for j in range(X.shape[1])]
    return FeatureMatrix(X, names, [str(i) for i in range(X.shape[0])])


def planted(n=400, d=5, seed=0, strength=2.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    logit = strength * X[:, 0] - strength * X[:, 1]
    y = (rng.random(n) < sigmoid(logit)).astype(float)
    return fm(X), y, logit


def generic_point(sizes, rng):
    # zero biases can put pre-activations exactly on the ReLU kink
    theta = init_network(sizes, rng)
    return theta + rng.normal(scale=0.1, size=theta.size)


def fd_check(f, theta, h=1e-6):
    _, g = f(theta)
    num = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        num[i] = (f(theta + e)[0] - f(theta - e)[0]) / (2 * h)
    return np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)


# --- loss ---------------------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert cross_entropy(1, 1 - EPS) == pytest.approx(1e-7, rel=1e-6)
    assert cross_entropy(0.5, 0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(1, EPS) == pytest.approx(-math.log(1e-7), rel=1e-12)
    assert cross_entropy(1, 0.0) == cross_entropy(1, EPS)


@given(st.floats(0, 1), st.floats(0, 1))
def test_cross_entropy_non_negative(t, p):
    assert cross_entropy(t, p) >= -1e-12


def test_config_invariants():
    for bad in (dict(dropout_rate=1.0), dict(epochs=0), dict(batch_size=0), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            MlpConfig(**bad)
    with pytest.raises(ValueError):
        InjectionWeights(pi=1.5)
    with pytest.raises(ValueError):
        InjectionWeights(pi_teacher=-1)


# --- logistic -----------------------------------------------------------------------------------


def test_intercept_only_predicts_base_rate():
    y = np.array([1] * 4 + [0] * 6, dtype=float)
    model = train_logistic(fm(np.zeros((10, 2))), y, LogisticConfig(tol=1e-10, max_iter=20000))
    assert np.allclose(predict(model, fm(np.zeros((10, 2)))), 0.4, atol=1e-6)


def test_separable_training_auc_one():
    X = np.array([[0, 0], [1, 0], [0, 1], [3, 3], [4, 3], [3, 4]], dtype=float)
    y = np.array([0, 0, 0, 1, 1, 1])
    model = train_logistic(fm(X), y)
    assert auc(predict(model, fm(X)), y) == 1.0


def test_logistic_gradient(rng):
    X = rng.normal(size=(30, 4))
    y = (rng.random(30) < 0.5).astype(float)
    for _ in range(5):
        theta = rng.normal(scale=0.5, size=5)
        assert fd_check(lambda t: logistic_loss_and_grad(t, X, [(1.0, y)]), theta) < 1e-6


def test_logistic_requires_binary_labels():
    with pytest.raises(ValueError):
        train_logistic(fm(np.zeros((3, 1))), [0, 0.5, 1])


def test_lr_k_with_zero_knowledge_matches_lr():
    X, y, _ = planted(n=120)
    lr = train_logistic(X, y, LogisticConfig(max_iter=300))
    lrk = train_logistic(X, y, LogisticConfig(max_iter=300), knowledge=np.zeros(X.n), kind="lr_k")
    assert lrk.input_schema == X.feature_names + ["pce_score"]
    assert np.allclose(lr.loss_trace, lrk.loss_trace, rtol=1e-12, atol=0)


def test_known_theta_hand_row():
    model = train_logistic(fm(np.zeros((4, 2))), [0, 1, 0, 1], LogisticConfig(max_iter=1))
    model.parameters.theta = np.array([0.25, -1.5, 2.0])
    row = np.array([[0.3, -0.7]])
    expected = 1.0 / (1.0 + math.exp(-(0.25 - 1.5 * 0.3 + 2.0 * -0.7)))
    assert predict(model, fm(row))[0] == pytest.approx(expected, abs=1e-12)


# --- multilayer perceptron ----------------------------------------------------------------------


def test_architecture():
    assert layer_sizes(7, MlpConfig()) == [7, 8, 8, 8, 1]


def test_network_gradient_plain_and_composite(rng):
    sizes = [4, 8, 8, 8, 1]
    X = rng.normal(size=(16, 4))
    y = (rng.random(16) < 0.5).astype(float)
    s = rng.random(16)
    for targets in ([(1.0, y)], [(1 - 0.653, y), (0.653, s)], [(1.0, rng.random(16)), (0.653, s)], [(1.0, rng.random(16)), (1.0, y)]):
        for _ in range(5):
            theta = generic_point(sizes, rng)
            assert fd_check(lambda t: network_loss_and_grad(t, sizes, X, targets), theta) < 1e-4


def test_network_gradient_with_dropout_masks(rng):
    sizes = [3, 8, 8, 8, 1]
    X = rng.normal(size=(10, 3))
    y = (rng.random(10) < 0.5).astype(float)
    masks = [(rng.random((10, 8)) < 0.5) / 0.5 for _ in range(3)]
    theta = generic_point(sizes, rng)
    assert fd_check(lambda t: network_loss_and_grad(t, sizes, X, [(1.0, y)], masks), theta) < 1e-4


def test_kenn_pi_zero_is_nn_bitwise():
    X, y, _ = planted(n=80)
    nn = train_mlp(X, y, FAST)
    kenn = train_mlp(X, y, FAST, knowledge=np.full(X.n, 0.3), injection=InjectionWeights(pi=0.0), kind="kenn")
    assert nn.loss_trace == kenn.loss_trace
    assert np.array_equal(nn.parameters.theta, kenn.parameters.theta)


def test_kenn_pi_one_fits_knowledge():
    X, y, logit = planted(n=200)
    s = sigmoid(0.8 * X.values[:, 2])
    model = train_mlp(X, y, MlpConfig(epochs=10, dropout_rate=0.0, seed=1), knowledge=s, injection=InjectionWeights(pi=1.0), kind="kenn")
    trace = model.loss_trace
    assert all(b < a for a, b in zip(trace, trace[1:]))
    assert model.config["pi"] == 1.0


def test_nn_k_with_label_logit_ranks_perfectly():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(1000, 4))
    y = (rng.random(1000) < 0.5).astype(float)
    k = np.where(y == 1, 3.0, -3.0) + 0.0
    train, test = np.arange(800), np.arange(800, 1000)
    model = train_mlp(fm(X[train]), y[train], MlpConfig(seed=0, epochs=20), knowledge=k[train], kind="nn_k")
    assert auc(predict(model, fm(X[test]), k[test]), y[test]) >= 0.99


def test_injected_kind_needs_knowledge():
    X, y, _ = planted(n=20)
    for kind in ("nn_k", "kenn"):
        with pytest.raises(ValueError):
            train_mlp(X, y, FAST, kind=kind)
    with pytest.raises(ValueError):
        train_logistic(X, y, kind="lr_k")


def test_training_is_seed_deterministic():
    X, y, _ = planted(n=60)
    a = train_mlp(X, y, FAST)
    b = train_mlp(X, y, FAST)
    c = train_mlp(X, y, MlpConfig(epochs=5, seed=4))
    assert np.array_equal(a.parameters.theta, b.parameters.theta)
    assert not np.array_equal(a.parameters.theta, c.parameters.theta)


# --- teacher-student ----------------------------------------------------------------------------


def test_tsnn_zero_rounds_student_is_nn():
    X, y, _ = planted(n=80)
    nn = train_mlp(X, y, FAST)
    _, student = train_tsnn(X, y, np.full(X.n, 0.4), FAST, InjectionWeights(pi_teacher=0.0, tsnn_outer_iterations=0))
    assert student.loss_trace == nn.loss_trace


def test_tsnn_teacher_mimics_student_when_pi_t_zero():
    X, y, _ = planted(n=200)
    s = np.full(X.n, 0.9)
    cfg = MlpConfig(epochs=10, dropout_rate=0.0, seed=2)
    teacher, student = train_tsnn(X, y, s, cfg, InjectionWeights(pi_teacher=0.0, pi_student=0.0, tsnn_outer_iterations=1, tsnn_inner_epochs=30))
    gap = np.abs(predict(teacher, X) - predict(student, X)).mean()
    assert gap < 0.05


def test_tsnn_pi_t_sweep_pulls_teacher_to_knowledge():
    X, y, _ = planted(n=200, seed=5)
    s = sigmoid(X.values[:, 3])
    cfg = MlpConfig(epochs=5, dropout_rate=0.0, seed=7)
    losses = []
    for pi_t in (0.1, 1.0, 10.0):
        teacher, _ = train_tsnn(X, y, s, cfg, InjectionWeights(pi_teacher=pi_t, tsnn_outer_iterations=2, tsnn_inner_epochs=10))
        losses.append(float(np.mean(cross_entropy(s, predict(teacher, X)))))
    assert losses[0] >= losses[1] >= losses[2]


def test_tsnn_student_near_teacher_on_planted_data():
    X, y, logit = planted(n=600, seed=9)
    s = sigmoid(logit + np.random.default_rng(1).normal(size=X.n))
    tr, te = np.arange(450), np.arange(450, 600)
    Xtr = FeatureMatrix(X.values[tr], X.feature_names, [str(i) for i in tr])
    Xte = FeatureMatrix(X.values[te], X.feature_names, [str(i) for i in te])
    teacher, student = train_tsnn(Xtr, y[tr], s[tr], MlpConfig(seed=0, epochs=10))
    assert teacher.kind == "tsnn_teacher" and student.kind == "tsnn_student"
    a_t = auc(predict(teacher, Xte), y[te])
    a_s = auc(predict(student, Xte), y[te])
    assert a_s >= a_t - 0.02


def test_tsnn_phase_gradients(rng):
    # both phases share the composite objective, with the frozen partner as soft target
    sizes = [3, 8, 8, 8, 1]
    X = rng.normal(size=(12, 3))
    frozen = sigmoid(network_logits(init_network(sizes, rng), sizes, X))
    s = rng.random(12)
    y = (rng.random(12) < 0.5).astype(float)
    theta = generic_point(sizes, rng)
    assert fd_check(lambda t: network_loss_and_grad(t, sizes, X, [(1.0, frozen), (0.653, s)]), theta) < 1e-4
    assert fd_check(lambda t: network_loss_and_grad(t, sizes, X, [(1.0, frozen), (1.0, y)]), theta) < 1e-4


# --- fusion -------------------------------------------------------------------------------------


def test_fusion_examples(rng):
    s0 = np.array([0.2, 0.8])
    s1 = np.array([0.6, 0.4])
    assert np.array_equal(fuse_weighted_average([s0, s1], [1, 0]), s0)
    assert np.allclose(fuse_weighted_average([s0, s1], [0.5, 0.5]), [0.4, 0.6], atol=1e-15)
    a, b = rng.random(50), rng.random(50)
    y = (rng.random(50) < 0.5).astype(int)
    w = auc_weights([a, b], y)
    ua, ub = auc(a, y), auc(b, y)
    assert np.allclose(fuse_weighted_average([a, b], w), (ua * a + ub * b) / (ua + ub), atol=1e-14)


def test_fusion_errors():
    with pytest.raises(ValueError):
        fuse_weighted_average([np.zeros(2), np.zeros(3)], [0.5, 0.5])
    with pytest.raises(ValueError):
        fuse_weighted_average([np.zeros(2)], [0.5, 0.5])
    with pytest.raises(ValueError):
        fuse_weighted_average([np.zeros(2), np.zeros(2)], [0.7, 0.7])


def test_df_wa_predicts_weighted_average():
    X, y, logit = planted(n=100)
    s = sigmoid(logit)
    lr = train_logistic(X, y)
    model = train_df_wa(lr, X, y, s)
    w = model.parameters.theta
    assert w.sum() == pytest.approx(1.0)
    assert np.allclose(predict(model, X, s), w[0] * predict(lr, X) + w[1] * s, atol=1e-14)


def test_meta_single_score_preserves_auc():
    X, y, logit = planted(n=300)
    s = sigmoid(logit)
    base = train_logistic(fm(np.zeros((X.n, 1))), y)
    meta = train_meta_fusion(base, fm(np.zeros((X.n, 1))), y, s)
    assert auc(predict(meta, fm(np.zeros((X.n, 1))), s), y) == pytest.approx(auc(s, y), abs=1e-12)


def test_meta_combines_complementary_scores():
    rng = np.random.default_rng(4)
    n = 600
    a, b = rng.normal(size=n), rng.normal(size=n)
    y = (rng.random(n) < sigmoid(2 * a - 2 * b)).astype(float)
    X = fm(a[:, None])
    s0_model = train_logistic(X, y)
    s1 = sigmoid(-b)
    meta = train_meta_fusion(s0_model, X, y, s1)
    best = max(auc(predict(s0_model, X), y), auc(s1, y))
    assert auc(predict(meta, X, s1), y) >= best - 0.01


def test_meta_constant_column_is_inert():
    X, y, logit = planted(n=200)
    s = sigmoid(logit)
    base = train_logistic(X, y)
    with_const = train_meta_fusion(base, X, y, np.column_stack([s, np.full(X.n, 0.5)]))
    without = train_meta_fusion(base, X, y, s)
    a1 = auc(predict(with_const, X, np.column_stack([s, np.full(X.n, 0.5)])), y)
    a2 = auc(predict(without, X, s), y)
    assert a1 == pytest.approx(a2, abs=1e-3)


# --- inference and serialization ----------------------------------------------------------------


def test_predict_is_deterministic_and_rowwise():
    X, y, _ = planted(n=50)
    model = train_mlp(X, y, FAST)
    assert np.array_equal(predict(model, X), predict(model, X))
    dup = FeatureMatrix(np.vstack([X.values[:1], X.values[:1]]), X.feature_names, ["a", "b"])
    p = predict(model, dup)
    assert p[0] == p[1]
    assert ((p >= 0) & (p <= 1)).all()


def test_schema_mismatch_names_columns():
    X, y, _ = planted(n=30, d=3)
    model = train_logistic(X, y)
    with pytest.raises(SchemaMismatchError) as info:
        predict(model, fm(X.values, ["f0", "f1", "zz"]))
    assert info.value.missing == ["f2"] and info.value.extra == ["zz"]
    with pytest.raises(SchemaMismatchError):
        predict(model, fm(X.values[:, ::-1], ["f2", "f1", "f0"]))


@pytest.mark.parametrize("kind", ["lr", "lr_k", "nn", "nn_k", "kenn", "df_wa", "meta_fusion", "tsnn"])
def test_serialization_round_trip(kind, tmp_path):
    X, y, logit = planted(n=60)
    s = sigmoid(logit)
    if kind in ("lr", "lr_k"):
        model = train_logistic(X, y, knowledge=s, kind=kind)
    elif kind in ("nn", "nn_k", "kenn"):
        model = train_mlp(X, y, FAST, knowledge=s, kind=kind)
    elif kind == "df_wa":
        model = train_df_wa(train_logistic(X, y), X, y, s)
    elif kind == "meta_fusion":
        model = train_meta_fusion(train_logistic(X, y), X, y, s)
    else:
        model = train_tsnn(X, y, s, FAST, InjectionWeights(tsnn_outer_iterations=1, tsnn_inner_epochs=2))[1]
    save_model(model, tmp_path / "m.json")
    again = load_model(tmp_path / "m.json")
    assert np.allclose(predict(again, X, s), predict(model, X, s), rtol=0, atol=1e-12)
    assert model_to_dict(model_from_dict(model_to_dict(model))) == model_to_dict(model)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_network_outputs_are_probabilities(seed):
    rng = np.random.default_rng(seed)
    sizes = [3, 8, 8, 8, 1]
    p = sigmoid(network_logits(init_network(sizes, rng) * 10, sizes, rng.normal(size=(20, 3)) * 10))
    assert ((p >= 0) & (p <= 1)).all()
