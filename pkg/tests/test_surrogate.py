import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvqkd_automl.surrogate import (
    LossHyper,
    MLPArchitecture,
    Network,
    Preprocessor,
    TrainConfig,
    TrainedModel,
    backprop,
    deviation_histogram,
    dumps_model,
    evaluate_model,
    forward,
    init_network,
    load_model,
    model_from_dict,
    model_to_dict,
    predict_key_rate,
    report_from_predictions,
    save_model,
    secure_loss,
    train,
)

REF_HYPER = LossHyper(0.0539, 0.8727)


def _arch(hidden=(16, 8), acts=None, drops=None):
    acts = acts or ("tanh",) * len(hidden)
    drops = drops or (0.0,) * len(hidden)
    return MLPArchitecture((29, *hidden, 1), acts, drops)


def _toy_model(arch=None, seed=0, n=200):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 29))
    return TrainedModel(
        net=init_network(arch or _arch(), seed),
        preproc=Preprocessor.fit(X),
        hyper=REF_HYPER,
        train_config=TrainConfig(seed=seed),
    ), X


# architecture


def test_architecture_validation():
    with pytest.raises(ValueError):
        MLPArchitecture((28, 8, 1), ("tanh",), (0.0,))
    with pytest.raises(ValueError):
        MLPArchitecture((29, 1), (), ())
    with pytest.raises(ValueError):
        MLPArchitecture((29, 8, 1), ("gelu",), (0.0,))
    with pytest.raises(ValueError):
        MLPArchitecture((29, 8, 1), ("tanh",), (0.5,))
    with pytest.raises(ValueError):
        _arch((8, 8)).check_searchable()
    _arch((8, 8, 8)).check_searchable()
    _arch((8, 8, 8, 8)).check_searchable()


def test_hyper_and_config_validation():
    for g, e in [(0, 0.9), (1, 0.9), (0.1, 0), (0.1, 1)]:
        with pytest.raises(ValueError):
            LossHyper(g, e)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=48)
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.validation_fraction) == (64, 200, 1e-3, 0.1)


# initialization and forward pass


def test_init_deterministic_and_shapes():
    arch = _arch((16, 8, 4))
    a, b = init_network(arch, 3), init_network(arch, 3)
    for Wa, Wb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(Wa, Wb)
    for W, (i, o) in zip(a.weights, zip(arch.layer_sizes[:-1], arch.layer_sizes[1:])):
        assert W.shape == (i, o)
        assert np.max(np.abs(W)) <= math.sqrt(6 / (i + o))
    assert all(np.all(bias == 0) for bias in a.biases)
    assert not np.array_equal(init_network(arch, 4).weights[0], a.weights[0])


@pytest.mark.parametrize("acts", [("tanh", "tanh"), ("relu", "relu"), ("tanh", "relu")])
def test_zero_input_gives_zero_output(acts):
    net = init_network(_arch((16, 8), acts), 0)
    assert forward(net, np.zeros(29)) == 0.0


def test_inference_deterministic_and_dropout_free():
    net = init_network(_arch((16, 8), drops=(0.2, 0.1)), 0)
    x = np.random.default_rng(0).normal(size=(5, 29))
    np.testing.assert_array_equal(forward(net, x), forward(net, x))
    # training with dropout differs from inference, with rate 0 it agrees
    assert not np.array_equal(forward(net, x, training=True, rng=np.random.default_rng(1)), forward(net, x))
    net0 = init_network(_arch((16, 8)), 0)
    np.testing.assert_array_equal(forward(net0, x, training=True, rng=np.random.default_rng(1)), forward(net0, x))


def test_inverted_dropout_preserves_mean():
    # one hidden layer feeding a linear head: the output is linear in the mask, so its
    # training-mode mean equals the inference output
    net = init_network(_arch((64,), ("relu",), (0.3,)), 2)
    x = np.random.default_rng(0).normal(size=29)
    rng = np.random.default_rng(5)
    samples = forward(net, np.repeat(x[None], 20000, axis=0), training=True, rng=rng)
    se = samples.std() / math.sqrt(len(samples))
    assert abs(samples.mean() - forward(net, x)) <= 4 * se


def test_relu_inactive_region_is_affine():
    W1 = np.zeros((29, 3))
    W1[:3, :3] = np.eye(3)
    W2 = np.array([[1.0], [2.0], [-1.0]])
    net = Network(_arch((3,), ("relu",)), [W1, W2], [np.zeros(3), np.array([0.5])])
    x = np.abs(np.random.default_rng(0).normal(size=29)) + 0.1
    assert forward(net, x) == pytest.approx(x[0] + 2 * x[1] - x[2] + 0.5, abs=1e-14)


# loss


def test_loss_examples():
    val, _ = secure_loss([0.0], [0.0], LossHyper(0.1, 0.9))
    assert val == pytest.approx(0.1 * -math.log10(0.9), abs=1e-15)
    assert val == pytest.approx(0.0045757, abs=1e-7)
    val, _ = secure_loss([-0.1], [0.0], REF_HYPER)
    assert val == pytest.approx(0.098337, abs=1e-6)
    c = -math.log10(0.8727)
    assert val == pytest.approx(0.0539 * (0.01 + c) + 0.9461 * 0.1, abs=1e-15)


def test_loss_is_mean_over_batch():
    e = np.array([-0.3, 0.01, 0.2, 0.5])
    val, grad = secure_loss(e, np.zeros(4), REF_HYPER)
    singles = [secure_loss([v], [0.0], REF_HYPER) for v in e]
    assert val == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-15)
    np.testing.assert_allclose(grad, [s[1][0] / 4 for s in singles], atol=1e-15)


def test_loss_kinks_take_left_branch():
    h = REF_HYPER
    c = h.tolerance
    g = h.gamma
    _, at0 = secure_loss([0.0], [0.0], h)
    assert at0[0] == pytest.approx(-(1 - g), abs=1e-15)
    _, atc = secure_loss([c], [0.0], h)
    assert atc[0] == pytest.approx(2 * g * c, abs=1e-15)


def test_loss_shape_decreases_toward_zero():
    h = REF_HYPER
    e = np.linspace(-2, 2, 401)
    vals = np.array([secure_loss([v], [0.0], h)[0] for v in e])
    neg = e <= 0
    assert np.all(np.diff(vals[neg]) < 0)
    assert np.all(np.diff(vals[~neg]) > 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_loss_gradient_matches_finite_differences(e, gamma, eps):
    h = LossHyper(gamma, eps)
    if abs(e) < 1e-3 or abs(e - h.tolerance) < 1e-3:
        return
    _, g = secure_loss([e], [0.0], h)
    step = 1e-6
    fd = (secure_loss([e + step], [0.0], h)[0] - secure_loss([e - step], [0.0], h)[0]) / (2 * step)
    assert abs(fd - g[0]) <= 1e-5 * max(abs(g[0]), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.2), st.floats(0.8, 0.99), st.floats(1e-4, 0.05))
def test_monotone_security_pressure(gamma, eps, t):
    h = LossHyper(gamma, eps)
    insecure = secure_loss([-t], [0.0], h)[0]
    secure = secure_loss([t], [0.0], h)[0]
    assert insecure > secure


def test_backprop_matches_finite_differences():
    arch = _arch((7, 5), ("tanh", "sigmoid"))
    net = init_network(arch, 1)
    rng = np.random.default_rng(0)
    for b in net.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    X = rng.normal(size=(12, 29))
    y = rng.normal(size=12) + 1
    _, grads = backprop(net, X, y, REF_HYPER)
    step = 1e-6
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        for idx in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
            old = flat[idx]
            flat[idx] = old + step
            up = secure_loss(forward(net, X), y, REF_HYPER)[0]
            flat[idx] = old - step
            down = secure_loss(forward(net, X), y, REF_HYPER)[0]
            flat[idx] = old
            fd = (up - down) / (2 * step)
            analytic = g.reshape(-1)[idx]
            if abs(analytic) > 1e-6:
                worst = max(worst, abs(fd - analytic) / abs(analytic))
    assert worst <= 1e-4


# preprocessing


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_standardization_invertible(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 29)) * rng.uniform(1e-3, 10, size=29) + rng.normal(size=29)
    pre = Preprocessor.fit(X)
    np.testing.assert_allclose(pre.inverse_transform(pre.transform(X)), X, atol=1e-12)
    Z = pre.transform(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-12)


def test_constant_feature_warns():
    X = np.random.default_rng(0).normal(size=(10, 29))
    X[:, 12] = 0.0
    with pytest.warns(UserWarning):
        pre = Preprocessor.fit(X)
    assert pre.feature_stds[12] == 1.0


def test_label_transform():
    assert Preprocessor.transform_labels(1e-3) == pytest.approx(3.0)
    assert Preprocessor.inverse_labels(3.0) == pytest.approx(1e-3, rel=1e-15)


# training


def _linear_toy(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 29))
    w = rng.normal(size=29) * 0.1
    y_star = X @ w + 2.0
    return X, 10.0 ** (-y_star)


def test_training_reduces_loss_on_linear_toy():
    X, y = _linear_toy()
    pre = Preprocessor.fit(X)
    cfg = TrainConfig(batch_size=32, epochs=200, seed=0)
    model, best = train(init_network(_arch((16, 8)), 0), X, y, pre, REF_HYPER, cfg)
    curve = model.history["train_loss"]
    assert curve[-1] <= 0.5 * curve[0]
    assert best <= model.history["val_loss"][0]
    assert best == min(model.history["val_loss"])
    assert model.history["val_loss"][model.best_epoch - 1] == best


def test_training_is_deterministic():
    X, y = _linear_toy(120)
    pre = Preprocessor.fit(X)
    cfg = TrainConfig(batch_size=32, epochs=15, seed=4)
    arch = _arch((8, 8), drops=(0.1, 0.1))
    a, la = train(init_network(arch, 0), X, y, pre, REF_HYPER, cfg)
    b, lb = train(init_network(arch, 0), X, y, pre, REF_HYPER, cfg)
    assert la == lb
    assert a.history == b.history
    assert dumps_model(a) == dumps_model(b)


def test_training_rejects_non_positive_labels():
    X, y = _linear_toy(20)
    y[3] = 0.0
    y[7] = -1e-4
    with pytest.raises(ValueError, match=r"\[3, 7\]"):
        train(init_network(_arch(), 0), X, y, Preprocessor.fit(X), REF_HYPER, TrainConfig(epochs=1))


# prediction and evaluation


def test_predict_back_transform():
    model, X = _toy_model()
    W_last = model.net.weights[-1]
    W_last[:] = 0
    model.net.biases[-1][:] = 3.0
    assert predict_key_rate(model, X[0]) == pytest.approx(1e-3, rel=1e-14)


def test_predictions_positive_and_batch_consistent():
    model, X = _toy_model()
    rates = predict_key_rate(model, X)
    assert np.all(rates > 0)
    same = predict_key_rate(model, np.repeat(X[:1], 4, axis=0))
    assert np.all(same == same[0])
    with pytest.raises(ValueError):
        predict_key_rate(model, np.zeros(28))


def test_evaluation_examples():
    rep = report_from_predictions([8e-4], [1e-3])
    assert rep.secure_fraction == 1.0
    assert rep.deviations[0] == pytest.approx(-0.2)
    assert rep.within_20 == 1.0 and rep.within_40 == 1.0
    rep = report_from_predictions([1e-3], [1e-3])
    assert rep.secure_fraction == 1.0 and rep.deviations[0] == 0.0
    rep = report_from_predictions([1.1e-3, 7e-4, 5e-4, 9.9e-4], [1e-3] * 4)
    assert rep.secure_fraction == 0.75
    assert rep.within_20 == pytest.approx(1 / 3)
    assert rep.within_40 == pytest.approx(2 / 3)


def test_evaluate_model_all_secure():
    model, X = _toy_model()
    pred = predict_key_rate(model, X)
    rep = evaluate_model(model, X, pred * 2)
    assert rep.secure_fraction == 1.0
    assert rep.n == len(X)
    assert sum(rep.bin_fractions) == pytest.approx(1.0)
    assert 0 <= rep.within_20 <= rep.within_40 <= 1


def test_histogram_bins():
    edges, fracs = deviation_histogram([-0.2, -0.1, 0.0, 0.01, -0.04])
    assert edges[0] == pytest.approx(-0.25)
    assert len(edges) == len(fracs) + 1
    assert sum(fracs) == pytest.approx(1.0)
    # -0.2 lands in (-0.25, -0.2], 0.0 in (-0.05, 0]
    assert fracs[0] == pytest.approx(0.2)
    np.testing.assert_allclose(np.diff(edges), 0.05)


# serialization


def test_serialization_round_trip(tmp_path):
    model, X = _toy_model(_arch((16, 8, 4), ("tanh", "relu", "sigmoid"), (0.1, 0.0, 0.2)))
    path = save_model(model, tmp_path / "m.json")
    loaded = load_model(path)
    np.testing.assert_array_equal(predict_key_rate(loaded, X), predict_key_rate(model, X))
    assert dumps_model(loaded) == dumps_model(model)
    d = model_to_dict(model)
    assert d["architecture"]["activations"] == ["tanh", "relu", "sigmoid"]
    assert d["seed"] == model.train_config.seed
    d["weights"][0]["shape"] = [29 * 16, 1]
    with pytest.raises(ValueError):
        model_from_dict(d)
