import json
import math

import numpy as np
import pytest

from nalloc.errors import AlignmentError, DimensionMismatch, EmptyDataset, LengthMismatch, TooShort
from nalloc.forecaster import (
    FORMAT_TAG,
    Forecast,
    LstmModel,
    TrainConfig,
    Window,
    init_model,
    load_model,
    loss_and_grad,
    lstm_forward,
    make_windows,
    mse_loss,
    predict,
    predict_batch,
    predict_normalized,
    prediction_metrics,
    save_model,
    train,
)
from nalloc.synth import SynthSpec, generate_panel

from conftest import make_panel


def random_model(rng, N=3, d=4, scale=0.5, **kw):
    m = init_model(N, d, seed=int(rng.integers(1 << 30)), **kw)
    return m.replace(**{k: rng.normal(0, scale, v.shape) for k, v in m.params().items()})


def reference_hidden(model, inputs):
    """Scalar re-implementation of the LSTM recurrence, one gate matrix at a time."""
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    x_rows = (np.asarray(inputs) - model.norm_mean) / model.norm_std
    d = model.hidden_dim
    h = [0.0] * d
    c = [0.0] * d
    Wg = {g: model.gate("W", g) for g in "ifog"}
    Ug = {g: model.gate("U", g) for g in "ifog"}
    bg = {g: model.gate("b", g) for g in "ifog"}
    for x in x_rows:
        pre = {g: [sum(Wg[g][j, k] * x[k] for k in range(len(x))) + sum(Ug[g][j, k] * h[k] for k in range(d)) + bg[g][j]
                   for j in range(d)] for g in "ifog"}
        c = [sig(pre["f"][j]) * c[j] + sig(pre["i"][j]) * math.tanh(pre["g"][j]) for j in range(d)]
        h = [sig(pre["o"][j]) * math.tanh(c[j]) for j in range(d)]
    return np.array(h)


def test_make_windows_counts():
    assert len(make_windows(make_panel(np.arange(5.0)), 2)) == 3
    assert len(make_windows(make_panel(np.arange(4.0)), 3)) == 1
    with pytest.raises(TooShort):
        make_windows(make_panel(np.arange(3.0)), 3)


def test_make_windows_indexing(rng):
    panel = make_panel(rng.normal(size=(40, 3)))
    L = 7
    for k, w in enumerate(make_windows(panel, L)):
        np.testing.assert_array_equal(w.inputs, panel.returns[k:k + L])
        np.testing.assert_array_equal(w.target, panel.returns[k + L])
        assert w.target_date == panel.dates[k + L]
        assert panel.dates.index(w.target_date) - 1 == k + L - 1


def test_zero_parameters_give_zero_hidden():
    m = init_model(2, 3, seed=0)
    m = m.replace(**{k: np.zeros_like(v) for k, v in m.params().items()})
    h = lstm_forward(m, Window(np.ones((5, 2)), None))
    np.testing.assert_array_equal(h, np.zeros(3))


def test_single_step_hand_evaluation():
    m = LstmModel(W=[[0.3], [-0.2], [0.5], [0.7]], U=[[0.1], [0.2], [0.3], [0.4]], b=[0.05, 1.0, -0.1, 0.2],
                  W_mu=[[1.0]], b_mu=[0.0], norm_mean=[0.0], norm_std=[1.0])
    x = 0.8
    i = 1 / (1 + math.exp(-(0.3 * x + 0.05)))
    o = 1 / (1 + math.exp(-(0.5 * x - 0.1)))
    g = math.tanh(0.7 * x + 0.2)
    h = o * math.tanh(i * g)
    assert lstm_forward(m, Window(np.array([[x]]), None))[0] == pytest.approx(h, abs=1e-12)


def test_constant_input_converges(rng):
    m = random_model(rng, N=2, d=4, scale=0.4)
    x = np.array([0.3, -0.2])
    hs = [lstm_forward(m, Window(np.tile(x, (L, 1)), None)) for L in range(1, 61)]
    diffs = [np.linalg.norm(b - a) for a, b in zip(hs, hs[1:])]
    assert diffs[-1] < 1e-6
    assert diffs[-1] < diffs[0]


def test_predict_forced_by_denormalization():
    mean, std = np.array([0.001, -0.002]), np.array([0.02, 0.03])
    m = init_model(2, 3, seed=1, norm_mean=mean, norm_std=std)
    m = m.replace(W_mu=np.zeros((2, 3)), b_mu=np.zeros(2))
    np.testing.assert_array_equal(predict(m, Window(np.ones((4, 2)), None)).mu_hat, mean)
    z = np.array([0.5, -1.5])
    m = m.replace(b_mu=z)
    np.testing.assert_allclose(predict(m, Window(np.ones((4, 2)), None)).mu_hat, z * std + mean, rtol=1e-15)


def test_predict_matches_reference(rng):
    for _ in range(5):
        m = random_model(rng, N=3, d=4, norm_mean=rng.normal(0, 0.01, 3), norm_std=rng.uniform(0.01, 0.03, 3))
        x = rng.normal(0, 0.02, (6, 3))
        ref = (m.W_mu @ reference_hidden(m, x) + m.b_mu) * m.norm_std + m.norm_mean
        np.testing.assert_allclose(predict(m, Window(x, None)).mu_hat, ref, rtol=0, atol=1e-10)
        np.testing.assert_allclose(predict_batch(m, x[None])[0], ref, rtol=0, atol=1e-10)


def test_head_scaling_equivariance(rng):
    m = random_model(rng)
    w = Window(rng.normal(size=(5, 3)), None)
    base = predict_normalized(m, w)
    scaled = predict_normalized(m.replace(W_mu=2.0 * m.W_mu, b_mu=2.0 * m.b_mu), w)
    np.testing.assert_array_equal(scaled, 2.0 * base)


def test_dimension_mismatch(rng):
    m = random_model(rng, N=3)
    with pytest.raises(DimensionMismatch):
        predict(m, Window(np.zeros((4, 2)), None))


def test_mse_loss_values(rng):
    y = rng.normal(size=(6, 2))
    assert mse_loss(y, y) == 0.0
    assert mse_loss([np.array([0.1, -0.1])], [np.zeros(2)]) == pytest.approx(0.01, rel=1e-14)
    f = rng.normal(size=(6, 2))
    perm = rng.permutation(6)
    assert mse_loss(f[perm], y[perm]) == pytest.approx(mse_loss(f, y), rel=1e-14)
    with pytest.raises(LengthMismatch):
        mse_loss(f[:3], y)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_per_gate_block(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, N=3, d=4)
    X, Y = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 3))
    params = m.params()
    _, grads = loss_and_grad(params, X, Y)
    h = 1e-5
    for name, p in params.items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            up = {k: v.copy() for k, v in params.items()}
            dn = {k: v.copy() for k, v in params.items()}
            up[name][idx] += h
            dn[name][idx] -= h
            fd[idx] = (loss_and_grad(up, X, Y)[0] - loss_and_grad(dn, X, Y)[0]) / (2 * h)
        blocks = np.split(np.arange(p.shape[0]), 4) if name in ("W", "U", "b") else [np.arange(p.shape[0])]
        for rows in blocks:
            err = np.max(np.abs(fd[rows] - grads[name][rows])) / max(np.max(np.abs(fd[rows])), 1e-12)
            assert err < 1e-4, (name, err)


def test_train_zero_epochs_is_seeded_init():
    panel = make_panel(np.random.default_rng(0).normal(size=(50, 2)))
    cfg = TrainConfig(epochs=0, hidden_dim=5, seed=7)
    m = train(make_windows(panel, 4), cfg)
    ref = init_model(2, 5, seed=7)
    for k in ref.params():
        np.testing.assert_array_equal(getattr(m, k), getattr(ref, k))
    assert m.loss_history == ()


def test_train_empty():
    with pytest.raises(EmptyDataset):
        train([], TrainConfig())


def test_train_deterministic():
    panel = generate_panel(SynthSpec(n_assets=2, n_days=300, seed=1, ar_coeff=0.3))
    windows = make_windows(panel, 5)
    cfg = TrainConfig(epochs=3, hidden_dim=6, batch_size=16, seed=4)
    a, b = train(windows, cfg), train(windows, cfg)
    for k in a.params():
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()


def test_planted_signal_learned():
    panel = generate_panel(SynthSpec(n_assets=1, n_days=5010, seed=21, ar_coeff=0.5, garch_alpha=0.0,
                                     garch_beta=0.0, garch_omega=1e-4))
    windows = make_windows(panel, 10)
    assert len(windows) == 5000
    m = train(windows, TrainConfig(epochs=30, hidden_dim=8, seed=0))
    X = np.stack([w.inputs for w in windows])
    Y = np.stack([w.target for w in windows])
    mse = np.mean((predict_batch(m, X) - Y) ** 2)
    zero_baseline = np.mean((Y - Y.mean(axis=0)) ** 2)
    assert mse < 0.9 * zero_baseline
    assert m.loss_history[-1] < m.loss_history[0]


def test_prediction_metrics_cases(rng):
    panel = make_panel(rng.normal(0, 0.01, (10, 3)))
    same = [Forecast(d, r) for d, r in zip(panel.dates, panel.returns)]
    assert prediction_metrics(same, panel) == {"rmse": 0.0, "mae": 0.0, "directional_accuracy": 1.0}
    neg = [Forecast(d, -r) for d, r in zip(panel.dates, panel.returns)]
    assert prediction_metrics(neg, panel)["directional_accuracy"] == 0.0

    two = make_panel([0.0, 0.0])
    f = [Forecast(two.dates[0], np.array([0.01])), Forecast(two.dates[1], np.array([-0.03]))]
    m = prediction_metrics(f, two)
    assert m["mae"] == pytest.approx(0.02, rel=1e-14)
    assert m["rmse"] == pytest.approx(0.0223606797749978970, rel=1e-14)
    # sign(0) counts as +1: forecast -0.03 vs actual 0 disagrees, 0.01 vs 0 agrees
    assert m["directional_accuracy"] == 0.5


def test_prediction_metrics_alignment(rng):
    panel = make_panel(rng.normal(size=(3, 1)))
    with pytest.raises(AlignmentError):
        prediction_metrics([Forecast(panel.dates[0], np.zeros(1))], panel)


def test_checkpoint_round_trip(tmp_path, rng):
    panel = make_panel(rng.normal(0, 0.01, (60, 3)))
    m = train(make_windows(panel, 5), TrainConfig(epochs=2, hidden_dim=4, batch_size=8))
    path = tmp_path / "m.json"
    save_model(m, path)
    doc = json.loads(path.read_text())
    assert doc["format"] == FORMAT_TAG
    assert doc["params"]["W_f"]["shape"] == [4, 3]
    again = load_model(path)
    for k in list(m.params()) + ["norm_mean", "norm_std"]:
        np.testing.assert_array_equal(getattr(again, k), getattr(m, k))
    assert again.window == 5 and again.config == m.config
    save_model(again, tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()
