import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcdrive.core import BivariateGaussian, FrameTransform, Position2D, PredictionSeries, TrajectoryWindow
from qcdrive.predict import (
    AttentionWeights,
    PredictorConfig,
    TrainingDiverged,
    TrainingSample,
    forward,
    grad_check,
    init_weights,
    load,
    loss,
    make_batch,
    multi_encoder_attention,
    multi_head,
    predict,
    predict_cv,
    rmse_ade_fde,
    save,
    scaled_dot_attention,
    train,
    zero_weights,
)
from qcdrive.predict import layers as L
from qcdrive.predict.model import cv_skip
from qcdrive.sensing import FusedInput

SMALL = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3)


def _input(rng, n_nb, t_h=4, scale=3.0):
    tv = TrajectoryWindow(1, 0, 0.2, rng.normal(0, scale, (t_h + 1, 2)))
    nb = tuple(TrajectoryWindow(2 + i, 0, 0.2, rng.normal(0, scale, (t_h + 1, 2))) for i in range(n_nb))
    return FusedInput(1, tv, tuple(range(2, 2 + n_nb)), nb, FrameTransform(Position2D(0, 0)))


def _cv_input(v, t_h, dt=0.2):
    k = np.arange(-t_h, 1)[:, None]
    return FusedInput(0, TrajectoryWindow(0, 0, dt, k * np.asarray(v) * dt), (), (), FrameTransform(Position2D(0, 0)))


# -- attention operators ---------------------------------------------------------

def test_attention_examples():
    rng = np.random.default_rng(0)
    row = rng.normal(size=(1, 3))
    np.testing.assert_allclose(scaled_dot_attention(rng.normal(size=(4, 2)), rng.normal(size=(1, 2)), row),
                               np.repeat(row, 4, axis=0))
    V = rng.normal(size=(3, 2))
    K = np.array([[0.0, 1.0], [0.0, 2.0], [0.0, -1.0]])
    np.testing.assert_allclose(scaled_dot_attention(np.array([[1.0, 0.0]]), K, V), V.mean(axis=0, keepdims=True))
    w = np.exp([1 / math.sqrt(2), 0.0])
    w /= w.sum()
    got = scaled_dot_attention([[1, 0]], [[1, 0], [0, 1]], [[1, 0], [0, 1]])
    np.testing.assert_allclose(got, [w], atol=1e-15)
    with pytest.raises(ValueError):
        scaled_dot_attention(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        scaled_dot_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for scale in (1e-3, 1.0, 50.0):
        A = L.softmax(rng.normal(0, scale, (7, 5, 9)))
        assert np.max(np.abs(A.sum(-1) - 1)) < 1e-6
    A = L.softmax(np.where(L.causal_mask(6), -np.inf, rng.normal(size=(6, 6))))
    assert np.max(np.abs(A.sum(-1) - 1)) < 1e-6 and np.all(A[L.causal_mask(6)] == 0)


def _att_weights(rng, d):
    return {k: rng.normal(size=(d, d)) for k in ("W_Q", "W_K", "W_V", "W_O")}


def test_multi_head_examples():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    eye = {k: np.eye(4) for k in ("W_Q", "W_K", "W_V", "W_O")}
    np.testing.assert_allclose(multi_head(Q, K, V, eye, 1), scaled_dot_attention(Q, K, V), atol=1e-15)
    W = _att_weights(rng, 4)
    W0 = dict(W, W_O=np.zeros((4, 4)))
    assert not multi_head(Q, K, V, W0, 2).any()
    # explicit concat-then-project oracle for h = 2
    q, k, v = Q @ W["W_Q"], K @ W["W_K"], V @ W["W_V"]
    heads = []
    for i in range(2):
        s = q[:, 2 * i:2 * i + 2] @ k[:, 2 * i:2 * i + 2].T / math.sqrt(2)
        a = np.exp(s) / np.exp(s).sum(1, keepdims=True)
        heads.append(a @ v[:, 2 * i:2 * i + 2])
    np.testing.assert_allclose(multi_head(Q, K, V, W, 2), np.hstack(heads) @ W["W_O"], rtol=1e-12)
    with pytest.raises(ValueError):
        multi_head(Q, K, V, _att_weights(rng, 4), 3)


def test_multi_encoder_examples():
    rng = np.random.default_rng(3)
    d = 4
    W = _att_weights(rng, d)
    Q0 = rng.normal(size=(3, d))
    enc = [(rng.normal(size=(5, d)), rng.normal(size=(5, d))) for _ in range(3)]
    one = multi_encoder_attention(Q0, enc[:1], W, np.eye(d), 2)
    assert np.array_equal(one, multi_head(Q0, *enc[0], W, 2))
    WM = rng.normal(size=(d, d))
    dup = multi_encoder_attention(Q0, [enc[0], enc[0]], W, np.vstack([WM / 2, WM / 2]), 2)
    np.testing.assert_allclose(dup, multi_encoder_attention(Q0, enc[:1], W, WM, 2), rtol=1e-12, atol=1e-14)
    WM3 = rng.normal(size=(3 * d, d))
    M = [multi_head(Q0, K, V, W, 2) for K, V in enc]
    np.testing.assert_allclose(multi_encoder_attention(Q0, enc, W, WM3, 2), np.hstack(M) @ WM3, rtol=1e-12)
    with pytest.raises(ValueError):
        multi_encoder_attention(Q0, enc, W, rng.normal(size=(2 * d, d)), 2)
    with pytest.raises(ValueError):
        multi_encoder_attention(Q0, [], W, WM3, 2)


def test_batched_mha_matches_reference():
    rng = np.random.default_rng(4)
    d, h = 8, 2
    W = _att_weights(rng, d)
    q = rng.normal(size=(2, 3, d))
    kv = rng.normal(size=(2, 4, 5, d))
    out, _ = L.mha_fwd(q, kv, W["W_Q"], W["W_K"], W["W_V"], W["W_O"], h)
    for b in range(2):
        for e in range(4):
            np.testing.assert_allclose(out[b, e], multi_head(q[b], kv[b, e], kv[b, e], W, h), rtol=1e-12, atol=1e-14)
    m = L.causal_mask(3)
    out, _ = L.mha_fwd(q, q[:, None], W["W_Q"], W["W_K"], W["W_V"], W["W_O"], h, mask=m)
    np.testing.assert_allclose(out[0, 0], multi_head(q[0], q[0], q[0], W, h, mask=m), rtol=1e-12, atol=1e-14)


# -- forward ---------------------------------------------------------------------

def test_zero_weights_output():
    cfg = PredictorConfig()
    out = forward(_input(np.random.default_rng(5), 3, t_h=10), zero_weights(cfg), cfg)
    np.testing.assert_array_equal(out.params, np.tile([0, 0, 1, 1, 0], (cfg.t_f, 1)))


def test_random_weights_give_valid_gaussians():
    rng = np.random.default_rng(6)
    cfg = SMALL
    inputs = [_input(rng, int(rng.integers(0, 3))) for _ in range(40)]
    for draw in range(1000 // 40 + 1):
        w = AttentionWeights({k: rng.normal(0, 1.0, v.shape) for k, v in init_weights(cfg).params.items()})
        out = predict(inputs, w, cfg)
        assert np.all(np.isfinite(out))
        assert np.all(out[..., 2:4] > 0) and np.all(np.abs(out[..., 4]) < 1)
    PredictionSeries(out[0]).steps  # constructs BivariateGaussian objects


def test_neighbor_permutation_with_permuted_wm():
    rng = np.random.default_rng(7)
    cfg = SMALL
    w = init_weights(cfg)
    fi = _input(rng, 2)
    swapped = FusedInput(fi.tv_id, fi.tv_history, fi.neighbor_ids[::-1], fi.neighbor_histories[::-1], fi.frame)
    w2 = w.copy()
    d = cfg.d_model
    WM = w.params["dec.W_M"]
    w2.params["dec.W_M"] = np.vstack([WM[:d], WM[2 * d:3 * d], WM[d:2 * d]])
    np.testing.assert_allclose(forward(swapped, w2, cfg).params, forward(fi, w, cfg).params, rtol=1e-12, atol=1e-12)


def test_missing_neighbors_match_sliced_wm():
    rng = np.random.default_rng(8)
    big = SMALL
    small = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=2)
    w = init_weights(big)
    ws = w.copy()
    ws.params["dec.W_M"] = w.params["dec.W_M"][: 2 * big.d_model]
    fi = _input(rng, 1)
    np.testing.assert_allclose(forward(fi, w, big).params, forward(fi, ws, small).params, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        forward(_input(rng, 1, t_h=5), w, big)


# -- loss ------------------------------------------------------------------------

def test_loss_examples():
    t_f = 4
    mu = np.arange(2 * t_f, dtype=float).reshape(t_f, 2)
    unit = PredictionSeries(np.column_stack([mu, np.ones((t_f, 2)), np.zeros(t_f)]))
    assert loss(unit, mu, (1.0, 0.0)) == pytest.approx(t_f * math.log(2 * math.pi), abs=1e-12)
    assert loss(unit, mu, (0.0, 1.0)) == 0.0
    wide = PredictionSeries(np.column_stack([mu, 2 * np.ones((t_f, 2)), np.zeros(t_f)]))
    assert loss(wide, mu, (1, 0)) - loss(unit, mu, (1, 0)) == pytest.approx(t_f * math.log(4), abs=1e-12)
    one = PredictionSeries.from_steps([BivariateGaussian(0, 0, 1, 1, 0)])
    assert loss(one, [Position2D(1, 0)], (1, 0)) == pytest.approx(math.log(2 * math.pi) + 0.5, abs=1e-12)
    assert loss(one, [Position2D(1, 0)], (0, 1)) == pytest.approx(1.0)


def test_loss_matches_density_oracle():
    from scipy.stats import multivariate_normal
    rng = np.random.default_rng(9)
    for _ in range(20):
        mx, my, z1, z2 = rng.normal(size=4)
        sx, sy = rng.uniform(0.2, 3, 2)
        rho = rng.uniform(-0.95, 0.95)
        cov = [[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]]
        want = -multivariate_normal([mx, my], cov).logpdf([z1, z2])
        got = loss(PredictionSeries.from_steps([BivariateGaussian(mx, my, sx, sy, rho)]), [(z1, z2)], (1, 0))
        assert got == pytest.approx(want, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_loss_translation_consistent(tx, ty):
    rng = np.random.default_rng(10)
    p = np.column_stack([rng.normal(size=(3, 2)), rng.uniform(0.5, 2, (3, 2)), rng.uniform(-0.5, 0.5, 3)])
    z = rng.normal(size=(3, 2))
    q = p.copy()
    q[:, :2] += [tx, ty]
    for w in ((1, 0), (0, 1)):
        assert loss(PredictionSeries(q), z + [tx, ty], w) == pytest.approx(loss(PredictionSeries(p), z, w), abs=1e-9)


# -- gradients and training ---------------------------------------------------------

def _perturbed(cfg, seed=0):
    rng = np.random.default_rng(seed)
    w = init_weights(cfg)
    for k in w.params:
        w.params[k] = w.params[k] + rng.normal(0, 0.1, w.params[k].shape)
    return w


def test_grad_check_full_network():
    rng = np.random.default_rng(11)
    s = [TrainingSample(_input(rng, 2), rng.normal(0, 2, (3, 2)))]
    w = _perturbed(SMALL)
    assert grad_check(w, s, SMALL) <= 1e-4
    assert grad_check(w, s, SMALL, corrupt="W_O") > 1e-2
    # mixed neighbour counts in one batch
    s3 = [TrainingSample(_input(rng, n), rng.normal(0, 2, (3, 2))) for n in (0, 1, 2)]
    assert grad_check(w, s3, SMALL, n_coords=120, seed=1) <= 1e-4


def test_grad_check_linear_only():
    cfg = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3, attention=False)
    rng = np.random.default_rng(12)
    v = np.array([0.4, 27.0])
    # a driving-like sample keeps the loss O(10) so roundoff stays below the tolerance
    fut = np.arange(1, 4)[:, None] * v * 0.2 + rng.normal(0, 0.3, (3, 2))
    s = [TrainingSample(_cv_input(v, 4), fut)]
    assert grad_check(init_weights(cfg), s, cfg) <= 1e-7


def _toy(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        v = np.array([rng.normal(0, 0.5), rng.uniform(15, 35)])
        out.append(TrainingSample(_cv_input(v, cfg.t_h, cfg.dt), np.arange(1, cfg.t_f + 1)[:, None] * v * cfg.dt))
    return out


def test_training_determinism_and_zero_lr():
    cfg = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3)
    s = _toy(cfg, 40)
    a = train(s, cfg, steps=20, batch_size=8)
    b = train(s, cfg, steps=20, batch_size=8)
    assert a.equals(b)
    assert a.meta["final_loss"] <= a.meta["initial_loss"]
    z = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3, learning_rate=0.0)
    assert train(s, z, steps=5, batch_size=8).equals(init_weights(z))
    sg = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3, optimizer="sgd", learning_rate=1e-3)
    assert train(s, sg, steps=10, batch_size=8).meta["final_loss"] <= a.meta["initial_loss"] + 1e-9
    with pytest.raises(ValueError):
        train([], cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported():
    cfg = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3, optimizer="sgd", learning_rate=1e9)
    with pytest.raises(TrainingDiverged):
        train(_toy(cfg, 16), cfg, steps=50, batch_size=8, clip=1e12)


def test_training_reduces_loss_on_toy_set():
    cfg = PredictorConfig(d_model=8, heads=2, t_h=4, t_f=3, max_encoders=3)
    s = _toy(cfg, 200)
    w = train(s, cfg, steps=150, weights=init_weights(cfg, skip="zero"))
    assert w.meta["final_loss"] <= 0.5 * w.meta["initial_loss"]


def test_checkpoint_round_trip(tmp_path):
    w = _perturbed(SMALL, 3)
    save(tmp_path / "m.ckpt", w, SMALL)
    w2, cfg2, _ = load(tmp_path / "m.ckpt")
    assert cfg2 == SMALL and w2.equals(w)
    save(tmp_path / "m2.ckpt", w2, cfg2)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    with pytest.raises(ValueError):
        AttentionWeights({"skip.W": np.zeros((2, 2))}).check(SMALL)


def test_config_invariants():
    with pytest.raises(ValueError):
        PredictorConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        PredictorConfig(t_f=0)
    with pytest.raises(ValueError):
        PredictorConfig(loss_weights=(1.0, 0.5))


# -- constant-velocity baseline and metrics ----------------------------------------------

def test_cv_examples():
    v = np.array([0.3, 25.0])
    fi = _cv_input(v, 10)
    p = predict_cv(fi, fixed_sigma=0.5, t_f=15)
    truth = np.arange(1, 16)[:, None] * v * 0.2
    np.testing.assert_allclose(p.mu, truth, atol=1e-12)
    np.testing.assert_allclose(p.params[:, 2], 0.5 * np.arange(1, 16))
    assert np.all(p.params[:, 4] == 0)
    still = predict_cv(_cv_input([0, 0], 10), t_f=5)
    assert np.all(still.mu == 0)
    # constant acceleration of 1 m/s^2: y_n = 0.5 (n dt)^2 from rest at n = -t_h
    dt, t_h = 0.2, 10
    n = np.arange(0, t_h + 1)
    hist = np.column_stack([np.zeros(t_h + 1), 0.5 * (n * dt) ** 2])
    fi = FusedInput(0, TrajectoryWindow(0, 0, dt, hist), (), (), FrameTransform(Position2D(0, 0)))
    k = np.arange(1, 6)
    fut = 0.5 * ((t_h + k) * dt) ** 2
    err = fut - predict_cv(fi, t_f=5).mu[:, 1]
    # the two-point velocity lags by half a step: error = 0.5 (k dt)^2 + 0.5 k dt^2
    np.testing.assert_allclose(err, 0.5 * (k * dt) ** 2 + 0.5 * k * dt * dt, atol=1e-12)


def test_metrics_examples():
    t = [np.zeros((3, 2))]
    r, ade, fde = rmse_ade_fde([PredictionSeries(np.zeros((3, 5)) + [0, 0, 1, 1, 0])], t)
    assert np.all(r == 0) and ade == 0 and fde == 0
    p = PredictionSeries(np.tile([3.0, 4.0, 1, 1, 0], (3, 1)))
    r, ade, fde = rmse_ade_fde([p], t)
    np.testing.assert_allclose(r, 5.0)
    assert ade == pytest.approx(5) and fde == pytest.approx(5)
    p0 = PredictionSeries(np.tile([0.0, 0.0, 1, 1, 0], (3, 1)))
    p2 = PredictionSeries(np.array([[0, 0, 1, 1, 0], [0, 0, 1, 1, 0], [2, 0, 1, 1, 0]], dtype=float))
    assert rmse_ade_fde([p0, p2], t * 2)[2] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rmse_ade_fde([], [])


def test_cv_skip_is_constant_velocity():
    cfg = PredictorConfig(t_h=4, t_f=3, d_model=8, heads=2)
    fi = _cv_input([1.0, 20.0], 4)
    b = make_batch([fi], None, cfg)
    mu = (b.tv.reshape(1, -1) @ cv_skip(cfg)).reshape(3, 2)
    np.testing.assert_allclose(mu, predict_cv(fi, t_f=3).mu, atol=1e-12)
