import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chunkcnn import nn
from chunkcnn.dsp import FeatureConfig, NormStats
from chunkcnn.errors import (
    ArchitectureError,
    DivergenceError,
    LabelError,
    ModelChecksumError,
    ModelFileError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
)
from conftest import small_model
from oracles import conv_nested_loops, fd_gradient_check


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

def test_sad_shape_chain():
    model = nn.build_architecture("sad", (32, 40))
    shapes = nn.chain_shapes(model.layers, (32, 40))
    assert shapes[1:] == [(28, 36, 32), (9, 12, 32), (5, 8, 32), (1280,), (64,), (2,)]
    assert model.class_labels == ["speech", "nonspeech"]


def test_sid_shape_chain():
    model = nn.build_architecture("sid", (128, 40), n_classes=8)
    shapes = nn.chain_shapes(model.layers, (128, 40))
    assert shapes[1:] == [(124, 36, 32), (41, 12, 32), (37, 8, 32), (9472,), (500,), (8,)]


def test_receptive_field_too_large_names_layer_one():
    with pytest.raises(ArchitectureError, match="layer 1"):
        nn.build_architecture("sad", (4, 4))


def test_weight_shapes_and_he_init():
    model = nn.build_architecture("sad", (32, 40), seed=3)
    w, b = model.params[0]
    assert w.shape == (32, 1, 5, 5) and np.all(b == 0)
    assert np.abs(w).max() <= np.sqrt(6 / 25)
    again = nn.build_architecture("sad", (32, 40), seed=3)
    assert all(np.array_equal(p, q) for ps, qs in zip(model.params, again.params) for p, q in zip(ps, qs))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def test_conv_all_ones():
    layer = nn.Conv2D(1, (2, 2), relu=False)
    y, _ = layer.forward(np.ones((1, 3, 3, 1)), [np.ones((1, 1, 2, 2)), np.zeros(1)])
    assert np.array_equal(y[0, :, :, 0], np.full((2, 2), 4.0))


def test_conv_matches_nested_loops(rng):
    for _ in range(20):
        n, c, f = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
        kh, kw = rng.integers(1, 4, 2)
        h, w = kh + rng.integers(0, 5), kw + rng.integers(0, 5)
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((n, h, w, c))
        wt = rng.standard_normal((f, c, kh, kw))
        b = rng.standard_normal(f)
        y, _ = nn.Conv2D(f, (kh, kw), stride, relu=False).forward(x, [wt, b])
        assert np.allclose(y, conv_nested_loops(x, wt, b, stride), rtol=0, atol=1e-12)


def test_maxpool_block_maximum(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    y, _ = nn.MaxPool2D((3, 3)).forward(x, [])
    assert np.array_equal(y[:, 0, 0, :], x.max(axis=(1, 2)))


def test_maxpool_drops_remainder_and_routes_first_max():
    x = np.zeros((1, 7, 4, 1))
    x[0, 0, 0, 0] = x[0, 1, 1, 0] = 5.0
    pool = nn.MaxPool2D((3, 3))
    y, cache = pool.forward(x, [])
    assert y.shape == (1, 2, 1, 1)
    dx, _ = pool.backward(np.ones_like(y), cache, [])
    assert dx[0, 0, 0, 0] == 1.0 and dx[0, 1, 1, 0] == 0.0
    assert dx.sum() == 2.0


def test_relu_gradient_zero_at_zero():
    layer = nn.Conv2D(1, (1, 1))
    x = np.array([[[[-1.0], [0.0], [2.0]]]])
    y, cache = layer.forward(x, [np.ones((1, 1, 1, 1)), np.zeros(1)])
    dx, _ = layer.backward(np.ones_like(y), cache, [np.ones((1, 1, 1, 1)), np.zeros(1)])
    assert dx.ravel().tolist() == [0.0, 0.0, 1.0]


def test_softmax_symmetric():
    assert np.array_equal(nn.softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 10)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_is_a_distribution(logits):
    p = nn.softmax(logits)
    assert np.all(p > 0)
    assert np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_geometry():
    model = nn.build_architecture("sad", (32, 40))
    with pytest.raises(ShapeError):
        nn.forward(model, np.zeros((2, 31, 40)))


def test_forward_batching_matches_single_rows(rng):
    model = small_model(1)
    x = rng.standard_normal((10, 12, 13))
    rows = np.concatenate([nn.forward(model, x[i:i + 1]) for i in range(10)])
    assert np.allclose(nn.forward(model, x, batch_size=3), rows, rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def test_cross_entropy_examples():
    assert nn.cross_entropy(np.array([[1.0, 0.0]]), [0]) == 0.0
    assert nn.cross_entropy(np.array([[np.exp(-1), 1 - np.exp(-1)]]), [0]) == pytest.approx(1.0, abs=1e-15)
    assert nn.cross_entropy(np.array([[0.5, 0.5]]), [1]) == pytest.approx(np.log(2), abs=1e-15)
    assert nn.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-np.log(1e-12))
    with pytest.raises(LabelError):
        nn.cross_entropy(np.array([[0.5, 0.5]]), [2])


def test_gradients_match_finite_differences(rng):
    model = small_model(0)
    x = rng.standard_normal((3, 12, 13))
    labels = rng.integers(0, 3, 3)
    worst, _, checked, _, kinds = fd_gradient_check(model, x, labels, rng.uniform(0.5, 2, 3))
    assert kinds == {"conv2d", "maxpool2d", "flatten", "dense", "softmax-output"}
    assert checked > 500
    assert worst < 1e-4


def test_zero_learning_signal():
    model = small_model(2, n_classes=2)
    model.params[-1][0][:] = 0.0
    model.params[-1][1][:] = [50.0, -50.0]
    x = np.random.default_rng(0).standard_normal((4, 12, 13))
    grads, loss, _ = nn.backward(model, x, np.zeros(4, dtype=int))
    assert loss < 1e-40
    assert max(np.abs(g).max() for gs in grads for g in gs) < 1e-40


def test_doubling_a_class_weight_adds_its_contribution(rng):
    model = small_model(4)
    x = rng.standard_normal((6, 12, 13))
    labels = np.array([0, 1, 2, 2, 1, 2])
    w = np.array([1.0, 0.7, 1.3])
    base, _, _ = nn.backward(model, x, labels, w)
    doubled, _, _ = nn.backward(model, x, labels, w * [1, 1, 2])
    only_c, _, _ = nn.backward(model, x, labels, w * [0, 0, 1])
    for gb, gd, gc in zip(base, doubled, only_c):
        for a, b, c in zip(gb, gd, gc):
            assert np.allclose(b, a + c, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def _one_step(g, cfg=None, p0=0.0):
    cfg = cfg or nn.TrainConfig()
    params = [[np.array([p0])]]
    state = nn.AdamState.zeros_like(params)
    nn.adam_step(params, [[np.array([g])]], state, 1, cfg)
    return params[0][0][0] - p0


def test_adam_first_step():
    assert _one_step(0.5) == pytest.approx(-1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    assert _one_step(0.0, p0=1.25) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False), st.floats(1e-9, 1e-1))
def test_adam_odd_and_bounded(g, lr):
    cfg = nn.TrainConfig(learning_rate=lr)
    up = _one_step(g, cfg)
    assert _one_step(-g, cfg) == -up
    assert abs(up) <= lr * (1 + 1e-9)


def test_adam_rejects_step_zero():
    params = [[np.zeros(1)]]
    with pytest.raises(ValueError):
        nn.adam_step(params, params, nn.AdamState.zeros_like(params), 0, nn.TrainConfig())


def test_train_config_validation():
    for bad in ({"learning_rate": 0}, {"adam_beta1": 1.0}, {"adam_beta2": 0.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            nn.TrainConfig(**bad)


def test_inverse_frequency_weights():
    w = nn.inverse_frequency_weights(np.array([0, 0, 0, 1]), 3)
    assert np.allclose(w, [4 / 9, 4 / 3, 1.0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_early_stopping_trace():
    stop = nn.EarlyStopping(3)
    decisions = [stop.update(e, v) for e, v in enumerate([1.0, 0.9, 0.95, 0.96, 0.97], 1)]
    assert decisions == [False, False, False, False, True]
    assert stop.best_epoch == 2


def test_train_returns_best_snapshot(monkeypatch, rng):
    losses = iter([1.0, 0.9, 0.95, 0.96, 0.97, 0.5])
    monkeypatch.setattr(nn, "evaluate", lambda *a, **k: (next(losses), 0.5))
    snapshots = []
    model = small_model(5)
    x, y = rng.standard_normal((8, 12, 13)), rng.integers(0, 3, 8)
    _, hist = nn.train(model, x, y, x, y, nn.TrainConfig(early_stop_patience=3, max_epochs=10),
                       progress=lambda rec: snapshots.append(model.copy_params()))
    assert [r.epoch for r in hist] == [1, 2, 3, 4, 5]
    for got, want in zip(model.params, snapshots[1]):
        assert all(np.array_equal(a, b) for a, b in zip(got, want))


def test_training_is_deterministic(rng):
    x, y = rng.standard_normal((20, 12, 13)), rng.integers(0, 3, 20)
    cfg = nn.TrainConfig(max_epochs=3, batch_size=7, seed=11)
    a, ha = nn.train(small_model(6), x, y, x, y, cfg)
    b, hb = nn.train(small_model(6), x, y, x, y, cfg)
    assert ha == hb
    assert nn.model_to_bytes(a) == nn.model_to_bytes(b)


def test_divergence_reports_epoch_and_batch(monkeypatch, rng):
    real = nn.backward

    def poisoned(*a, **k):
        grads, _, probs = real(*a, **k)
        return grads, float("nan"), probs
    monkeypatch.setattr(nn, "backward", poisoned)
    x, y = rng.standard_normal((4, 12, 13)), rng.integers(0, 3, 4)
    with pytest.raises(DivergenceError, match="epoch 1, batch 1"):
        nn.train(small_model(7), x, y, x, y, nn.TrainConfig(max_epochs=2))


def test_toy_loss_mostly_decreases(toy_sad_set):
    x, y = toy_sad_set
    model = nn.build_architecture("sad", (32, 40), seed=0)
    _, hist = nn.train(model, x, y, x, y, nn.TrainConfig(max_epochs=4, batch_size=16, seed=0, early_stop_patience=10))
    losses = [r.train_loss for r in hist]
    drops = sum(b <= a for a, b in zip(losses[:3], losses[1:4]))
    assert drops >= 2


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _trained_like_model():
    model = nn.build_architecture("sad", (32, 40), seed=9, feature_config=FeatureConfig.sad())
    model.norm_stats = NormStats(np.linspace(-3, 3, 40), np.linspace(0.5, 2, 40))
    return model


def test_round_trip_is_bit_exact(tmp_path, rng):
    model = _trained_like_model()
    path = tmp_path / "m.fsnn"
    nn.save_model(model, path)
    back = nn.load_model(path)
    x = rng.standard_normal((100, 32, 40))
    assert np.array_equal(nn.forward(back, x), nn.forward(model, x))
    assert back.class_labels == model.class_labels
    assert back.feature_config == model.feature_config
    assert np.array_equal(back.norm_stats.mean, model.norm_stats.mean)
    assert np.array_equal(back.norm_stats.std, model.norm_stats.std)
    assert nn.model_to_bytes(back) == path.read_bytes()


def test_wrong_magic():
    data = nn.model_to_bytes(small_model())
    with pytest.raises(ModelFileError, match="magic"):
        nn.model_from_bytes(b"XXXX" + data[4:])


def test_version_mismatch():
    data = bytearray(nn.model_to_bytes(small_model()))
    data[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(ModelVersionError):
        nn.model_from_bytes(bytes(data))


def test_checksum_failure():
    data = bytearray(nn.model_to_bytes(small_model()))
    data[-20] ^= 0x01
    with pytest.raises(ModelChecksumError):
        nn.model_from_bytes(bytes(data))


def test_truncated_mid_tensor_names_tensor():
    data = nn.model_to_bytes(small_model())
    # the last 4 bytes are the checksum, the 24 before it the output bias
    with pytest.raises(ModelTruncatedError, match=r"tensor layer6\.softmax-output\.bias"):
        nn.model_from_bytes(data[:-12])
    with pytest.raises(ModelTruncatedError, match=r"tensor layer5\.dense\.weight"):
        nn.model_from_bytes(data[:-400])


def test_error_kinds_are_distinct():
    kinds = {ModelVersionError, ModelChecksumError, ModelTruncatedError}
    assert len(kinds) == 3
    assert all(issubclass(k, ModelFileError) for k in kinds)
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)
