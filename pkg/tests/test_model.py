import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpvconv import checkpoint as ck
from mpvconv.data import SyntheticSpec, generate_synthetic
from mpvconv.model import (
    LayerSpec,
    MPVCNN,
    MPVCNNConfig,
    argmax_labels,
    build_mpvcnn,
    forward,
    point_only_baseline,
    predict,
    predict_batch,
)
from mpvconv.train import Adam, NonFiniteLossError, TrainConfig, softmax_cross_entropy, train
from mpvconv.transform import RawCloud
from mpvconv.ops import Parameter

SMALL = MPVCNNConfig(
    in_channels=1,
    layer_specs=(LayerSpec("mpvconv", 8, 4), LayerSpec("shared_mlp", 16)),
    head_channels=(16,),
)


def params(model):
    return {n: p.value.copy() for n, p in model.named_parameters()}


def random_cloud(rng, n=64, c1=1, k=2):
    return RawCloud(rng.standard_normal((n, 3)), rng.standard_normal((n, c1)).astype(np.float32),
                    rng.integers(0, k, n), k)


# construction ---------------------------------------------------------------


def test_builds_are_deterministic():
    a, b = params(build_mpvcnn(MPVCNNConfig(), 3)), params(build_mpvcnn(MPVCNNConfig(), 3))
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    c = params(build_mpvcnn(MPVCNNConfig(), 4))
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_width_half_halves_mpvconv_channels():
    half = MPVCNNConfig(width_multiplier=0.5).mpvconv_configs()
    assert [c.effective_out_channels for c in half if c] == [16, 32]


def _walk_count(in_channels, num_classes, specs, global_feature, heads):
    # independent enumeration of weight extents: conv blocks carry weight, bias,
    # and batch-norm gamma/beta; the classifier has no batch norm
    def conv(ci, co, k):
        return ci * co * k * k * k + co + 2 * co

    def mlp(ci, co):
        return ci * co + co + 2 * co

    total, c = 0, in_channels
    for kind, co in specs:
        if kind == "mpvconv":
            total += conv(c, co, 3) + conv(co, co, 3) + mlp(c, co)
            total += conv(co, co, 1) + conv(co, co, 3) + conv(co, co, 3) + mlp(co, co)
        else:
            total += mlp(c, co)
        c = co
    if global_feature:
        c *= 2
    for h in heads:
        total += mlp(c, h)
        c = h
    return total + c * num_classes + num_classes


def test_default_parameter_count_matches_shape_walk():
    model = MPVCNN(MPVCNNConfig())
    expect = _walk_count(1, 2, [("mpvconv", 32), ("mpvconv", 64), ("shared_mlp", 128)], True, [128])
    assert model.num_parameters() == expect
    assert sum(p.value.size for _, p in model.named_parameters()) == expect


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(layer_specs=(("mpvconv", 8, 4), ("conv", 8, None))), "layer 1"),
        (dict(layer_specs=(("mpvconv", 8, 4), ("mpvconv", 8, 1))), "layer 1"),
        (dict(layer_specs=(("shared_mlp", 8),)), "mpvconv"),
        (dict(num_classes=1), "num_classes"),
    ],
)
def test_invalid_config_rejected(kw, match):
    with pytest.raises(ValueError, match=match):
        MPVCNNConfig(**kw)


def test_config_dict_round_trip():
    cfg = MPVCNNConfig(width_multiplier=0.5, combination_mode="H")
    assert MPVCNNConfig.from_dict(cfg.to_dict()) == cfg


# forward and predict -----------------------------------------------------------


@pytest.mark.parametrize("n", [1, 17, 64])
def test_logits_shape(rng, n):
    model = build_mpvcnn(SMALL, 0)
    assert forward(model, random_cloud(rng, n)).shape == (n, 2)


def test_eval_forward_is_deterministic(rng):
    model = build_mpvcnn(MPVCNNConfig(), 1)
    cloud = random_cloud(rng, 128)
    assert np.array_equal(forward(model, cloud), forward(model, cloud))


def test_feature_channel_mismatch(rng):
    with pytest.raises(ValueError, match="feature channels"):
        forward(build_mpvcnn(SMALL, 0), random_cloud(rng, 8, c1=2))
    with pytest.raises(ValueError):
        forward(build_mpvcnn(SMALL, 0), random_cloud(rng, 8), mode="test")


def test_logits_permutation_equivariance(rng):
    model = build_mpvcnn(MPVCNNConfig(), 2)
    cloud = random_cloud(rng, 256)
    perm = rng.permutation(256)
    a = forward(model, cloud)
    b = forward(model, cloud.permuted(perm))
    np.testing.assert_allclose(a[perm], b, atol=1e-4)


def test_argmax_rules():
    assert argmax_labels(np.array([[0.1, 0.9]])).tolist() == [1]
    assert argmax_labels(np.array([[0.5, 0.5]])).tolist() == [0]


@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_predictions_invariant_under_positive_rescaling(scale, seed):
    logits = np.random.default_rng(seed).standard_normal((20, 4))
    assert np.array_equal(argmax_labels(logits), argmax_labels(logits * scale))


def test_predict_batch_matches_single(rng):
    model = build_mpvcnn(SMALL, 0)
    clouds = [random_cloud(rng, 32) for _ in range(3)] + [random_cloud(rng, 20)]
    for cloud, pred in zip(clouds, predict_batch(model, clouds, batch_size=2)):
        assert np.array_equal(pred, predict(model, cloud))


# gradient flow ----------------------------------------------------------------


def test_every_parameter_receives_gradient(rng):
    model = build_mpvcnn(MPVCNNConfig(), 0, np.float64).train()
    coords = rng.uniform(0, 1, (2, 128, 3))
    logits = model.forward(coords, rng.standard_normal((2, 1, 128)))
    model.zero_grad()
    model.backward(rng.standard_normal(logits.shape))
    named = dict(model.named_parameters())
    for name, p in named.items():
        prefix = name.rsplit(".", 2)[0]
        if name.endswith("0.bias") and f"{prefix}.1.state.gamma" in named:
            # a per-channel shift right before train-mode batch norm is removed
            # by the mean subtraction: its true gradient is zero, roundoff aside
            weight_grad = np.abs(named[name[: -len("bias")] + "weight"].grad).max()
            assert np.abs(p.grad).max() <= 1e-9 * weight_grad, name
        else:
            assert np.abs(p.grad).max() > 0, name


# training ---------------------------------------------------------------------


def test_cross_entropy_value_and_gradient(rng):
    logits = rng.standard_normal((2, 3, 5))
    labels = rng.integers(0, 3, (2, 5))
    loss, grad = softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expect = -np.mean([np.log(p[b, labels[b, n], n]) for b in range(2) for n in range(5)])
    assert np.isclose(loss, expect, rtol=1e-12)
    num = np.zeros_like(logits)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        num[idx] = (softmax_cross_entropy(logits + e, labels)[0] - softmax_cross_entropy(logits - e, labels)[0]) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-8)


def test_cross_entropy_survives_large_logits():
    loss, grad = softmax_cross_entropy(np.array([[[1000.0], [-1000.0]]]), np.array([[0]]))
    assert loss == 0.0 and np.isfinite(grad).all()


def test_adam_steps_by_hand():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([("p", p)], lr=0.1)
    g1, g2 = np.array([0.5, -3.0]), np.array([-1.0, 1.0])
    p.grad[:] = g1
    opt.step()
    # after one step m_hat = g and v_hat = g^2
    np.testing.assert_allclose(p.value, [1.0, -2.0] - 0.1 * g1 / (np.abs(g1) + 1e-8))
    before = p.value.copy()
    p.grad[:] = g2
    opt.step()
    m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9**2)
    v = (0.999 * 0.001 * g1**2 + 0.001 * g2**2) / (1 - 0.999**2)
    np.testing.assert_allclose(p.value, before - 0.1 * m / (np.sqrt(v) + 1e-8), rtol=1e-12)


def test_zero_learning_rate_keeps_parameters():
    ds = generate_synthetic(SyntheticSpec(8, 64), 0)
    model = build_mpvcnn(SMALL, 0)
    before = params(model)
    train(model, ds, TrainConfig(batch_size=4, learning_rate=0.0, epochs=1))
    after = params(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_logs_are_reproducible():
    ds = generate_synthetic(SyntheticSpec(8, 64), 0)
    val = generate_synthetic(SyntheticSpec(4, 64), 1)

    def run():
        buf = io.StringIO()
        model = build_mpvcnn(SMALL, 5)
        train(model, ds, TrainConfig(batch_size=4, epochs=3, seed=5), val, log_file=buf)
        return buf.getvalue(), params(model)

    (log_a, pa), (log_b, pb) = run(), run()
    assert log_a == log_b and len(log_a.splitlines()) == 3
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_until_stops_early():
    ds = generate_synthetic(SyntheticSpec(4, 32), 0)
    result = train(build_mpvcnn(SMALL, 0), ds, TrainConfig(batch_size=4, epochs=5), until=lambda m: m.epoch == 2)
    assert result.epoch == 2 and len(result.history) == 2


def test_non_finite_loss_aborts_with_location():
    ds = generate_synthetic(SyntheticSpec(4, 32), 0)
    model = build_mpvcnn(SMALL, 0)
    model.classifier.bias.value[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="epoch 1, batch 0") as info:
        train(model, ds, TrainConfig(batch_size=2, epochs=1))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_training_input_validation():
    model = build_mpvcnn(SMALL, 0)
    ds = generate_synthetic(SyntheticSpec(2, 32), 0)
    ds.samples.clear()
    with pytest.raises(ValueError, match="empty"):
        train(model, ds, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_single_sample_memorization():
    ds = generate_synthetic(SyntheticSpec(1, 512), 3)
    model = build_mpvcnn(MPVCNNConfig(), 0)
    result = train(model, ds, TrainConfig(batch_size=1, epochs=200))
    assert result.optimizer.t == 200
    assert result.history[-1].train_loss < 0.1
    assert result.history[-1].train_loss < result.history[0].train_loss


# checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(8, 64), 0)
    model = build_mpvcnn(SMALL, 0)
    result = train(model, ds, TrainConfig(batch_size=4, epochs=2))
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.checkpoint_from(model, result.optimizer, result.epoch, result.rng, result.train_config), path)
    loaded = ck.load_checkpoint(path)
    restored = ck.restore_model(loaded)
    for cloud in ds.samples:
        assert np.array_equal(forward(model, cloud), forward(restored, cloud))
    assert loaded.epoch == 2 and loaded.adam_t == result.optimizer.t
    assert loaded.train_config == result.train_config
    rng = np.random.default_rng()
    rng.bit_generator.state = loaded.rng_state
    assert rng.random() == result.rng.random()
    opt = ck.restore_optimizer(loaded, restored)
    assert all(np.array_equal(opt.m[k], result.optimizer.m[k]) for k in opt.m)


def test_checkpoint_file_starts_with_magic_and_version(tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.checkpoint_from(build_mpvcnn(SMALL, 0)), path)
    data = path.read_bytes()
    assert data.startswith(b"MPVCKPT") and int.from_bytes(data[7:11], "little") == ck.FORMAT_VERSION


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.checkpoint_from(build_mpvcnn(SMALL, 0)), path)
    data = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(data[:-5])
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTCKPT" + data[7:])
    with pytest.raises(ck.CheckpointError, match="MPVCKPT"):
        ck.load_checkpoint(tmp_path / "magic.ckpt")
    bumped = data[:7] + (99).to_bytes(4, "little") + data[11:]
    (tmp_path / "version.ckpt").write_bytes(bumped)
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.load_checkpoint(tmp_path / "version.ckpt")


# baseline ---------------------------------------------------------------------


def test_point_only_baseline_matches_budget():
    target = MPVCNN(MPVCNNConfig()).num_parameters()
    base = point_only_baseline(MPVCNNConfig(), target)
    assert all(s.kind == "shared_mlp" for s in base.layer_specs)
    assert abs(MPVCNN(base).num_parameters() - target) / target < 0.01
