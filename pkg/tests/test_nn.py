import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from satwealth import raster
from satwealth.errors import BadShape, EmptyDataset, NonFiniteLoss, ShapeMismatch, ValidationError, WindowTooLarge
from satwealth.nn import (
    Checkpoint,
    ConvSpec,
    ModelSpec,
    TrainConfig,
    adapt_first_layer,
    build_model,
    conv2d_backward,
    dilated_conv2d,
    extract_features,
    pretrain,
    softmax_cross_entropy,
)
from satwealth.nn import layers as L
from satwealth.nn.train import accuracy


def loop_conv(x, w, b, stride, dilations):
    """Nested-loop reference: 'same' padding for the largest dilation, offsets in whole dilation steps."""
    c, h, wd = x.shape
    f, k = w.shape[0], w.shape[3]
    dmax = max(dilations)
    span = (f - 1) * dmax
    lo = dmax * ((f - 1) // 2)
    xp = np.zeros((c, h + span, wd + span))
    xp[:, lo: lo + h, lo: lo + wd] = x
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((k, ho, wo))
    for kk in range(k):
        for y in range(ho):
            for xx in range(wo):
                total = 0.0 if b is None else b[kk]
                for ch in range(c):
                    d = dilations[ch]
                    off = (dmax - d) * ((f - 1) // 2)
                    for i in range(f):
                        for j in range(f):
                            total += xp[ch, y * stride + off + i * d, xx * stride + off + j * d] * w[i, j, ch, kk]
                out[kk, y, xx] = total
    return out


# convolution ------------------------------------------------------------

def test_one_by_one_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 4))
    out = dilated_conv2d(x, np.ones((1, 1, 1, 1)), None, 1, [1])
    assert np.array_equal(out[0], x[0])


@pytest.mark.parametrize("seed", range(6))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    f = int(rng.choice([1, 2, 3, 5]))
    dil = [int(d) for d in rng.choice([1, 2, 4], size=2)] if seed % 2 else [1, 1]
    stride = int(rng.choice([1, 2, 3]))
    x = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(f, f, 2, 3))
    b = rng.normal(size=3)
    ours = dilated_conv2d(x, w, b, stride, dil)
    assert np.max(np.abs(ours - loop_conv(x, w, b, stride, dil))) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 4]), st.sampled_from([1, 2, 3, 4, 5]), st.sampled_from([1, 2]),
       st.integers(3, 8), st.integers(0, 2**31 - 1))
def test_dilation_resolution_equivalence(r, f, s, side, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(1, side, side))
    w = rng.normal(size=(f, f, 1, 2))
    native = dilated_conv2d(g, w, None, s, [1])
    upsampled = dilated_conv2d(raster.nn_upsample(g, r), w, None, r * s, [r])
    assert np.array_equal(native, upsampled)


def test_equivalence_mixed_channels():
    """A 30 m channel at rate 2 next to a 15 m channel sees the same footprint as the native conv."""
    rng = np.random.default_rng(3)
    coarse = rng.normal(size=(6, 6))
    fine = np.zeros((12, 12))
    w = np.zeros((3, 3, 2, 1))
    w[:, :, 0, 0] = rng.normal(size=(3, 3))
    x = np.stack([raster.nn_upsample(coarse, 2), fine])
    mixed = dilated_conv2d(x, w, None, 2, [2, 1])
    native = dilated_conv2d(coarse[None], w[:, :, :1], None, 1, [1])
    assert np.array_equal(mixed, native)


def test_conv_errors():
    x = np.zeros((2, 5, 5))
    with pytest.raises(ShapeMismatch):
        dilated_conv2d(x, np.zeros((3, 3, 3, 1)))
    with pytest.raises(ShapeMismatch):
        dilated_conv2d(x, np.zeros((3, 3, 2, 1)), dilations=[1])
    with pytest.raises(WindowTooLarge):
        dilated_conv2d(x, np.zeros((3, 3, 2, 1)), padding="valid", dilations=[4, 1])
    with pytest.raises(ShapeMismatch):
        conv2d_backward(np.zeros((1, 1, 2, 2)), x, np.zeros((3, 3, 2, 1)))


def test_backward_zero_grad_out_and_scalar_case():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 3, 2, 4))
    gx, gw, gb = conv2d_backward(np.zeros((4, 5, 5)), x, w, 1, [1, 2])
    assert not gx.any() and not gw.any() and not gb.any()
    gx, gw, gb = conv2d_backward(np.array([[[3.0]]]), np.array([[[2.0]]]), np.array([[[[5.0]]]]))
    assert gw.item() == 6.0 and gx.item() == 15.0 and gb.item() == 3.0


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients(seed):
    for name, layer, x, train in gradcheck.layer_cases(seed):
        err = gradcheck.check_layer(layer, x, np.random.default_rng(seed), train)
        assert err < gradcheck.TOL, f"{name}: {err}"
    assert gradcheck.check_cross_entropy(np.random.default_rng(seed)) < gradcheck.TOL


@pytest.mark.parametrize("arch", ["VGGF_TOY", "RESNET18_TOY"])
def test_whole_model_gradient(arch):
    spec = ModelSpec.default(arch, "ALL9", [1, 1, 1, 2, 2, 4, 4, 2, 1], feature_dim=8)
    model = build_model(spec, seed=2)
    x = np.random.default_rng(2).normal(size=(4, 9, 16, 16))
    err = gradcheck.check_layer(model, x, np.random.default_rng(5), train=True, limit=8)
    assert err < gradcheck.TOL


# adaptation -------------------------------------------------------------

def test_adapt_examples():
    w = np.full((1, 1, 3, 1), 2.0)
    assert (adapt_first_layer(w)[..., 3:, :] == 2.0).all()
    w = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1)
    assert (adapt_first_layer(w)[0, 0, 3:, 0] == 2.0).all()


@pytest.mark.parametrize("seed", range(5))
def test_adapt_random(seed):
    w = np.random.default_rng(seed).normal(size=(7, 7, 3, 4))
    out = adapt_first_layer(w)
    assert out.shape == (7, 7, 9, 4)
    assert out[:, :, :3].tobytes() == w.tobytes()
    mean = (w[:, :, 0] + w[:, :, 1] + w[:, :, 2]) / 3
    for c in range(3, 9):
        assert np.array_equal(out[:, :, c], mean)


@pytest.mark.parametrize("shape", [(3, 3, 4, 2), (3, 2, 3, 2), (3, 3, 3)])
def test_adapt_bad_shape(shape):
    with pytest.raises(BadShape):
        adapt_first_layer(np.zeros(shape))


# loss -------------------------------------------------------------------

@given(st.integers(0, 10_000))
def test_cross_entropy_properties(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3)) * 3
    labels = rng.integers(0, 3, 4)
    loss, grad = softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert loss >= 0
    assert loss == pytest.approx(-np.log(p[np.arange(4), labels]).mean(), rel=1e-12)
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-15)


# models -----------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValidationError):
        ConvSpec(3, 1, 2, 4, (1, 3))
    with pytest.raises(ValidationError):
        ConvSpec(3, 1, 2, 4, (1,))
    with pytest.raises(ValidationError):
        ModelSpec("VGGF_TOY", "ALL9", ConvSpec(7, 1, 9, 16, (1,) * 9))
    with pytest.raises(ValidationError):
        ModelSpec.default("ALEXNET", "RGB")
    spec = ModelSpec.default("RESNET34_TOY", "RGB")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("arch,mode", [("VGGF_TOY", "ALL9"), ("RESNET18_TOY", "RGB"), ("RESNET34_TOY", "ALL9")])
def test_logit_shapes(arch, mode):
    c = 9 if mode == "ALL9" else 3
    model = build_model(ModelSpec.default(arch, mode), seed=0)
    out = model.forward(np.random.default_rng(0).normal(size=(c, 64, 64)))
    assert out.shape == (1, 3)
    assert model.features(np.zeros((2, c, 64, 64))).shape == (2, 64)
    with pytest.raises(ShapeMismatch):
        model.forward(np.zeros((c + 1, 64, 64)))


def test_build_is_deterministic_and_transfers_rgb():
    spec = ModelSpec.default("VGGF_TOY", "ALL9")
    a, b = build_model(spec, seed=7), build_model(spec, seed=7)
    assert all(np.array_equal(a.state()[k], b.state()[k]) for k in a.state())
    rgb = np.random.default_rng(1).normal(size=(11, 11, 3, 16))
    m = build_model(spec, seed=7, pretrained_rgb=rgb)
    w = m.first_conv.params["weight"]
    assert np.array_equal(w[:, :, :3], rgb) and np.array_equal(w[:, :, 5], rgb.mean(axis=2))
    with pytest.raises(BadShape):
        build_model(spec, seed=7, pretrained_rgb=np.zeros((7, 7, 3, 16)))


def test_preact_block_with_zero_weights_is_identity():
    block = L.PreActBlock(4, 4, 1, rng=np.random.default_rng(0))
    block.conv1.params["weight"][:] = 0
    block.conv2.params["weight"][:] = 0
    x = np.random.default_rng(1).normal(size=(2, 4, 5, 5))
    assert np.array_equal(block.forward(x, train=True), x)


def test_batchnorm_running_stats():
    bn = L.BatchNorm2d(2)
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(8, 2, 4, 4))
    bn.forward(x, train=True)
    assert np.allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


# training ---------------------------------------------------------------

def separable_data(seed, n, c=3, side=16):
    """Class-conditional Gaussian band means, well separated."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    centres = np.array([[-1.0, 0.0, 1.0], [1.0, -1.0, 0.0], [0.0, 1.0, -1.0]])
    x = rng.normal(scale=0.5, size=(n, c, side, side)) + centres[y][:, :c, None, None]
    return x.astype(np.float32), y


def test_separable_classes_reach_high_accuracy():
    from sklearn.linear_model import LogisticRegression

    xtr, ytr = separable_data(0, 96)
    xva, yva = separable_data(1, 60)
    oracle = LogisticRegression(max_iter=1000).fit(xtr.mean(axis=(2, 3)), ytr)
    assert oracle.score(xva.mean(axis=(2, 3)), yva) >= 0.95
    spec = ModelSpec.default("VGGF_TOY", "RGB")
    model = build_model(spec, seed=0, dtype=np.float32)
    ck = pretrain(model, (xtr, ytr), (xva, yva), TrainConfig(epochs=15, seed=0))
    assert ck.val_accuracy >= 0.95
    assert accuracy(model, xva, yva) == ck.val_accuracy


def test_zero_learning_rate_keeps_weights():
    x, y = separable_data(2, 40)
    model = build_model(ModelSpec.default("VGGF_TOY", "RGB"), seed=3)
    before = {k: v.copy() for k, v in model.state().items() if "running" not in k}
    ck = pretrain(model, (x, y), (x, y), TrainConfig(epochs=3, learning_rate=0.0))
    assert ck.epoch == 1
    for k, v in before.items():
        assert np.array_equal(ck.state[k], v), k


def test_single_sample_loss_decreases():
    x, y = separable_data(3, 1)
    model = build_model(ModelSpec.default("RESNET18_TOY", "RGB"), seed=0)
    ck = pretrain(model, (x, y), (x, y), TrainConfig(epochs=5, learning_rate=0.01, seed=0))
    losses = [h["train_loss"] for h in ck.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_reproducible():
    x, y = separable_data(4, 40)
    runs = []
    for _ in range(2):
        model = build_model(ModelSpec.default("VGGF_TOY", "RGB"), seed=1, dtype=np.float32)
        runs.append(pretrain(model, (x, y), (x[:10], y[:10]), TrainConfig(epochs=2, seed=5)))
    assert runs[0].history == runs[1].history
    assert all(runs[0].state[k].tobytes() == runs[1].state[k].tobytes() for k in runs[0].state)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_errors():
    model = build_model(ModelSpec.default("VGGF_TOY", "RGB"), seed=0)
    x, y = separable_data(5, 8)
    with pytest.raises(EmptyDataset):
        pretrain(model, (x[:0], y[:0]), (x, y), TrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        pretrain(model, (x, y + 3), (x, y), TrainConfig(epochs=1))
    with pytest.raises(ShapeMismatch):
        pretrain(model, (x[:, :2], y), (x, y), TrainConfig(epochs=1))
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(NonFiniteLoss, match="epoch"):
        pretrain(model, (x * 1e3, y), (x, y), TrainConfig(epochs=5, learning_rate=1e6))


def test_checkpoint_round_trip_and_features(tmp_path):
    x, y = separable_data(6, 32)
    model = build_model(ModelSpec.default("VGGF_TOY", "RGB"), seed=0, dtype=np.float32)
    ck = pretrain(model, (x, y), (x[:16], y[:16]), TrainConfig(epochs=2))
    ck.extra = {"note": "x"}
    ck.save(tmp_path / "c.bin")
    back = Checkpoint.load(tmp_path / "c.bin")
    assert back.epoch == ck.epoch and back.val_accuracy == ck.val_accuracy and back.extra == ck.extra
    assert (tmp_path / "c.bin").read_bytes()[:8] == b"SWCKPT01"
    assert accuracy(back.model(np.float32), x[:16], y[:16]) == ck.val_accuracy
    f1 = extract_features(back, x[0])
    f2 = extract_features(back, x[0])
    assert f1.shape == (64,) and np.array_equal(f1, f2)
    assert np.isfinite(extract_features(back, np.zeros((3, 64, 64)))).all()
    with pytest.raises(ShapeMismatch):
        extract_features(back, np.zeros((9, 64, 64)))
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValidationError):
        Checkpoint.load(tmp_path / "bad.bin")
