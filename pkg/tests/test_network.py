import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import check_layer, check_network
from tefs.network import (
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    ReLU,
    build_architecture,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)
from tefs.network.checkpoint import checkpoint_bytes, model_from_bytes
from tefs.network.models import FusedReluBNPool, Sequential

GOLDEN = Path(__file__).parent / "data" / "a1_seed0_zero_segment.json"
F64 = np.float64


# -- naive references ----------------------------------------------------------


def naive_conv(x, w, b, stride=(1, 1)):
    """Valid cross-correlation on NCHW input, one output position at a time."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    y = np.empty((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
            y[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return y


def naive_pool(x, k=2):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // k, w // k))
    for i in range(h // k):
        for j in range(w // k):
            y[:, :, i, j] = x[:, :, i * k:(i + 1) * k, j * k:(j + 1) * k].max(axis=(2, 3))
    return y


def naive_forward(model, inputs):
    """Eval-mode forward written layer by layer: Conv, ReLU, BN, MaxPool per block."""
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    p = {k: v.astype(np.float64) for k, v in {**model.params(), **model.buffers()}.items()}
    feats = []
    for bi, x in enumerate(inputs):
        a = np.asarray(x, np.float64)[:, None]
        block = 1
        while f"branch{bi}.conv{block}.weight" in p:
            pre = f"branch{bi}."
            a = naive_conv(a, p[f"{pre}conv{block}.weight"], p[f"{pre}conv{block}.bias"])
            a = np.maximum(a, 0.0)
            bn = f"{pre}bn{block}."
            scale = p[bn + "gamma"] / np.sqrt(p[bn + "running_var"] + 1e-5)
            a = (a - p[bn + "running_mean"][:, None, None]) * scale[:, None, None] + p[bn + "beta"][:, None, None]
            a = naive_pool(a)
            block += 1
        # the engine flattens features in (height, width, channel) order
        feats.append(a.transpose(0, 2, 3, 1).reshape(a.shape[0], -1))
    z = np.concatenate(feats, axis=1)
    layer = 1
    while f"head.fc{layer}.weight" in p:
        if layer > 1:
            z = np.maximum(z, 0.0)
        z = z @ p[f"head.fc{layer}.weight"].T + p[f"head.fc{layer}.bias"]
        layer += 1
    z = z - z.max(axis=1, keepdims=True)
    return np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)


def _nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


# -- conv ----------------------------------------------------------------------


def test_first_block_shapes():
    conv = Conv2D("c", 1, 64, (2, 2))
    assert conv.output_shape((32, 50, 1)) == (31, 49, 64)
    y = conv.forward(np.zeros((2, 32, 50, 1), np.float32))
    assert y.shape == (2, 31, 49, 64)
    pool = MaxPool2D("p")
    assert pool.output_shape((31, 49, 64)) == (15, 24, 64)


def test_branch_shape_chain():
    model = build_architecture("A1")
    shape = (32, 50, 1)
    seen = []
    for layer in model.branches[0].layers:
        shape = layer.output_shape(shape)
        if isinstance(layer, (Conv2D, MaxPool2D)):
            seen.append(shape)
    assert seen == [(31, 49, 64), (15, 24, 64), (13, 22, 64), (6, 11, 64)]
    assert shape == (4224,)


def test_identity_1x1_conv_mixes_channels():
    conv = Conv2D("c", 3, 3, (1, 1), dtype=F64)
    conv.params["weight"][...] = np.eye(3)[:, :, None, None]
    conv.params["bias"][...] = 0
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 3))
    np.testing.assert_allclose(conv.forward(x), x, atol=1e-15)


def test_zero_conv():
    conv = Conv2D("c", 2, 4, (2, 3), dtype=F64)
    conv.params["weight"][...] = 0
    conv.params["bias"][...] = 0
    assert not conv.forward(np.random.default_rng(0).standard_normal((2, 5, 6, 2))).any()


def test_kernel_larger_than_input():
    with pytest.raises(ValueError):
        Conv2D("c", 1, 2, (3, 3)).output_shape((2, 10, 1))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), c_in=st.integers(1, 3), c_out=st.integers(1, 4),
       kh=st.integers(1, 3), kw=st.integers(1, 3), sh=st.integers(1, 2), sw=st.integers(1, 2),
       seed=st.integers(0, 1000))
def test_conv_matches_naive(h, w, c_in, c_out, kh, kw, sh, sw, seed):
    conv = Conv2D("c", c_in, c_out, (kh, kw), (sh, sw), rng=np.random.default_rng(seed), dtype=F64)
    x = np.random.default_rng(seed + 1).standard_normal((2, c_in, h, w))
    ref = naive_conv(x, conv.params["weight"], conv.params["bias"], (sh, sw))
    np.testing.assert_allclose(conv.forward(_nhwc(x)), _nhwc(ref), atol=1e-12)


# -- pooling ---------------------------------------------------------------------


def test_pool_constant():
    np.testing.assert_array_equal(MaxPool2D("p").forward(np.full((1, 5, 7, 2), 3.0)), 3.0)


def test_pool_ramp_picks_bottom_right():
    x = np.arange(6 * 8, dtype=float).reshape(1, 6, 8, 1)
    y = MaxPool2D("p").forward(x)
    assert y[0, 0, 0, 0] == x[0, 1, 1, 0]
    assert y.shape == (1, 3, 4, 1)


def test_pool_drops_trailing_row_and_column():
    x = np.zeros((1, 5, 5, 1))
    x[0, 4, :, 0] = 100.0
    x[0, :, 4, 0] = 100.0
    assert MaxPool2D("p").forward(x).max() == 0.0


@pytest.mark.parametrize("kernel", [(2, 2), (3, 3), (2, 3)])
def test_pool_matches_naive(kernel):
    x = np.random.default_rng(0).standard_normal((3, 2, 11, 9))
    y = MaxPool2D("p", kernel).forward(_nhwc(x))
    kh, kw = kernel
    n, c, h, w = x.shape
    ref = np.empty((n, c, h // kh, w // kw))
    for i in range(h // kh):
        for j in range(w // kw):
            ref[:, :, i, j] = x[:, :, i * kh:(i + 1) * kh, j * kw:(j + 1) * kw].max(axis=(2, 3))
    np.testing.assert_array_equal(y, _nhwc(ref))


def test_pool_too_small():
    with pytest.raises(ValueError):
        MaxPool2D("p").output_shape((1, 4, 3))


def test_pool_tie_routes_gradient_once():
    pool = MaxPool2D("p")
    pool.forward(np.ones((1, 2, 2, 1)), train=True)
    dx = pool.backward(np.ones((1, 1, 1, 1)))
    assert dx.sum() == 1.0
    assert dx[0, 0, 0, 0] == 1.0


# -- batch norm ------------------------------------------------------------------


def test_bn_train_statistics():
    bn = BatchNorm2D("bn", 4, dtype=F64)
    x = np.random.default_rng(0).normal(3.0, 2.0, (8, 5, 6, 4))
    y = bn.forward(x, train=True).reshape(-1, 4)
    assert np.all(np.abs(y.mean(axis=0)) < 1e-5)
    assert np.all(np.abs(y.var(axis=0) - 1) < 1e-4)


def test_bn_eval_equals_train_at_batch_statistics():
    bn = BatchNorm2D("bn", 3, dtype=F64)
    x = np.random.default_rng(1).standard_normal((6, 4, 4, 3)) * 2 + 1
    y_train = bn.forward(x.copy(), train=True)
    flat = x.reshape(-1, 3)
    bn.buffers["running_mean"][...] = flat.mean(axis=0)
    bn.buffers["running_var"][...] = flat.var(axis=0)
    np.testing.assert_allclose(bn.forward(x), y_train, atol=1e-6)


def test_bn_beta_shift():
    bn = BatchNorm2D("bn", 2, dtype=F64)
    bn.params["beta"][...] = 5.0
    y = bn.forward(np.random.default_rng(2).standard_normal((4, 3, 3, 2)), train=True)
    np.testing.assert_allclose(y.reshape(-1, 2).mean(axis=0), 5.0, atol=1e-12)


def test_bn_running_update():
    bn = BatchNorm2D("bn", 1, dtype=F64)
    x = np.random.default_rng(3).standard_normal((5, 2, 2, 1))
    bn.forward(x, train=True)
    m = x.size
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * x.mean())
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var() * m / (m - 1))


def test_bn_rejects_single_example_batch():
    with pytest.raises(ValueError):
        BatchNorm2D("bn", 2).forward(np.zeros((1, 3, 3, 2)), train=True)


# -- dropout, dense, softmax -------------------------------------------------------


def test_dropout_eval_identity_and_train_scaling():
    d = Dropout("d", 0.5)
    x = np.ones((1000, 10))
    assert d.forward(x) is x
    y = d.forward(x, train=True, rng=np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        d.forward(x, train=True)


def test_dense_matches_naive():
    layer = Dense("fc", 5, 3, rng=np.random.default_rng(0), dtype=F64)
    x = np.random.default_rng(1).standard_normal((4, 5))
    ref = np.array([[sum(layer.params["weight"][o, i] * x[n, i] for i in range(5)) + layer.params["bias"][o]
                     for o in range(3)] for n in range(4)])
    np.testing.assert_allclose(layer.forward(x), ref, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.integers(1, 5))
def test_softmax_rows_sum_to_one(row, n):
    p = softmax(np.tile(np.array(row), (n, 1)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((p >= 0) & (p <= 1))


def test_cross_entropy_limits():
    loss, _, d = softmax_cross_entropy(np.array([[40.0, -40.0], [-40.0, 40.0]]), np.array([0, 1]))
    assert loss < 1e-6
    assert np.abs(d).max() < 1e-6
    loss, probs, _ = softmax_cross_entropy(np.zeros((3, 2)), np.array([0, 1, 1]))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(probs, 0.5)


@pytest.mark.parametrize("labels", [[0, 2], [-1, 0], [0]])
def test_cross_entropy_label_validation(labels):
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 2)), np.array(labels))


# -- per-layer finite differences ---------------------------------------------------


def _x(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


@pytest.mark.parametrize("layer,shape", [
    (Conv2D("c", 1, 4, (2, 2), rng=np.random.default_rng(0), dtype=F64), (3, 6, 7, 1)),
    (Conv2D("c", 3, 4, (3, 3), rng=np.random.default_rng(1), dtype=F64), (2, 7, 8, 3)),
    (Conv2D("c", 2, 3, (2, 3), (2, 1), rng=np.random.default_rng(2), dtype=F64), (2, 7, 8, 2)),
    (BatchNorm2D("bn", 3, dtype=F64), (4, 3, 5, 3)),
    (MaxPool2D("p"), (2, 5, 7, 3)),
    (MaxPool2D("p", (3, 2)), (2, 7, 5, 2)),
    (Dropout("d", 0.5), (4, 3, 3, 2)),
    (Flatten(), (3, 2, 4, 5)),
    (Dense("fc", 6, 4, rng=np.random.default_rng(3), dtype=F64), (5, 6)),
], ids=["conv2x2", "conv3x3", "conv-strided", "batchnorm", "maxpool", "maxpool3x2", "dropout", "flatten", "dense"])
def test_layer_gradients(layer, shape):
    if isinstance(layer, BatchNorm2D):
        layer.params["gamma"][...] = np.random.default_rng(4).uniform(0.5, 1.5, 3)
        layer.params["beta"][...] = np.random.default_rng(5).standard_normal(3)
    x = _x(shape)
    if isinstance(layer, MaxPool2D):
        # distinct values on a 0.01 grid keep window maxima more than delta apart
        x = np.random.default_rng(6).permutation(x.size).reshape(shape) * 0.01
    errors = check_layer(layer, x)
    assert max(errors.values()) <= 1e-3, errors


def test_relu_gradient():
    x = _x((3, 4, 4, 2))
    x += np.where(x >= 0, 0.05, -0.05)  # keep finite differences away from the kink
    errors = check_layer(ReLU("r"), x)
    assert errors["input"] <= 1e-3


def test_fused_block_gradients():
    relu, bn, pool = ReLU("r"), BatchNorm2D("bn", 3, dtype=F64), MaxPool2D("p")
    bn.params["gamma"][...] = [0.7, 1.3, 1.0]
    bn.params["beta"][...] = [0.2, -0.4, 0.0]
    x = _x((4, 7, 9, 3), seed=7)
    x += np.where(x >= 0, 0.05, -0.05)
    errors = check_layer(FusedReluBNPool(relu, bn, pool), x)
    assert max(errors.values()) <= 1e-3, errors


def test_softmax_cross_entropy_gradient():
    logits = _x((5, 2))
    labels = np.array([0, 1, 1, 0, 1])
    _, _, d = softmax_cross_entropy(logits, labels)
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += 1e-3
        down[idx] -= 1e-3
        num[idx] = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(down, labels)[0]) / 2e-3
    np.testing.assert_allclose(d, num, rtol=1e-3, atol=1e-9)


def test_fused_path_matches_layers():
    fused = build_architecture("TEFS", 10, 12, seed=3, dtype=F64)
    plain = build_architecture("TEFS", 10, 12, seed=3, dtype=F64)
    for b in plain.branches:
        b.fused = False
    x = [_x((6, 10, 12), s) for s in (1, 2)]
    y = np.array([0, 1, 1, 0, 1, 0])
    l1, g1, _ = fused.loss_and_grads(x, y, np.random.default_rng(9))
    l2, g2, _ = plain.loss_and_grads(x, y, np.random.default_rng(9))
    assert l1 == pytest.approx(l2, abs=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-12)
    for k, v in fused.buffers().items():
        np.testing.assert_allclose(v, plain.buffers()[k], atol=1e-12)
    np.testing.assert_allclose(fused.predict(x), plain.predict(x), atol=1e-12)


@pytest.mark.parametrize("tag", ["A1", "TEFS"])
def test_network_gradients_sampled(tag):
    model = build_architecture(tag, 10, 10, seed=1, dtype=F64)
    n = 2 if tag == "TEFS" else 1
    x = [_x((6, 10, 10), s) for s in range(n)]
    errors = check_network(model, x, np.array([0, 1, 0, 1, 1, 0]), limit=60)
    assert max(errors.values()) <= 1e-3, errors


# -- architectures -------------------------------------------------------------------


def _analytic_count(tag):
    def block(c_in, k):
        return (k * k * c_in * 64 + 64) + 2 * 64

    branch2 = block(1, 2) + block(64, 3)
    if tag == "A1":
        return branch2 + 4224 * 2 + 2
    if tag == "A2":
        return branch2 + block(64, 4) + 256 * 4096 + 4096 + 4096 * 2 + 2
    return 2 * branch2 + 8448 * 128 + 128 + 128 * 2 + 2


def test_parameter_counts():
    assert build_architecture("A1").n_trainable == 45_954
    assert _analytic_count("A1") == 45_954
    assert build_architecture("A2").n_trainable == _analytic_count("A2") == 1_164_098
    assert build_architecture("TEFS").n_trainable == _analytic_count("TEFS") == 1_156_738


def test_flatten_sizes():
    assert build_architecture("A1").flatten_sizes == [4224]
    assert build_architecture("TEFS").flatten_sizes == [4224, 4224]
    assert build_architecture("A2").flatten_sizes == [256]


@pytest.mark.parametrize("tag,shape", [("A1", (8, 10)), ("TEFS", (8, 10)), ("A2", (10, 10)), ("A1", (3, 50))])
def test_unsupported_sizes(tag, shape):
    with pytest.raises(ValueError):
        build_architecture(tag, *shape)


def test_unknown_tag():
    with pytest.raises(ValueError):
        build_architecture("A3")


def test_layer_order_is_conv_relu_bn_pool():
    kinds = [type(layer).__name__ for layer in build_architecture("A1").branches[0].layers]
    assert kinds == ["Conv2D", "ReLU", "BatchNorm2D", "MaxPool2D"] * 2 + ["Dropout", "Flatten"]


def test_init_is_seeded_and_bounded():
    a, b, c = build_architecture("A1", seed=5), build_architecture("A1", seed=5), build_architecture("A1", seed=6)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])
    assert not np.array_equal(a.params()["branch0.conv2.weight"], c.params()["branch0.conv2.weight"])
    w = a.params()["branch0.conv2.weight"]
    assert np.abs(w).max() <= np.sqrt(6 / (64 * 9))


# -- forward --------------------------------------------------------------------------


def test_probabilities_and_duplicates():
    model = build_architecture("TEFS", seed=2)
    x = _x((3, 32, 50)).astype(np.float32)
    x = np.concatenate([x, x[:1]])
    p = model.forward([x, -x])
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(p[0], p[3])
    np.testing.assert_array_equal(model.forward([x, -x]), p)


def test_input_validation():
    model = build_architecture("TEFS")
    with pytest.raises(ValueError):
        model.forward([np.zeros((2, 32, 50))])
    with pytest.raises(ValueError):
        model.forward([np.zeros((2, 32, 50)), np.zeros((3, 32, 50))])
    with pytest.raises(ValueError):
        build_architecture("A1").forward(np.zeros((2, 32, 49)))


def test_matches_naive_reference_with_trained_statistics():
    # non-trivial batch-norm parameters make the ReLU-before-BN order observable
    model = build_architecture("TEFS", 12, 14, seed=4, dtype=F64)
    rng = np.random.default_rng(0)
    for name, v in {**model.params(), **model.buffers()}.items():
        if ".bn" in name:
            v[...] = rng.uniform(0.2, 1.5, v.shape) if name.endswith(("gamma", "var")) else rng.normal(0, 0.5, v.shape)
    x = [rng.standard_normal((3, 12, 14)) for _ in range(2)]
    np.testing.assert_allclose(model.forward(x), naive_forward(model, x), atol=1e-12)


def test_golden_zero_segment():
    golden = json.loads(GOLDEN.read_text())
    model = build_architecture("A1", seed=golden["seed"])
    zero = np.zeros((1, 32, 50), np.float32)
    np.testing.assert_allclose(model.forward(zero)[0], golden["probabilities"], atol=1e-6)
    np.testing.assert_allclose(naive_forward(model, zero)[0], golden["probabilities"], atol=1e-6)


def test_ablation_fine_structure_branch_silenced():
    model = build_architecture("TEFS", seed=1, dtype=F64)
    rng = np.random.default_rng(0)
    env = rng.standard_normal((4, 32, 50))
    zero = np.zeros_like(env)
    # with a silent fine-structure input its branch contributes one constant feature vector
    const = model.branches[1].forward(zero[:1, ..., None])
    feats = np.concatenate([model.branches[0].forward(env[..., None]), np.repeat(const, 4, axis=0)], axis=1)
    expected = softmax(model.head.forward(feats))
    np.testing.assert_allclose(model.forward([env, zero]), expected, atol=1e-12)


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = build_architecture("TEFS", seed=11)
    model.buffers()["branch1.bn2.running_mean"][...] = 0.25
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.tag == "TEFS" and back.seed == 11
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)
    x = [_x((2, 32, 50), s).astype(np.float32) for s in (0, 1)]
    np.testing.assert_array_equal(back.forward(x), model.forward(x))


def test_checkpoint_layout():
    model = build_architecture("A1", seed=3)
    data = checkpoint_bytes(model)
    assert data[:8] == struct.pack("<4sHH", b"TFCK", 1, 2)
    assert data[8:10] == b"A1"
    state = model.state_dict()
    assert struct.unpack_from("<qIII", data, 10) == (3, 32, 50, len(state))
    pos = 10 + 20
    first = next(iter(state))
    (name_len,) = struct.unpack_from("<H", data, pos)
    assert data[pos + 2:pos + 2 + name_len].decode() == first
    pos += 2 + name_len
    ndim = data[pos]
    shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
    assert shape == state[first].shape
    start = pos + 1 + 4 * ndim
    np.testing.assert_array_equal(
        np.frombuffer(data, "<f4", count=state[first].size, offset=start), state[first].ravel()
    )


@pytest.mark.parametrize("mangle", [lambda d: b"NOPE" + d[4:], lambda d: d[:-3], lambda d: d + b"\0"])
def test_checkpoint_rejects_damage(mangle):
    with pytest.raises(ValueError):
        model_from_bytes(mangle(checkpoint_bytes(build_architecture("A1"))))


def test_sequential_without_fusion_runs_all_layers():
    seq = Sequential("s", [ReLU("r"), BatchNorm2D("bn", 2), MaxPool2D("p")], fused=False)
    assert seq.forward(np.ones((2, 4, 4, 2), np.float32), train=True).shape == (2, 2, 2, 2)
