"""Primitive operations against independent oracles and edge cases."""

import numpy as np
import pytest
from scipy.special import erf

from dualpath import ops
from dualpath.tensor import ConfigError, ShapeError, Tensor

from gradcheck import check_gradients, scalarize


def rand(rng, *shape, grad=False):
    return Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=grad)


# -- layer norm -------------------------------------------------------------

def test_layer_norm_zero_variance_returns_beta():
    x = Tensor([[5.0, 5.0, 5.0]])
    gamma = Tensor(np.zeros(3, np.float32))
    beta = Tensor([1.0, 2.0, 3.0])
    out = ops.layer_norm(x, gamma, beta, eps=1e-5)
    np.testing.assert_allclose(out.data, [[1.0, 2.0, 3.0]], atol=1e-6)


def test_layer_norm_direct_mean_variance_oracle():
    x = Tensor([[1.0, 2.0, 3.0]])
    gamma = Tensor(np.ones(3, np.float32))
    beta = Tensor(np.zeros(3, np.float32))
    out = ops.layer_norm(x, gamma, beta, eps=1e-12)
    np.testing.assert_allclose(
        out.data, [[-1.2247449, 0.0, 1.2247449]], atol=1e-4
    )


def test_layer_norm_gamma_zero_annihilates_scale():
    rng = np.random.default_rng(3)
    x = rand(rng, 4, 6)
    gamma = Tensor(np.zeros(6, np.float32))
    beta = Tensor(rng.standard_normal(6).astype(np.float32))
    out = ops.layer_norm(x, gamma, beta)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (4, 6)), atol=1e-6)


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(4)
    x = rand(rng, 8, 16)
    out = ops.layer_norm(
        x, Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))
    ).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


def test_layer_norm_width_mismatch():
    with pytest.raises(ShapeError):
        ops.layer_norm(
            Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3))
        )


# -- gelu ---------------------------------------------------------------------

def test_gelu_fixed_points():
    x = Tensor([0.0, 10.0, 1.0])
    out = ops.gelu(x).data
    assert out[0] == 0.0
    np.testing.assert_allclose(out[1], 10.0, atol=1e-4)
    np.testing.assert_allclose(out[2], 0.8413447, atol=1e-5)


def test_gelu_matches_erf_form_elementwise():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal(64).astype(np.float32)
    expect = xv * 0.5 * (1.0 + erf(xv / np.sqrt(2.0)))
    np.testing.assert_allclose(ops.gelu(Tensor(xv)).data, expect, rtol=1e-6)


# -- softmax / cross entropy --------------------------------------------------

def test_softmax_rows_are_probability_vectors():
    rng = np.random.default_rng(6)
    x = rand(rng, 5, 9)
    y = ops.softmax(x).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(5), atol=1e-5)


def test_cross_entropy_uniform_logits():
    loss = ops.cross_entropy(Tensor(np.zeros(4, np.float32)), 0)
    np.testing.assert_allclose(loss.item(), np.log(4.0), rtol=1e-6)


def test_cross_entropy_log_sum_exp_oracle():
    loss = ops.cross_entropy(Tensor([10.0, 0.0, 0.0]), 0)
    np.testing.assert_allclose(loss.item(), 9.08e-5, rtol=2e-2)


def test_cross_entropy_large_logit_limit():
    loss = ops.cross_entropy(Tensor([60.0, 0.0, 0.0]), 0)
    assert loss.item() < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ConfigError, match="label out of range"):
        ops.cross_entropy(Tensor([0.0, 0.0]), 2)


def test_cross_entropy_batched_matches_mean_of_rows():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((3, 5)).astype(np.float32)
    labels = [1, 0, 4]
    per_row = [ops.cross_entropy(Tensor(row), lab).item()
               for row, lab in zip(logits, labels)]
    batched = ops.cross_entropy(Tensor(logits), labels).item()
    np.testing.assert_allclose(batched, np.mean(per_row), rtol=1e-6)


# -- attention ----------------------------------------------------------------

def _mha_weights(rng, d):
    ws = {}
    for name in ("q", "k", "v", "o"):
        ws[f"w_{name}"] = rand(rng, d, d)
        ws[f"b_{name}"] = rand(rng, d)
    return ws


def test_attention_single_token_is_projected_value():
    rng = np.random.default_rng(8)
    d = 4
    ws = _mha_weights(rng, d)
    x = rand(rng, 1, d)
    out, attn = ops.multi_head_attention(x, heads=2, **ws)
    np.testing.assert_allclose(attn.data, np.ones((2, 1, 1)), atol=1e-6)
    v = x.data @ ws["w_v"].data + ws["b_v"].data
    expect = v @ ws["w_o"].data + ws["b_o"].data
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-6)


def test_attention_identical_keys_split_evenly():
    rng = np.random.default_rng(9)
    d = 4
    ws = _mha_weights(rng, d)
    token = rng.standard_normal(d).astype(np.float32)
    x = Tensor(np.stack([token, token]))
    _, attn = ops.multi_head_attention(x, heads=1, **ws)
    np.testing.assert_allclose(attn.data, np.full((1, 2, 2), 0.5), atol=1e-5)


def test_attention_matches_explicit_softmax_oracle():
    rng = np.random.default_rng(10)
    n, d = 3, 4
    ws = _mha_weights(rng, d)
    x = rand(rng, n, d)
    out, _ = ops.multi_head_attention(x, heads=1, **ws)

    q = x.data @ ws["w_q"].data + ws["b_q"].data
    k = x.data @ ws["w_k"].data + ws["b_k"].data
    v = x.data @ ws["w_v"].data + ws["b_v"].data
    scores = (q @ k.T) / np.sqrt(d)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    a = e / e.sum(axis=-1, keepdims=True)
    expect = (a @ v) @ ws["w_o"].data + ws["b_o"].data
    np.testing.assert_allclose(out.data, expect, rtol=1e-5, atol=1e-6)


def test_attention_head_divisibility():
    rng = np.random.default_rng(11)
    ws = _mha_weights(rng, 6)
    with pytest.raises(ConfigError, match="divisible"):
        ops.multi_head_attention(rand(rng, 2, 6), heads=4, **ws)


def test_attention_batched_matches_per_sequence():
    rng = np.random.default_rng(12)
    d = 8
    ws = _mha_weights(rng, d)
    xs = [rand(rng, 5, d) for _ in range(3)]
    batched = Tensor(np.stack([x.data for x in xs]))
    out_b, _ = ops.multi_head_attention(batched, heads=2, **ws)
    for i, x in enumerate(xs):
        out, _ = ops.multi_head_attention(x, heads=2, **ws)
        np.testing.assert_allclose(out_b.data[i], out.data, rtol=1e-5, atol=1e-6)


# -- convolutions ---------------------------------------------------------------

def test_conv2d_pointwise_equals_channel_matmul():
    rng = np.random.default_rng(13)
    x = rand(rng, 5, 6, 3)
    k = rand(rng, 1, 1, 3, 4)
    out = ops.conv2d(x, k)
    expect = x.data.reshape(-1, 3) @ k.data[0, 0]
    np.testing.assert_allclose(out.data.reshape(-1, 4), expect, rtol=1e-5, atol=1e-6)


def test_conv2d_identity_depthwise_kernel():
    rng = np.random.default_rng(14)
    x = rand(rng, 4, 4, 2)
    k = np.zeros((3, 3, 2), np.float32)
    k[1, 1, :] = 1.0
    out = ops.conv2d(x, Tensor(k))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 5))))


def test_conv2d_even_kernel_rejected():
    with pytest.raises(ShapeError, match="odd"):
        ops.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((2, 2, 2))))


def test_dwconv3d_delta_kernel_is_identity():
    rng = np.random.default_rng(15)
    x = rand(rng, 3, 4, 4, 2)
    k = np.zeros((3, 3, 3, 2), np.float32)
    k[1, 1, 1, :] = 1.0
    out = ops.depthwise_conv3d(x, Tensor(k))
    np.testing.assert_array_equal(out.data, x.data)


def test_dwconv3d_window_sum_oracle():
    # All-ones temporal 3x1x1 kernel over constant-1 input: interior = 3,
    # boundary frames see one zero-padded tap.
    x = Tensor(np.ones((4, 2, 2, 1), np.float32))
    k = Tensor(np.ones((3, 1, 1, 1), np.float32))
    out = ops.depthwise_conv3d(x, k).data
    np.testing.assert_allclose(out[1:-1], 3.0)
    np.testing.assert_allclose(out[0], 2.0)
    np.testing.assert_allclose(out[-1], 2.0)


def test_dwconv3d_single_frame_uses_center_tap_only():
    rng = np.random.default_rng(16)
    x = rand(rng, 1, 3, 3, 2)
    k = rand(rng, 3, 1, 1, 2)
    out = ops.depthwise_conv3d(x, k)
    np.testing.assert_allclose(out.data, x.data * k.data[1, 0, 0], rtol=1e-6)


def test_dwconv3d_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        ops.depthwise_conv3d(
            Tensor(np.zeros((2, 3, 3, 4))), Tensor(np.zeros((3, 3, 3, 2)))
        )


# -- composite chain gradient (spec's chain example) ---------------------------

def test_chain_gradient_against_finite_differences():
    rng = np.random.default_rng(17)
    x = rand(rng, 3, 4, grad=True)
    w = rand(rng, 4, 4, grad=True)
    gamma = Tensor(np.ones(4, np.float32), requires_grad=True)
    beta = Tensor(np.zeros(4, np.float32), requires_grad=True)
    srng = np.random.default_rng(18)
    weights = Tensor(srng.standard_normal((3, 4)).astype(np.float32))

    def build():
        out = ops.layer_norm(ops.gelu(x @ w), gamma, beta)
        return (out * weights).sum()

    check_gradients(build, [x, w, gamma, beta])
