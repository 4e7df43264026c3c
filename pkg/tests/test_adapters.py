"""Baseline adaptation methods: adapter algebra, freeze partition, builders."""

import numpy as np
import pytest

from dualpath import ops
from dualpath.adapters import (
    AdaptationSpec,
    Adapter,
    TemporalClassifier,
    bottleneck_adapter,
    build_adapted_model,
)
from dualpath.tensor import ConfigError, ShapeError, Tensor
from dualpath.vit import Backbone, BackboneSpec

BSPEC = BackboneSpec(depth=2, width=16, heads=2, patch_size=8,
                     image_size=(32, 32))


def make_backbone(seed=0):
    return Backbone.init_random(BSPEC, seed=seed)


def rand_clip_batch(rng, b=2, t=4, size=32):
    return rng.random((b, t, size, size, 3)).astype(np.float32)


def spec_for(method, **kw):
    base = dict(method=method, n_classes=4, bottleneck=8, frames=4,
                spatial_frames=2, grid_w=2, grid_h=2)
    base.update(kw)
    return AdaptationSpec(**base)


# -- bottleneck adapter -------------------------------------------------------

def test_adapter_zero_init_outputs_zero():
    rng = np.random.default_rng(0)
    a = Adapter(rng, d=16, b=4)
    x = Tensor(rng.standard_normal((5, 16)).astype(np.float32))
    np.testing.assert_array_equal(bottleneck_adapter(x, a).data,
                                  np.zeros((5, 16), np.float32))


def test_adapter_hand_set_weights_match_two_matmul_oracle():
    rng = np.random.default_rng(1)
    a = Adapter(rng, d=4, b=2, scale=0.5)
    a.w_down.data[:] = rng.standard_normal((4, 2))
    a.b_down.data[:] = rng.standard_normal(2)
    a.w_up.data[:] = rng.standard_normal((2, 4))
    a.b_up.data[:] = rng.standard_normal(4)
    x = rng.standard_normal((3, 4)).astype(np.float32)

    hidden = x @ a.w_down.data + a.b_down.data
    from scipy.special import erf
    hidden = hidden * 0.5 * (1 + erf(hidden / np.sqrt(2)))
    expect = 0.5 * (hidden @ a.w_up.data + a.b_up.data)
    got = bottleneck_adapter(Tensor(x), a)
    np.testing.assert_allclose(got.data, expect, rtol=1e-5, atol=1e-6)


def test_adapter_scale_zero_annihilates():
    rng = np.random.default_rng(2)
    a = Adapter(rng, d=8, b=4, scale=0.0)
    a.w_up.data[:] = rng.standard_normal((4, 8))
    x = Tensor(rng.standard_normal((2, 8)).astype(np.float32))
    np.testing.assert_array_equal(bottleneck_adapter(x, a).data,
                                  np.zeros((2, 8), np.float32))


def test_adapter_width_mismatch():
    a = Adapter(np.random.default_rng(3), d=8, b=4)
    with pytest.raises(ShapeError):
        bottleneck_adapter(Tensor(np.zeros((2, 9))), a)


def test_adapter_init_distributions():
    rng = np.random.default_rng(4)
    a = Adapter(rng, d=256, b=64)
    assert np.all(a.w_up.data == 0.0)
    assert np.all(a.b_up.data == 0.0)
    std = a.w_down.data.std()
    assert 0.7 * np.sqrt(2 / 256) < std < 1.3 * np.sqrt(2 / 256)


def test_serial_adapter_is_identity_at_init():
    rng = np.random.default_rng(5)
    a = Adapter(rng, d=8, b=4, placement="serial_mha")
    x = Tensor(rng.standard_normal((3, 8)).astype(np.float32))
    np.testing.assert_array_equal(a(x).data, x.data)


# -- VPT ----------------------------------------------------------------------

def test_vpt_zero_prompts_equals_frozen_pipeline():
    bb1, bb2 = make_backbone(7), make_backbone(7)
    frames = rand_clip_batch(np.random.default_rng(8))
    vpt = build_adapted_model(bb1, spec_for("vpt", prompt_tokens=0), seed=9)
    frz = build_adapted_model(bb2, spec_for("frozen"), seed=9)
    np.testing.assert_allclose(vpt.forward(frames).data,
                               frz.forward(frames).data, atol=1e-6)


def test_vpt_block_sees_k_plus_n_tokens():
    bb = make_backbone(10)
    vpt = build_adapted_model(bb, spec_for("vpt", prompt_tokens=3), seed=11)
    rng = np.random.default_rng(12)
    frames = rng.random((2, 32, 32, 3)).astype(np.float32)
    h = bb.tokenize(frames)
    n = h.shape[1]
    from dualpath.tensor import broadcast_to, concat
    e = broadcast_to(vpt.prompts[0].reshape((1, 3, -1)), (2, 3, BSPEC.width))
    extended = concat([e, h], axis=1)
    assert extended.shape == (2, 3 + n, BSPEC.width)
    out = bb.block_forward(extended, 0)
    assert out.shape == (2, 3 + n, BSPEC.width)
    assert out[:, 3:, :].shape == (2, n, BSPEC.width)


def test_vpt_prompt_gradient_flows_backbone_frozen():
    bb = make_backbone(13)
    vpt = build_adapted_model(bb, spec_for("vpt", prompt_tokens=2), seed=14)
    frames = rand_clip_batch(np.random.default_rng(15))
    loss = ops.cross_entropy(vpt.forward(frames), [0, 1])
    vpt.zero_grad()
    loss.backward()
    assert all(p.grad is not None for p in vpt.prompts)
    assert all(t.grad is None for t in bb.params.values())


# -- Pro-tuning ----------------------------------------------------------------

def test_protuning_identity_at_init():
    bb = make_backbone(16)
    pro = build_adapted_model(bb, spec_for("protuning"), seed=17)
    rng = np.random.default_rng(18)
    h = Tensor(rng.standard_normal((2, BSPEC.seq_len, BSPEC.width))
               .astype(np.float32))
    out = pro.prompt_block(h, 0)
    np.testing.assert_allclose(out.data, h.data, atol=1e-6)


def test_protuning_pointwise_only_matches_per_token_linear_map():
    bb = make_backbone(19)
    pro = build_adapted_model(bb, spec_for("protuning"), seed=20)
    rng = np.random.default_rng(21)
    conv1_w, conv1_b, dw_w, dw_b, conv2_w, conv2_b = pro.stacks[0]
    conv1_w.data[:] = rng.standard_normal(conv1_w.shape)
    conv2_w.data[:] = rng.standard_normal(conv2_w.shape)
    dw_w.data[:] = 0.0
    dw_w.data[2, 2, :] = 1.0  # delta: depthwise becomes identity
    h = Tensor(rng.standard_normal((1, BSPEC.seq_len, BSPEC.width))
               .astype(np.float32))
    out = pro.prompt_block(h, 0)

    patches = h.data[0, 1:, :]
    lin = patches @ conv1_w.data[0, 0] + conv1_b.data
    lin = lin @ conv2_w.data[0, 0] + conv2_b.data
    from scipy.special import erf
    v = lin * 0.5 * (1 + erf(lin / np.sqrt(2)))
    np.testing.assert_allclose(out.data[0, 1:, :], patches + v,
                               rtol=1e-4, atol=1e-5)
    np.testing.assert_array_equal(out.data[0, 0, :], h.data[0, 0, :])


def test_protuning_shape_preserved():
    bb = make_backbone(22)
    pro = build_adapted_model(bb, spec_for("protuning"), seed=23)
    frames = rand_clip_batch(np.random.default_rng(24))
    assert pro.forward(frames).shape == (2, 4)


def test_protuning_rejects_non_square_grid():
    spec = BackboneSpec(depth=1, width=16, heads=2, patch_size=8,
                        image_size=(32, 16))
    bb = Backbone.init_random(spec, seed=25)
    with pytest.raises(ConfigError, match="square"):
        build_adapted_model(bb, spec_for("protuning"), seed=26)


# -- ST-Adapter ----------------------------------------------------------------

def test_st_adapter_zero_up_equals_frozen_block():
    bb1, bb2 = make_backbone(27), make_backbone(27)
    st = build_adapted_model(bb1, spec_for("st_adapter"), seed=28)
    frz = build_adapted_model(bb2, spec_for("frozen"), seed=28)
    frames = rand_clip_batch(np.random.default_rng(29))
    flat, b, t = st._flatten_frames(frames)
    h1 = bb1.tokenize(flat)
    h2 = bb2.tokenize(flat)
    z1 = h1 + bb1.attn(bb1.ln1(h1, 0), 0)
    n1 = bb1.ln2(z1, 0)
    out_st = z1 + bb1.mlp(n1, 0) + st.st_branch(n1, 0, b, t)
    out_fr = bb2.block_forward(h2, 0)
    np.testing.assert_allclose(out_st.data, out_fr.data, atol=1e-6)


def test_st_adapter_delta_kernel_reduces_to_per_frame_bottleneck():
    bb = make_backbone(30)
    st = build_adapted_model(bb, spec_for("st_adapter"), seed=31)
    adapter, kernel = st.adapters[0]
    rng = np.random.default_rng(32)
    adapter.w_up.data[:] = rng.standard_normal(adapter.w_up.shape)
    adapter.b_up.data[:] = rng.standard_normal(adapter.b_up.shape)
    # kernel is already the delta at init
    x = Tensor(rng.standard_normal((2 * 4, BSPEC.seq_len, BSPEC.width))
               .astype(np.float32))
    got = st.st_branch(x, 0, 2, 4)
    expect = bottleneck_adapter(x, adapter)
    np.testing.assert_allclose(got.data, expect.data, atol=1e-6)


def test_st_adapter_single_frame_clip_valid():
    bb = make_backbone(33)
    st = build_adapted_model(bb, spec_for("st_adapter", frames=1), seed=34)
    frames = np.random.default_rng(35).random((2, 1, 32, 32, 3)).astype(np.float32)
    assert st.forward(frames).shape == (2, 4)


# -- temporal transformer classifier ---------------------------------------------

def test_temporal_classifier_single_frame():
    rng = np.random.default_rng(36)
    clf = TemporalClassifier(rng, d=16, t=1, heads=2, n_classes=5)
    x = Tensor(rng.standard_normal((3, 1, 16)).astype(np.float32))
    assert clf(x).shape == (3, 5)


def test_temporal_classifier_zero_block_is_meanpool_linear():
    rng = np.random.default_rng(37)
    clf = TemporalClassifier(rng, d=16, t=4, heads=2, n_classes=3)
    clf.block.params["attn.w_o"].data[:] = 0.0
    clf.block.params["attn.b_o"].data[:] = 0.0
    clf.block.params["mlp.w2"].data[:] = 0.0
    clf.block.params["mlp.b2"].data[:] = 0.0
    x = rng.standard_normal((2, 4, 16)).astype(np.float32)
    got = clf(Tensor(x))
    pooled = (x + clf.p_temp.data).mean(axis=1)
    expect = pooled @ clf.head_w.data + clf.head_b.data
    np.testing.assert_allclose(got.data, expect, rtol=1e-5, atol=1e-6)


def test_temporal_classifier_order_sensitivity():
    rng = np.random.default_rng(38)
    clf = TemporalClassifier(rng, d=16, t=4, heads=2, n_classes=3)
    # Evaluate at generic random weights, not the near-identity init.
    for t in clf.named().values():
        t.data[:] = 0.3 * rng.standard_normal(t.shape)
    x = rng.standard_normal((1, 4, 16)).astype(np.float32)
    a = clf(Tensor(x)).data
    b = clf(Tensor(x[:, ::-1, :].copy())).data
    assert np.abs(a - b).max() > 1e-4


def test_temporal_classifier_frame_count_mismatch():
    rng = np.random.default_rng(39)
    clf = TemporalClassifier(rng, d=16, t=4, heads=2, n_classes=3)
    with pytest.raises(ShapeError):
        clf(Tensor(np.zeros((2, 5, 16), np.float32)))


# -- builder / freeze partition ---------------------------------------------------

def test_frozen_spec_trains_classifier_only():
    bb = make_backbone(40)
    model = build_adapted_model(bb, spec_for("frozen"), seed=41)
    names = set(model.trainable_parameters())
    assert names == set(model.classifier.named())


def test_adaptformer_count_matches_closed_form():
    bb = make_backbone(42)
    spec = spec_for("adaptformer", bottleneck=8)
    model = build_adapted_model(bb, spec, seed=43)
    d, b, L = BSPEC.width, 8, BSPEC.depth
    adapters = L * (d * b + b + b * d + d)
    clf = sum(t.size for t in model.classifier.named().values())
    total = sum(t.size for t in model.trainable_parameters().values())
    assert total == adapters + clf


def test_adaptformer_init_matches_frozen_given_equal_classifier():
    bb1, bb2 = make_backbone(44), make_backbone(44)
    af = build_adapted_model(bb1, spec_for("adaptformer"), seed=45)
    frz = build_adapted_model(bb2, spec_for("frozen"), seed=46)
    for (a, b) in zip(af.classifier.named().values(),
                      frz.classifier.named().values()):
        b.data[:] = a.data
    frames = rand_clip_batch(np.random.default_rng(47))
    np.testing.assert_allclose(af.forward(frames).data,
                               frz.forward(frames).data, atol=1e-6)


def test_unknown_method_rejected():
    with pytest.raises(ConfigError, match="unknown adaptation method"):
        AdaptationSpec(method="lora", n_classes=4)


def test_freeze_partition_disjoint_union():
    bb = make_backbone(48)
    model = build_adapted_model(bb, spec_for("st_adapter"), seed=49)
    trainable = model.trainable_parameters()
    frozen = model.frozen_parameters()
    assert not (set(trainable) & set(frozen))
    assert set(model.named_parameters()) == set(trainable) | set(frozen)
    assert all(t.requires_grad for t in trainable.values())
    assert not any(t.requires_grad for t in frozen.values())


@pytest.mark.parametrize("method", ["adaptformer", "st_adapter", "protuning"])
def test_zero_init_identity_block_outputs(method):
    bb1, bb2 = make_backbone(50), make_backbone(50)
    model = build_adapted_model(bb1, spec_for(method), seed=51)
    rng = np.random.default_rng(52)
    frames = rand_clip_batch(rng)
    flat, b, t = model._flatten_frames(frames)
    h = bb1.tokenize(flat)
    href = bb2.tokenize(flat)
    if method == "adaptformer":
        out = model.block_forward(h, 0)
    elif method == "protuning":
        out = model.prompt_block(bb1.block_forward(h, 0), 0)
    else:
        z = h + bb1.attn(bb1.ln1(h, 0), 0)
        n1 = bb1.ln2(z, 0)
        out = z + bb1.mlp(n1, 0) + model.st_branch(n1, 0, b, t)
    ref = bb2.block_forward(href, 0)
    assert np.abs(out.data - ref.data).max() < 1e-6
