"""Backbone: tokenization, block algebra, encoding, counting, persistence."""

import numpy as np
import pytest

from dualpath import ops
from dualpath.checkpoint import CheckpointError
from dualpath.tensor import ConfigError, ShapeError, Tensor
from dualpath.vit import VIT_B_16, Backbone, BackboneSpec, count_params, param_shapes

TOY = BackboneSpec(depth=2, width=16, heads=2, patch_size=8,
                   image_size=(32, 32), mlp_ratio=4.0)


@pytest.fixture(scope="module")
def toy():
    return Backbone.init_random(TOY, seed=11)


def rand_frames(rng, n, size=32):
    return rng.random((n, size, size, 3)).astype(np.float32)


def test_vit_b16_sequence_length():
    assert VIT_B_16.n_patches == 196
    assert VIT_B_16.seq_len == 197


def test_tokenize_cls_at_index_zero(toy):
    rng = np.random.default_rng(0)
    tokens = toy.tokenize(rand_frames(rng, 2))
    assert tokens.shape == (2, TOY.seq_len, TOY.width)
    expect = toy.params["cls_token"].data + toy.params["pos_embed"].data[0]
    np.testing.assert_allclose(tokens.data[:, 0, :],
                               np.broadcast_to(expect, (2, TOY.width)),
                               rtol=1e-6)


def test_tokenize_rejects_indivisible_frame(toy):
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeError):
        toy.tokenize(rng.random((1, 33, 32, 3)).astype(np.float32))


def test_patch_order_is_row_major(toy):
    # Paint patch (0, 1) of an otherwise-black frame; exactly patch index 1
    # (token index 2, behind CLS) should see nonzero input.
    frame = np.zeros((32, 32, 3), np.float32)
    frame[0:8, 8:16, :] = 1.0
    patches = toy.patchify(frame)
    norms = np.linalg.norm(patches.data[0], axis=1)
    assert norms[1] > 0
    assert np.count_nonzero(norms) == 1


def test_spec_invariants_rejected():
    with pytest.raises(ConfigError):
        BackboneSpec(2, 16, 3, 8, (32, 32))  # width % heads
    with pytest.raises(ConfigError):
        BackboneSpec(2, 16, 2, 7, (32, 32))  # image % patch


def test_block_zero_weights_is_identity(toy):
    spec = TOY
    bb = Backbone.init_random(spec, seed=3)
    for name, t in bb.params.items():
        if ".attn.w_o" in name or ".mlp.w2" in name \
                or ".attn.b_o" in name or ".mlp.b2" in name:
            t.data[:] = 0.0
    rng = np.random.default_rng(4)
    h = Tensor(rng.standard_normal((1, spec.seq_len, spec.width)).astype(np.float32))
    out = bb.block_forward(h, 0)
    np.testing.assert_allclose(out.data, h.data, atol=1e-6)


def test_block_matches_unrolled_equation(toy):
    rng = np.random.default_rng(5)
    h = Tensor(rng.standard_normal((3, TOY.width)).astype(np.float32))
    out = toy.block_forward(h, 0)

    p = toy.params
    normed = ops.layer_norm(h, p["blocks.0.ln1.gamma"], p["blocks.0.ln1.beta"])
    mha, _ = ops.multi_head_attention(
        normed,
        p["blocks.0.attn.w_q"], p["blocks.0.attn.b_q"],
        p["blocks.0.attn.w_k"], p["blocks.0.attn.b_k"],
        p["blocks.0.attn.w_v"], p["blocks.0.attn.b_v"],
        p["blocks.0.attn.w_o"], p["blocks.0.attn.b_o"],
        heads=TOY.heads,
    )
    z = h + mha
    z2 = ops.layer_norm(z, p["blocks.0.ln2.gamma"], p["blocks.0.ln2.beta"])
    mlp = ops.linear(ops.gelu(ops.linear(z2, p["blocks.0.mlp.w1"],
                                         p["blocks.0.mlp.b1"])),
                     p["blocks.0.mlp.w2"], p["blocks.0.mlp.b2"])
    expect = z + mlp
    np.testing.assert_allclose(out.data, expect.data, atol=1e-6)


def test_block_preserves_sequence_length(toy):
    rng = np.random.default_rng(6)
    for n in (1, 5, 17):
        h = Tensor(rng.standard_normal((2, n, TOY.width)).astype(np.float32))
        assert toy.block_forward(h, 1).shape == (2, n, TOY.width)


def test_block_width_mismatch(toy):
    with pytest.raises(ShapeError):
        toy.block_forward(Tensor(np.zeros((2, 3, TOY.width + 1))), 0)


def test_encode_shapes_and_determinism(toy):
    rng = np.random.default_rng(7)
    frames = rand_frames(rng, 8)
    cls = toy.encode(frames)
    assert cls.shape == (8, TOY.width)
    same = toy.encode(np.stack([frames[0]] * 3))
    np.testing.assert_array_equal(same.data[0], same.data[1])


def test_encode_matches_manual_two_block_unroll(toy):
    rng = np.random.default_rng(8)
    frames = rand_frames(rng, 2)
    cls = toy.encode(frames)
    h = toy.tokenize(frames)
    h = toy.block_forward(h, 0)
    h = toy.block_forward(h, 1)
    expect = toy.final_norm(h).data[:, 0, :]
    np.testing.assert_allclose(cls.data, expect, atol=1e-6)


def test_encode_is_permutation_equivariant(toy):
    rng = np.random.default_rng(9)
    frames = rand_frames(rng, 4)
    out = toy.encode(frames).data
    perm = [2, 0, 3, 1]
    out_p = toy.encode(frames[perm]).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-6)


def test_count_params_vit_b16_near_86m():
    n = count_params(VIT_B_16)
    assert abs(n - 86_000_000) / 86_000_000 < 0.02


def test_count_params_depth_zero_is_embedding_side():
    spec = BackboneSpec(0, 16, 2, 8, (32, 32))
    expect = (8 * 8 * 3 * 16 + 16) + 16 + (17 * 16) + 32
    assert count_params(spec) == expect


def test_count_params_matches_instantiated_exactly(toy):
    assert count_params(TOY) == toy.count_params()
    assert count_params(TOY) == sum(
        int(np.prod(s)) for s in param_shapes(TOY).values()
    )


def test_freeze_contract(toy):
    bb = Backbone.init_random(TOY, seed=10)
    bb.freeze_all()
    frames = rand_frames(np.random.default_rng(11), 2)
    before = {k: t.data.copy() for k, t in bb.params.items()}
    for _ in range(3):
        loss = bb.encode(frames).sum()
        with pytest.raises(Exception):
            loss.backward()  # frozen-only graph is untracked
    for k, t in bb.params.items():
        np.testing.assert_array_equal(t.data, before[k])
        assert t.grad is None


def test_same_seed_identical_params():
    a = Backbone.init_random(TOY, seed=42)
    b = Backbone.init_random(TOY, seed=42)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_save_load_roundtrip_bitwise(tmp_path, toy):
    path = tmp_path / "bb.dpck"
    toy.save_weights(path)
    loaded = Backbone.load_weights(path, TOY)
    frames = rand_frames(np.random.default_rng(12), 2)
    np.testing.assert_array_equal(toy.encode(frames).data,
                                  loaded.encode(frames).data)


def test_load_missing_parameter_is_named(tmp_path, toy):
    from dualpath.checkpoint import load_checkpoint, save_checkpoint
    path = tmp_path / "bb.dpck"
    toy.save_weights(path)
    tensors, _, _ = load_checkpoint(path)
    del tensors["blocks.1.mlp.w1"]
    save_checkpoint(tmp_path / "broken.dpck", tensors)
    with pytest.raises(CheckpointError, match="blocks.1.mlp.w1"):
        Backbone.load_weights(tmp_path / "broken.dpck", TOY)
