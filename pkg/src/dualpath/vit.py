"""Vision Transformer backbone: architecture spec, parameters, forward pass.

The backbone is frame-agnostic: it turns one image into a token sequence
(patch tokens behind a CLS token), runs pre-norm transformer blocks, and
reads the final-layer CLS state as the frame representation. All adaptation
methods share these frozen parameters and recompose the sublayers exposed
here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint, verify_names
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    trunc_normal,
)

__all__ = ["BackboneSpec", "Backbone", "VIT_B_16", "count_params"]


@dataclass(frozen=True)
class BackboneSpec:
    """Architectural description: enough to instantiate or cost the model."""

    depth: int
    width: int
    heads: int
    patch_size: int
    image_size: tuple[int, int]  # (width, height) in pixels
    mlp_ratio: float = 4.0

    def __post_init__(self):
        w, h = self.image_size
        if self.depth < 0 or self.width <= 0 or self.heads <= 0 \
                or self.patch_size <= 0 or w <= 0 or h <= 0:
            raise ConfigError(f"backbone spec fields must be positive: {self}")
        if w % self.patch_size or h % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch "
                f"size {self.patch_size}"
            )
        if self.width % self.heads:
            raise ConfigError(
                f"width {self.width} not divisible by {self.heads} heads"
            )

    @property
    def grid(self):
        """(rows, cols) of the patch grid."""
        w, h = self.image_size
        return h // self.patch_size, w // self.patch_size

    @property
    def n_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def seq_len(self):
        return self.n_patches + 1

    @property
    def mlp_hidden(self):
        return int(self.mlp_ratio * self.width)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3


VIT_B_16 = BackboneSpec(depth=12, width=768, heads=12, patch_size=16,
                        image_size=(224, 224), mlp_ratio=4.0)


def param_shapes(spec: BackboneSpec) -> dict:
    """Stable dotted parameter names and shapes for checkpointing."""
    d, hidden = spec.width, spec.mlp_hidden
    shapes = {
        "patch_proj.weight": (spec.patch_dim, d),
        "patch_proj.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (spec.seq_len, d),
        "final_ln.gamma": (d,),
        "final_ln.beta": (d,),
    }
    for i in range(spec.depth):
        p = f"blocks.{i}"
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        for nm in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w_{nm}"] = (d, d)
            shapes[f"{p}.attn.b_{nm}"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, hidden)
        shapes[f"{p}.mlp.b1"] = (hidden,)
        shapes[f"{p}.mlp.w2"] = (hidden, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    return shapes


def count_params(spec: BackboneSpec) -> int:
    """Total backbone scalar count, from the spec alone."""
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


class Backbone:
    """A ViT instance: spec plus a named parameter map."""

    def __init__(self, spec: BackboneSpec, params: dict):
        self.spec = spec
        self.params = params

    # -- construction / persistence ----------------------------------------

    @classmethod
    def init_random(cls, spec: BackboneSpec, seed: int) -> "Backbone":
        """Deterministic random weights: trunc-normal(0.02), zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(spec).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                data = np.ones(shape, np.float32)
            elif leaf in ("beta", "bias") or leaf.startswith("b"):
                data = np.zeros(shape, np.float32)
            else:  # weight matrices, cls token, positional table
                data = trunc_normal(rng, shape, std=0.02)
            params[name] = Tensor(data, requires_grad=True)
        return cls(spec, params)

    def save_weights(self, path):
        save_checkpoint(path, self.params, config=None, step=0)

    @classmethod
    def load_weights(cls, path, spec: BackboneSpec) -> "Backbone":
        """Load and shape-check every expected parameter."""
        tensors, _, _ = load_checkpoint(path)
        verify_names(tensors, param_shapes(spec))
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(spec, params)

    # -- freezing -----------------------------------------------------------

    def freeze_all(self):
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def count_params(self):
        return sum(t.size for t in self.params.values())

    # -- sublayers (adaptation methods recompose these) ----------------------

    def _p(self, name):
        return self.params[name]

    def ln1(self, h, i):
        return ops.layer_norm(h, self._p(f"blocks.{i}.ln1.gamma"),
                              self._p(f"blocks.{i}.ln1.beta"))

    def ln2(self, z, i):
        return ops.layer_norm(z, self._p(f"blocks.{i}.ln2.gamma"),
                              self._p(f"blocks.{i}.ln2.beta"))

    def attn(self, x, i, capture=None):
        p = f"blocks.{i}.attn"
        out, attn = ops.multi_head_attention(
            x,
            self._p(f"{p}.w_q"), self._p(f"{p}.b_q"),
            self._p(f"{p}.w_k"), self._p(f"{p}.b_k"),
            self._p(f"{p}.w_v"), self._p(f"{p}.b_v"),
            self._p(f"{p}.w_o"), self._p(f"{p}.b_o"),
            heads=self.spec.heads,
        )
        if capture is not None:
            capture["attn"] = attn.data.copy()
        return out

    def mlp(self, x, i):
        p = f"blocks.{i}.mlp"
        hidden = ops.gelu(ops.linear(x, self._p(f"{p}.w1"), self._p(f"{p}.b1")))
        return ops.linear(hidden, self._p(f"{p}.w2"), self._p(f"{p}.b2"))

    def final_norm(self, h):
        return ops.layer_norm(h, self._p("final_ln.gamma"),
                              self._p("final_ln.beta"))

    # -- forward -------------------------------------------------------------

    def patchify(self, frames):
        """Row-major patch extraction: [B,H,W,3] -> [B, N, P*P*3]."""
        if isinstance(frames, Tensor):
            data = frames.data
        else:
            data = np.asarray(frames, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        b, h, w, c = data.shape
        p = self.spec.patch_size
        ew, eh = self.spec.image_size
        if (w, h) != (ew, eh) or h % p or w % p or c != 3:
            raise ShapeError(
                f"frame shape {(h, w, c)} incompatible with spec image "
                f"{(eh, ew, 3)} and patch size {p}"
            )
        gh, gw = h // p, w // p
        pat = data.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
        return Tensor(np.ascontiguousarray(pat).reshape(b, gh * gw, p * p * c))

    def tokenize(self, frames, cls_token: Tensor | None = None,
                 pos_embed: Tensor | None = None) -> Tensor:
        """Frames -> token sequences ``[B, N+1, d]`` with CLS at index 0.

        ``cls_token`` / ``pos_embed`` default to the backbone's own; the
        adaptation paths substitute their own trainable or fixed tables.
        """
        patches = self.patchify(frames)
        b, n, _ = patches.shape
        cls_token = cls_token if cls_token is not None else self._p("cls_token")
        pos_embed = pos_embed if pos_embed is not None else self._p("pos_embed")
        if pos_embed.shape != (n + 1, self.spec.width):
            raise ShapeError(
                f"positional table {pos_embed.shape} does not match "
                f"sequence length {n + 1}"
            )
        proj = ops.linear(patches, self._p("patch_proj.weight"),
                          self._p("patch_proj.bias"))
        cls = broadcast_to(cls_token.reshape((1, 1, self.spec.width)),
                           (b, 1, self.spec.width))
        return concat([cls, proj], axis=1) + pos_embed

    def block_forward(self, h, i, capture=None) -> Tensor:
        """Pre-norm block: z = h + MHA(LN(h)); out = z + MLP(LN(z))."""
        if h.shape[-1] != self.spec.width:
            raise ShapeError(
                f"token width {h.shape[-1]} != backbone width {self.spec.width}"
            )
        z = h + self.attn(self.ln1(h, i), i, capture=capture)
        return z + self.mlp(self.ln2(z, i), i)

    def encode(self, frames, capture=None) -> Tensor:
        """Frames ``[B,H,W,3]`` -> final-layer CLS vectors ``[B, d]``."""
        h = self.tokenize(frames)
        for i in range(self.spec.depth):
            cap = capture if i == self.spec.depth - 1 else None
            h = self.block_forward(h, i, capture=cap)
        return self.final_norm(h)[:, 0, :]
