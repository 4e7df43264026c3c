"""Parameter-efficient adaptation methods over a frozen ViT backbone.

Four baseline methods share one pattern: freeze every backbone tensor, bolt
a small trainable structure onto each block, and train only that structure
plus a classifier. Prompt-token methods get a temporal-transformer
classifier over per-frame CLS tokens; the spatiotemporal-conv method uses a
single linear head over the mean frame representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    kaiming_normal,
    trunc_normal,
)
from .vit import Backbone

__all__ = [
    "AdaptationSpec",
    "Adapter",
    "bottleneck_adapter",
    "TransformerBlock",
    "TemporalClassifier",
    "build_adapted_model",
    "METHODS",
]

METHODS = ("frozen", "vpt", "adaptformer", "protuning", "st_adapter", "dualpath")

_ACTIVATIONS = {"gelu": ops.gelu, "relu": ops.relu, "identity": lambda x: x}

PLACEMENTS = ("parallel_mha", "parallel_mlp", "serial_mha", "serial_mlp", "pre_mha")


@dataclass
class AdaptationSpec:
    """Which method wraps the backbone, plus its hyperparameters."""

    method: str
    n_classes: int
    bottleneck: int = 128           # adapter inner width b
    scale: float = 1.0              # adapter output scale s
    prompt_tokens: int = 8          # K, prompt-token methods only
    activation: str = "gelu"
    frames: int = 8                 # frames per clip consumed by the model (T)
    spatial_frames: int = 4         # T_S, two-path method only
    grid_w: int = 2                 # frameset scaling factor w
    grid_h: int = 2                 # frameset scaling factor h
    ssv2_mode: bool = False         # extra pre-attention temporal adapter
    conv3d_kernel: tuple = (3, 3, 3)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown adaptation method {self.method!r}; "
                f"expected one of {METHODS}"
            )
        if self.bottleneck <= 0:
            raise ConfigError("bottleneck width must be positive")
        if self.prompt_tokens < 0:
            raise ConfigError("prompt token count must be >= 0")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class Adapter:
    """Bottleneck module: scale * (act(x W_down + b_down) W_up + b_up).

    ``W_down`` is Kaiming-normal, ``W_up`` and both biases start at zero, so
    the module contributes nothing at initialization. Serial placements wrap
    their input residually (``x + bottleneck(x)``) so a zero-initialized
    adapter passes the pretrained signal through unchanged.
    """

    def __init__(self, rng, d, b, scale=1.0, activation="gelu",
                 placement="parallel_mlp"):
        if placement not in PLACEMENTS:
            raise ConfigError(f"unknown adapter placement {placement!r}")
        self.w_down = Tensor(kaiming_normal(rng, (d, b), fan_in=d),
                             requires_grad=True)
        self.b_down = Tensor(np.zeros(b, np.float32), requires_grad=True)
        self.w_up = Tensor(np.zeros((b, d), np.float32), requires_grad=True)
        self.b_up = Tensor(np.zeros(d, np.float32), requires_grad=True)
        self.scale = float(scale)
        self.act = _ACTIVATIONS[activation]
        self.placement = placement
        self.serial = placement.startswith("serial") or placement == "pre_mha"

    def bottleneck(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w_down.shape[0]:
            raise ShapeError(
                f"adapter width {self.w_down.shape[0]} does not match "
                f"input width {x.shape[-1]}"
            )
        hidden = self.act(ops.linear(x, self.w_down, self.b_down))
        return ops.linear(hidden, self.w_up, self.b_up) * self.scale

    def __call__(self, x: Tensor) -> Tensor:
        out = self.bottleneck(x)
        return x + out if self.serial else out

    def named(self, prefix):
        return {
            f"{prefix}.w_down": self.w_down,
            f"{prefix}.b_down": self.b_down,
            f"{prefix}.w_up": self.w_up,
            f"{prefix}.b_up": self.b_up,
        }


def bottleneck_adapter(x: Tensor, adapter: Adapter) -> Tensor:
    """The bare bottleneck map (no serial residual), as a pure function."""
    return adapter.bottleneck(x)


class TransformerBlock:
    """A standalone trainable pre-norm block (classifier-side)."""

    def __init__(self, rng, d, heads, mlp_ratio=4.0):
        if d % heads:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        hidden = int(mlp_ratio * d)
        self.heads = heads

        def w(shape):
            return Tensor(trunc_normal(rng, shape, 0.02), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, np.float32), requires_grad=True)

        self.params = {
            "ln1.gamma": Tensor(np.ones(d, np.float32), requires_grad=True),
            "ln1.beta": zeros(d),
            "ln2.gamma": Tensor(np.ones(d, np.float32), requires_grad=True),
            "ln2.beta": zeros(d),
            "mlp.w1": w((d, hidden)), "mlp.b1": zeros(hidden),
            "mlp.w2": w((hidden, d)), "mlp.b2": zeros(d),
        }
        for nm in ("q", "k", "v", "o"):
            self.params[f"attn.w_{nm}"] = w((d, d))
            self.params[f"attn.b_{nm}"] = zeros(d)

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        normed = ops.layer_norm(h, p["ln1.gamma"], p["ln1.beta"])
        attn_out, _ = ops.multi_head_attention(
            normed, p["attn.w_q"], p["attn.b_q"], p["attn.w_k"], p["attn.b_k"],
            p["attn.w_v"], p["attn.b_v"], p["attn.w_o"], p["attn.b_o"],
            heads=self.heads)
        z = h + attn_out
        z2 = ops.layer_norm(z, p["ln2.gamma"], p["ln2.beta"])
        mlp = ops.linear(ops.gelu(ops.linear(z2, p["mlp.w1"], p["mlp.b1"])),
                         p["mlp.w2"], p["mlp.b2"])
        return z + mlp

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in self.params.items()}


class TemporalClassifier:
    """Temporal positional embeddings + one transformer block + FC head."""

    def __init__(self, rng, d, t, heads, n_classes, mlp_ratio=4.0):
        self.t = t
        self.p_temp = Tensor(trunc_normal(rng, (t, d), 0.02), requires_grad=True)
        self.block = TransformerBlock(rng, d, heads, mlp_ratio)
        self.head_w = Tensor(trunc_normal(rng, (d, n_classes), 0.02),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)

    def __call__(self, cls_seq: Tensor) -> Tensor:
        if cls_seq.shape[-2] != self.t:
            raise ShapeError(
                f"classifier expects {self.t} frames, got {cls_seq.shape[-2]}"
            )
        x = cls_seq + self.p_temp
        x = self.block(x)
        pooled = x.mean(axis=-2)
        return ops.linear(pooled, self.head_w, self.head_b)

    def named(self, prefix="classifier"):
        out = {f"{prefix}.p_temp": self.p_temp,
               f"{prefix}.head.weight": self.head_w,
               f"{prefix}.head.bias": self.head_b}
        out.update(self.block.named(f"{prefix}.block"))
        return out


class LinearClassifier:
    """Single FC layer over the mean frame representation."""

    def __init__(self, rng, d, n_classes):
        self.w = Tensor(trunc_normal(rng, (d, n_classes), 0.02),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)

    def __call__(self, pooled: Tensor) -> Tensor:
        return ops.linear(pooled, self.w, self.b)

    def named(self, prefix="classifier"):
        return {f"{prefix}.head.weight": self.w, f"{prefix}.head.bias": self.b}


# ---------------------------------------------------------------------------
# Method models
# ---------------------------------------------------------------------------

class AdaptedModel:
    """Shared plumbing: a frozen backbone plus trainable extras."""

    method = "frozen"

    def __init__(self, backbone: Backbone, spec: AdaptationSpec, seed: int):
        backbone.freeze_all()
        self.backbone = backbone
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self._trainable = {}

    # subclasses register their parameters here
    def _register(self, named: dict):
        self._trainable.update(named)

    def trainable_parameters(self) -> dict:
        return dict(self._trainable)

    def frozen_parameters(self) -> dict:
        return dict(self.backbone.params)

    def named_parameters(self) -> dict:
        out = self.frozen_parameters()
        out.update(self._trainable)
        return out

    def zero_grad(self):
        for t in self._trainable.values():
            t.zero_grad()

    def _flatten_frames(self, frames):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim == 4:
            frames = frames[None]
        b, t = frames.shape[0], frames.shape[1]
        return frames.reshape((b * t,) + frames.shape[2:]), b, t

    def forward(self, frames) -> Tensor:
        raise NotImplementedError


class FrozenModel(AdaptedModel):
    """No adaptation: frozen features into the temporal classifier."""

    method = "frozen"

    def __init__(self, backbone, spec, seed):
        super().__init__(backbone, spec, seed)
        self.classifier = TemporalClassifier(
            self.rng, backbone.spec.width, spec.frames, backbone.spec.heads,
            spec.n_classes, mlp_ratio=backbone.spec.mlp_ratio)
        self._register(self.classifier.named())

    def forward(self, frames) -> Tensor:
        flat, b, t = self._flatten_frames(frames)
        cls = self.backbone.encode(flat)
        return self.classifier(cls.reshape((b, t, -1)))


class VptModel(AdaptedModel):
    """Deep visual prompt tuning: K fresh trainable tokens per block."""

    method = "vpt"

    def __init__(self, backbone, spec, seed):
        super().__init__(backbone, spec, seed)
        d = backbone.spec.width
        self.prompts = [
            Tensor(trunc_normal(self.rng, (spec.prompt_tokens, d), 0.02),
                   requires_grad=True)
            for _ in range(backbone.spec.depth)
        ]
        for i, p in enumerate(self.prompts):
            self._register({f"vpt.prompts.{i}": p})
        self.classifier = TemporalClassifier(
            self.rng, d, spec.frames, backbone.spec.heads, spec.n_classes,
            mlp_ratio=backbone.spec.mlp_ratio)
        self._register(self.classifier.named())

    def forward(self, frames) -> Tensor:
        flat, b, t = self._flatten_frames(frames)
        k = self.spec.prompt_tokens
        h = self.backbone.tokenize(flat)
        for i in range(self.backbone.spec.depth):
            if k:
                e = broadcast_to(
                    self.prompts[i].reshape((1, k, -1)),
                    (h.shape[0], k, h.shape[2]))
                h = concat([e, h], axis=1)
            h = self.backbone.block_forward(h, i)
            if k:
                # Deep-VPT contract: prompt outputs are discarded; the next
                # block prepends its own fresh prompts.
                h = h[:, k:, :]
        cls = self.backbone.final_norm(h)[:, 0, :]
        return self.classifier(cls.reshape((b, t, -1)))


class AdaptFormerModel(AdaptedModel):
    """Parallel bottleneck adapter alongside each block's MLP."""

    method = "adaptformer"

    def __init__(self, backbone, spec, seed):
        super().__init__(backbone, spec, seed)
        d = backbone.spec.width
        self.adapters = [
            Adapter(self.rng, d, spec.bottleneck, spec.scale, spec.activation,
                    placement="parallel_mlp")
            for _ in range(backbone.spec.depth)
        ]
        for i, a in enumerate(self.adapters):
            self._register(a.named(f"adaptformer.blocks.{i}"))
        self.classifier = TemporalClassifier(
            self.rng, d, spec.frames, backbone.spec.heads, spec.n_classes,
            mlp_ratio=backbone.spec.mlp_ratio)
        self._register(self.classifier.named())

    def block_forward(self, h, i):
        bb = self.backbone
        z = h + bb.attn(bb.ln1(h, i), i)
        normed = bb.ln2(z, i)
        return z + bb.mlp(normed, i) \
            + self.adapters[i].bottleneck(normed)

    def forward(self, frames) -> Tensor:
        flat, b, t = self._flatten_frames(frames)
        h = self.backbone.tokenize(flat)
        for i in range(self.backbone.spec.depth):
            h = self.block_forward(h, i)
        cls = self.backbone.final_norm(h)[:, 0, :]
        return self.classifier(cls.reshape((b, t, -1)))


class ProTuningModel(AdaptedModel):
    """Convolutional prompt prediction added to each block's output."""

    method = "protuning"

    def __init__(self, backbone, spec, seed):
        super().__init__(backbone, spec, seed)
        gh, gw = backbone.spec.grid
        if gh != gw:
            raise ConfigError(
                f"prompt convolution needs a square patch grid, got {gh}x{gw}"
            )
        d, b = backbone.spec.width, spec.bottleneck
        self.stacks = []
        for i in range(backbone.spec.depth):
            conv1_w = Tensor(kaiming_normal(self.rng, (1, 1, d, b), fan_in=d),
                             requires_grad=True)
            conv1_b = Tensor(np.zeros(b, np.float32), requires_grad=True)
            dw_w = Tensor(kaiming_normal(self.rng, (5, 5, b), fan_in=25),
                          requires_grad=True)
            dw_b = Tensor(np.zeros(b, np.float32), requires_grad=True)
            # Final pointwise conv starts at zero: no prompt at init.
            conv2_w = Tensor(np.zeros((1, 1, b, d), np.float32),
                             requires_grad=True)
            conv2_b = Tensor(np.zeros(d, np.float32), requires_grad=True)
            stack = (conv1_w, conv1_b, dw_w, dw_b, conv2_w, conv2_b)
            self.stacks.append(stack)
            names = ("conv1.weight", "conv1.bias", "dw.weight", "dw.bias",
                     "conv2.weight", "conv2.bias")
            self._register({f"protuning.blocks.{i}.{nm}": tns
                            for nm, tns in zip(names, stack)})
        self.classifier = TemporalClassifier(
            self.rng, d, spec.frames, backbone.spec.heads, spec.n_classes,
            mlp_ratio=backbone.spec.mlp_ratio)
        self._register(self.classifier.named())

    def prompt_block(self, h, i):
        """h_tilde = h + v; the CLS token bypasses the conv path."""
        gh, gw = self.backbone.spec.grid
        bsz, n, d = h.shape
        if n != gh * gw + 1:
            raise ConfigError(
                f"token count {n} does not fit grid {gh}x{gw} plus CLS"
            )
        conv1_w, conv1_b, dw_w, dw_b, conv2_w, conv2_b = self.stacks[i]
        grid = h[:, 1:, :].reshape((bsz, gh, gw, d))
        x = ops.conv2d(grid, conv1_w, conv1_b)
        x = ops.conv2d(x, dw_w, dw_b)
        x = ops.conv2d(x, conv2_w, conv2_b)
        v = ops.gelu(x)  # single activation wraps the whole stack
        v = v.reshape((bsz, gh * gw, d))
        patches = h[:, 1:, :] + v
        return concat([h[:, 0:1, :], patches], axis=1)

    def forward(self, frames) -> Tensor:
        flat, b, t = self._flatten_frames(frames)
        h = self.backbone.tokenize(flat)
        for i in range(self.backbone.spec.depth):
            h = self.backbone.block_forward(h, i)
            h = self.prompt_block(h, i)
        cls = self.backbone.final_norm(h)[:, 0, :]
        return self.classifier(cls.reshape((b, t, -1)))


class StAdapterModel(AdaptedModel):
    """Depth-wise 3-D convolution inside the adapter, parallel to each MLP."""

    method = "st_adapter"

    def __init__(self, backbone, spec, seed):
        super().__init__(backbone, spec, seed)
        d, b = backbone.spec.width, spec.bottleneck
        kt, kh, kw = spec.conv3d_kernel
        self.adapters = []
        for i in range(backbone.spec.depth):
            adapter = Adapter(self.rng, d, b, spec.scale, spec.activation,
                              placement="parallel_mlp")
            # Identity (delta) kernel at init; zero W_up already guarantees
            # a vanishing branch, the delta keeps early training stable.
            kernel = np.zeros((kt, kh, kw, b), np.float32)
            kernel[kt // 2, kh // 2, kw // 2, :] = 1.0
            kernel3d = Tensor(kernel, requires_grad=True)
            self.adapters.append((adapter, kernel3d))
            self._register(adapter.named(f"st_adapter.blocks.{i}"))
            self._register({f"st_adapter.blocks.{i}.kernel3d": kernel3d})
        self.classifier = LinearClassifier(self.rng, d, spec.n_classes)
        self._register(self.classifier.named())

    def st_branch(self, normed, i, b, t):
        """Down-project all frames, 3-D conv over (t, grid), activate, up."""
        adapter, kernel3d = self.adapters[i]
        gh, gw = self.backbone.spec.grid
        bt, n, _ = normed.shape
        down = ops.linear(normed, adapter.w_down, adapter.b_down)
        width = down.shape[-1]
        cls_down = down[:, 0:1, :]
        patches = down[:, 1:, :].reshape((b, t, gh, gw, width))
        moved = ops.depthwise_conv3d(patches, kernel3d)
        moved = moved.reshape((b * t, gh * gw, width))
        merged = concat([cls_down, moved], axis=1)
        up = ops.linear(adapter.act(merged), adapter.w_up, adapter.b_up)
        return up * adapter.scale

    def forward(self, frames) -> Tensor:
        flat, b, t = self._flatten_frames(frames)
        bb = self.backbone
        h = bb.tokenize(flat)
        for i in range(bb.spec.depth):
            z = h + bb.attn(bb.ln1(h, i), i)
            normed = bb.ln2(z, i)
            h = z + bb.mlp(normed, i) + self.st_branch(normed, i, b, t)
        cls = bb.final_norm(h)[:, 0, :]
        pooled = cls.reshape((b, t, -1)).mean(axis=1)
        return self.classifier(pooled)


_MODEL_CLASSES = {
    "frozen": FrozenModel,
    "vpt": VptModel,
    "adaptformer": AdaptFormerModel,
    "protuning": ProTuningModel,
    "st_adapter": StAdapterModel,
}


def build_adapted_model(backbone: Backbone, spec: AdaptationSpec, seed: int = 0):
    """Wrap a backbone with the requested method; freezes the backbone."""
    if spec.method == "dualpath":
        from .dual_path import build_dualpath_model
        return build_dualpath_model(backbone, spec, seed=seed)
    if spec.method not in _MODEL_CLASSES:
        raise ConfigError(f"unknown adaptation method {spec.method!r}")
    return _MODEL_CLASSES[spec.method](backbone, spec, seed)
