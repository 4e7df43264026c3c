"""Analytic trainable-parameter counts and inference-FLOP estimates.

Counting convention (also emitted in every report header):

* one fused multiply-accumulate = 1 FLOP;
* transcendentals cost their libm-level arithmetic: exp = erf = 48 FLOPs;
* divide / sqrt = 8 FLOPs; every other elementwise op = 1 FLOP.

Per-view cost is the cost of one temporal clip at one spatial crop; the
view schedule multiplies it by clips x spatial crops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdaptationSpec
from .tensor import ConfigError
from .vit import BackboneSpec, count_params as backbone_count

__all__ = [
    "FLOP_COSTS",
    "CONVENTION",
    "ViewSchedule",
    "CostReport",
    "count_trainable",
    "estimate_flops",
    "compare_methods",
    "render_table",
]

FLOP_COSTS = {
    "mac": 1.0,
    "exp": 48.0,
    "erf": 48.0,
    "div": 8.0,
    "sqrt": 8.0,
    "elementwise": 1.0,
}

# Derived per-element costs.
_GELU = FLOP_COSTS["erf"] + 4.0
_SOFTMAX = FLOP_COSTS["exp"] + FLOP_COSTS["div"] + 3.0
_LAYERNORM = 7.0 + 3.0  # per-element affine-normalize + amortized sqrt/div

CONVENTION = (
    "FLOP convention: 1 fused multiply-accumulate = 1 FLOP; "
    f"exp/erf = {FLOP_COSTS['exp']:.0f}; div/sqrt = {FLOP_COSTS['div']:.0f}; "
    "other elementwise = 1. Per-view = one clip at one spatial crop."
)


@dataclass(frozen=True)
class ViewSchedule:
    """Views = frames x clips x spatial crops."""

    frames: int
    clips: int = 1
    spatial: int = 1

    def __post_init__(self):
        if self.frames <= 0 or self.clips <= 0 or self.spatial <= 0:
            raise ConfigError(f"view schedule must be positive: {self}")

    @property
    def n_views(self):
        return self.clips * self.spatial


@dataclass
class CostReport:
    method: str
    total_params: int
    trainable_params: int
    flops_per_view: float
    views: tuple
    total_gflops: float
    breakdown: dict = field(default_factory=dict)
    convention: str = CONVENTION

    def __post_init__(self):
        assert self.total_params >= self.trainable_params >= 0
        for key, val in self.breakdown.items():
            assert val >= 0, f"negative breakdown entry {key}"


# ---------------------------------------------------------------------------
# Trainable parameter counting
# ---------------------------------------------------------------------------

def _adapter_params(d, b):
    return d * b + b + b * d + d


def _block_params(d, mlp_ratio=4.0):
    hidden = int(mlp_ratio * d)
    return 4 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def _temporal_classifier_params(d, t, n_classes, mlp_ratio=4.0):
    return t * d + _block_params(d, mlp_ratio) + d * n_classes + n_classes


def _dualpath_classifier_params(d, n_classes, n_paths):
    in_dim = n_paths * d
    return in_dim * d + d + d * n_classes + n_classes


def count_trainable(spec, backbone: BackboneSpec | None = None,
                    enable_spatial: bool = True,
                    enable_temporal: bool = True) -> int:
    """Closed-form trainable count from specs, or an exact sum from a model.

    Passing a live model (anything with ``trainable_parameters``) returns
    the element-count sum over its trainable set.
    """
    if hasattr(spec, "trainable_parameters"):
        return sum(t.size for t in spec.trainable_parameters().values())
    if backbone is None:
        raise ConfigError("count_trainable needs a BackboneSpec with an AdaptationSpec")

    a: AdaptationSpec = spec
    d, ld = backbone.width, backbone.depth
    b, c = a.bottleneck, a.n_classes

    if a.method == "frozen":
        return _temporal_classifier_params(d, a.frames, c, backbone.mlp_ratio)
    if a.method == "vpt":
        return ld * a.prompt_tokens * d + \
            _temporal_classifier_params(d, a.frames, c, backbone.mlp_ratio)
    if a.method == "adaptformer":
        return ld * _adapter_params(d, b) + \
            _temporal_classifier_params(d, a.frames, c, backbone.mlp_ratio)
    if a.method == "protuning":
        per_block = (d * b + b) + (5 * 5 * b + b) + (b * d + d)
        return ld * per_block + \
            _temporal_classifier_params(d, a.frames, c, backbone.mlp_ratio)
    if a.method == "st_adapter":
        kt, kh, kw = a.conv3d_kernel
        per_block = _adapter_params(d, b) + kt * kh * kw * b
        return ld * per_block + d * c + c
    if a.method == "dualpath":
        n_paths = int(enable_spatial) + int(enable_temporal)
        if n_paths == 0:
            raise ConfigError("at least one path must be enabled")
        total = _dualpath_classifier_params(d, c, n_paths)
        if enable_spatial:
            total += ld * 2 * _adapter_params(d, b)
            total += d                       # spatial CLS
            total += backbone.seq_len * d    # learnable spatial positions
        if enable_temporal:
            per_block = (3 if a.ssv2_mode else 2) * _adapter_params(d, b)
            total += ld * per_block
            total += d                       # temporal CLS (3-D table is fixed)
        return total
    raise ConfigError(f"unknown adaptation method {a.method!r}")


# ---------------------------------------------------------------------------
# FLOP estimation
# ---------------------------------------------------------------------------

def _sequence_flops(backbone: BackboneSpec, n_tokens: int, breakdown: dict,
                    prefix: str, count: float, block_extra=None):
    """One token sequence through the full backbone, ``count`` times.

    ``block_extra(i) -> (flops, label)`` adds method branches per block.
    """
    d = backbone.width
    hidden = backbone.mlp_hidden
    heads = backbone.heads
    n = n_tokens
    mac = FLOP_COSTS["mac"]

    def add(key, val):
        breakdown[key] = breakdown.get(key, 0.0) + val * count

    # patch projection + bias + positional add (per sequence)
    add(f"{prefix}.patch_proj",
        backbone.n_patches * backbone.patch_dim * d * mac
        + backbone.n_patches * d + n * d)

    per_ln = n * d * _LAYERNORM
    attn = (4 * n * d * d + n * n * d * 2) * mac \
        + 4 * n * d \
        + heads * n * n * (1.0 + _SOFTMAX)  # scale mul + softmax
    mlp = (n * d * hidden + n * hidden * d) * mac \
        + n * (hidden + d) + n * hidden * _GELU
    residuals = 2 * n * d

    add(f"{prefix}.layer_norm", backbone.depth * 2 * per_ln + per_ln)
    add(f"{prefix}.attention", backbone.depth * attn)
    add(f"{prefix}.mlp", backbone.depth * mlp)
    add(f"{prefix}.residuals", backbone.depth * residuals)
    if block_extra is not None:
        extra = sum(block_extra(i) for i in range(backbone.depth))
        add(f"{prefix}.adapters", extra)


def _parallel_adapter_flops(n, d, b):
    mac = FLOP_COSTS["mac"]
    return (n * d * b + n * b * d) * mac + n * (b + d) + n * b * _GELU \
        + n * d * 2  # scale + residual add


def estimate_flops(adapt: AdaptationSpec, backbone: BackboneSpec,
                   schedule: ViewSchedule) -> CostReport:
    """Analytic inference cost for one method under a view schedule."""
    d = backbone.width
    b = adapt.bottleneck
    n = backbone.seq_len
    breakdown: dict = {}
    mac = FLOP_COSTS["mac"]
    frames = schedule.frames

    if adapt.method == "dualpath":
        if frames != adapt.frames:
            raise ConfigError(
                f"schedule frames {frames} != two-path temporal count "
                f"{adapt.frames}"
            )
        t_s = adapt.spatial_frames
        t_g = adapt.frames // (adapt.grid_w * adapt.grid_h)
        sp_extra = lambda i: 2 * _parallel_adapter_flops(n, d, b)
        tp_extra = lambda i: (3 if adapt.ssv2_mode else 2) \
            * _parallel_adapter_flops(n, d, b)
        _sequence_flops(backbone, n, breakdown, "spatial", t_s,
                        block_extra=sp_extra)
        _sequence_flops(backbone, n, breakdown, "temporal", t_g,
                        block_extra=tp_extra)
        # grid packing: area-average every temporal frame once
        ew, eh = backbone.image_size
        cell_px = (ew // adapt.grid_w) * (eh // adapt.grid_h) * 3
        breakdown["grid_packing"] = adapt.frames * (
            ew * eh * 3 * 1.0 + cell_px * FLOP_COSTS["div"])
        # classifier: concat -> linear -> gelu -> linear (+ path means)
        breakdown["classifier"] = (2 * d * d + d * adapt.n_classes) * mac \
            + d * _GELU + (t_s + t_g) * d
    elif adapt.method == "st_adapter":
        kt, kh, kw = adapt.conv3d_kernel

        def st_extra(i):
            conv = backbone.n_patches * b * (kt * kh * kw) * mac
            return _parallel_adapter_flops(n, d, b) + conv

        _sequence_flops(backbone, n, breakdown, "frames", frames,
                        block_extra=st_extra)
        breakdown["classifier"] = (d * adapt.n_classes) * mac + frames * d
    elif adapt.method in ("frozen", "vpt", "adaptformer", "protuning"):
        if adapt.method == "vpt":
            seq = n + adapt.prompt_tokens
            extra = None
        elif adapt.method == "adaptformer":
            seq = n
            extra = lambda i: _parallel_adapter_flops(n, d, b)
        elif adapt.method == "protuning":
            seq = n

            def extra(i):
                npatch = backbone.n_patches
                convs = (npatch * d * b + npatch * 25 * b + npatch * b * d) * mac
                return convs + npatch * (2 * b + d) + npatch * d * _GELU \
                    + npatch * d
        else:
            seq = n
            extra = None
        _sequence_flops(backbone, seq, breakdown, "frames", frames,
                        block_extra=extra)
        # temporal transformer classifier over the frame CLS sequence
        t = frames
        hidden = backbone.mlp_hidden
        clf = (4 * t * d * d + 2 * t * t * d + t * d * hidden * 2) * mac \
            + t * hidden * _GELU + 2 * t * d * _LAYERNORM \
            + backbone.heads * t * t * _SOFTMAX \
            + (d * adapt.n_classes) * mac + t * d
        breakdown["classifier"] = clf
    else:
        raise ConfigError(f"unknown adaptation method {adapt.method!r}")

    per_view = float(sum(breakdown.values()))
    total = per_view * schedule.n_views
    return CostReport(
        method=adapt.method,
        total_params=backbone_count(backbone) + count_trainable(adapt, backbone),
        trainable_params=count_trainable(adapt, backbone),
        flops_per_view=per_view,
        views=(schedule.frames, schedule.clips, schedule.spatial),
        total_gflops=total / 1e9,
        breakdown=breakdown,
    )


def compare_methods(specs, backbone: BackboneSpec, schedule: ViewSchedule):
    """Cost every spec under one schedule; ratios are against the first
    spec given. Returns rows sorted by total GFLOPs."""
    if not specs:
        raise ConfigError("compare_methods needs at least one spec")
    reports = [estimate_flops(s, backbone, schedule) for s in specs]
    base = reports[0].total_gflops
    rows = [{
        "method": r.method,
        "trainable_params": r.trainable_params,
        "total_params": r.total_params,
        "total_gflops": r.total_gflops,
        "ratio_to_first": r.total_gflops / base if base else float("nan"),
        "report": r,
    } for r in reports]
    rows.sort(key=lambda row: row["total_gflops"])
    return rows


def render_table(rows) -> str:
    """Aligned plain-text rendering of a compare_methods result."""
    lines = [CONVENTION, ""]
    header = f"{'method':<12} {'trainable':>12} {'total':>12} " \
             f"{'GFLOPs':>10} {'ratio':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in rows:
        lines.append(
            f"{row['method']:<12} {row['trainable_params']:>12,} "
            f"{row['total_params']:>12,} {row['total_gflops']:>10.1f} "
            f"{row['ratio_to_first']:>7.3f}"
        )
    return "\n".join(lines)
