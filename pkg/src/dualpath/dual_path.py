"""Two-path adaptation: spatial per-frame encoding plus grid-frameset
temporal encoding over one shared frozen backbone.

The spatial path runs a sparse subset of frames through the backbone with
*parallel* adapters next to attention and MLP. The temporal path packs
consecutive downscaled frames into image-sized grid framesets (temporal
order read row-major), tags tokens with fixed sinusoidal 3-D positions
(cell time, patch row, patch column), and wraps attention/MLP outputs with
*serial* adapters. Each path mean-pools its final CLS states; a two-layer
head classifies their concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .adapters import AdaptationSpec, Adapter, AdaptedModel
from .tensor import ConfigError, ShapeError, Tensor, concat
from .vit import Backbone

__all__ = [
    "SamplingPlan",
    "FramesetGrid",
    "sample_frames",
    "area_downscale",
    "make_grid_frameset",
    "fixed_3d_positions",
    "frameset_positions",
    "DualPathModel",
    "build_dualpath_model",
]


@dataclass(frozen=True)
class SamplingPlan:
    """How many frames each path takes from a video, and at which stride."""

    spatial_frames: int          # T_S
    temporal_frames: int         # T
    temporal_stride: int = 1
    spatial_stride: int | None = None  # derived from the subset rule if None
    dynamic: bool = False        # stride = floor(video_len / T)

    def __post_init__(self):
        ts, t = self.spatial_frames, self.temporal_frames
        if ts <= 0 or t <= 0:
            raise ConfigError("frame counts must be positive")
        if t % ts:
            raise ConfigError(
                f"spatial frame count {ts} must evenly divide temporal "
                f"count {t} (spatial frames are a uniform subset)"
            )
        if not self.dynamic:
            if self.temporal_stride <= 0:
                raise ConfigError("temporal stride must be positive")
            derived = self.temporal_stride * (t // ts)
            if self.spatial_stride is not None and self.spatial_stride != derived:
                raise ConfigError(
                    f"spatial stride {self.spatial_stride} conflicts with "
                    f"the subset rule (temporal stride {self.temporal_stride} "
                    f"x {t // ts} = {derived})"
                )


def sample_frames(video_len: int, plan: SamplingPlan):
    """Uniform frame indices for both paths; spatial is a subset of temporal.

    Fixed mode uses the configured stride and rejects videos shorter than
    the sampled span; dynamic mode stretches the stride to cover the whole
    video.
    """
    t = plan.temporal_frames
    if plan.dynamic:
        if video_len < t:
            raise ConfigError(
                f"video of {video_len} frames cannot supply {t} samples"
            )
        stride = video_len // t
    else:
        stride = plan.temporal_stride
        span = (t - 1) * stride
        if span >= video_len:
            raise ConfigError(
                f"video of {video_len} frames is shorter than the sampled "
                f"span {span + 1}; use dynamic sampling to cover it"
            )
    temporal = [k * stride for k in range(t)]
    step = t // plan.spatial_frames
    spatial = temporal[::step][:plan.spatial_frames]
    return spatial, temporal


@dataclass
class FramesetGrid:
    """One grid-like frameset: w*h downscaled frames tiled in reading order."""

    w: int
    h: int
    image: np.ndarray                  # [H, W, 3] float32
    source_indices: list               # length w*h, row-major temporal order
    cell_size: tuple                   # (width, height) of one cell in pixels

    def cell(self, r, c):
        cw, ch = self.cell_size
        return self.image[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw, :]


def area_downscale(frame: np.ndarray, w: int, h: int) -> np.ndarray:
    """Box-filter downscale by integer factors (w, h); exact mean pooling."""
    fh, fw, c = frame.shape
    if fh % h or fw % w:
        raise ShapeError(
            f"frame {fh}x{fw} not divisible by scaling factors ({w}, {h})"
        )
    out = frame.reshape(fh // h, h, fw // w, w, c).mean(axis=(1, 3))
    return out.astype(np.float32)


def make_grid_frameset(frames, w: int, h: int, source_indices=None):
    """Pack frames into ``len(frames) / (w*h)`` grid framesets.

    Cell (r, c) of a frameset holds source frame ``r*w + c`` of its group:
    temporal order reads like text, left-to-right then top-to-bottom.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected [T, H, W, 3] frames, got {frames.shape}")
    t, fh, fw, _ = frames.shape
    per = w * h
    if t % per:
        raise ShapeError(
            f"{t} frames do not divide into grids of {w}x{h} = {per}"
        )
    if source_indices is None:
        source_indices = list(range(t))
    grids = []
    ch, cw = fh // h, fw // w
    for g in range(t // per):
        image = np.empty((fh, fw, 3), dtype=np.float32)
        group = range(g * per, (g + 1) * per)
        for k, src in enumerate(group):
            r, c = divmod(k, w)
            image[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw, :] = \
                area_downscale(frames[src], w, h)
        grids.append(FramesetGrid(
            w=w, h=h, image=image,
            source_indices=[source_indices[i] for i in group],
            cell_size=(cw, ch)))
    return grids


def _axis_groups(d: int):
    """Split d channels into three near-even, even-sized groups."""
    if d < 6 or d % 2:
        raise ConfigError(
            f"3-D positional encoding needs an even width of at least 6, "
            f"got {d}"
        )
    base = d // 3
    if base % 2:
        base -= 1
    groups = [base, base, d - 2 * base]
    if groups[2] % 2:
        groups[1] += 1
        groups[2] -= 1
    return groups


def fixed_3d_positions(grid_t: int, grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Deterministic sinusoidal table over a (t, y, x) lattice.

    Returns ``[t*h*w + 1, d]``: row 0 is the all-zero CLS position, then
    lattice points in row-major (t, y, x) order. Channels split into three
    groups encoding the axes with the even/odd sine/cosine scheme at
    temperature 10000.
    """
    groups = _axis_groups(d)
    coords = np.stack(np.meshgrid(
        np.arange(grid_t), np.arange(grid_h), np.arange(grid_w),
        indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.zeros((coords.shape[0] + 1, d), dtype=np.float32)
    offset = 0
    for axis, g in enumerate(groups):
        pos = coords[:, axis].astype(np.float64)[:, None]
        i = np.arange(g // 2, dtype=np.float64)[None, :]
        freq = 1.0 / np.power(10000.0, 2.0 * i / g)
        out[1:, offset:offset + g:2] = np.sin(pos * freq)
        out[1:, offset + 1:offset + g:2] = np.cos(pos * freq)
        offset += g
    return out


def frameset_positions(w: int, h: int, patches_h: int, patches_w: int,
                       d: int) -> np.ndarray:
    """Per-token 3-D positions for one frameset's token sequence.

    Each patch is assigned the temporal index of the grid cell under its
    center, plus its global row/column within the frameset. Returns
    ``[patches_h*patches_w + 1, d]`` with the CLS row at zero.
    """
    table = fixed_3d_positions(w * h, patches_h, patches_w, d)
    rows = [0]  # CLS
    for py in range(patches_h):
        for px in range(patches_w):
            cy = (py + 0.5) * h / patches_h   # cell row under patch center
            cx = (px + 0.5) * w / patches_w
            tcell = int(cy) * w + int(cx)
            rows.append(1 + (tcell * patches_h + py) * patches_w + px)
    return table[rows]


class DualPathModel(AdaptedModel):
    """Both adaptation paths over one frozen backbone parameter set."""

    method = "dualpath"

    def __init__(self, backbone: Backbone, spec: AdaptationSpec, seed: int,
                 enable_spatial: bool = True, enable_temporal: bool = True):
        super().__init__(backbone, spec, seed)
        if not (enable_spatial or enable_temporal):
            raise ConfigError("at least one path must be enabled")
        self.enable_spatial = enable_spatial
        self.enable_temporal = enable_temporal
        bspec = backbone.spec
        d = bspec.width
        per_grid = spec.grid_w * spec.grid_h
        if spec.frames % per_grid:
            raise ConfigError(
                f"temporal frame count {spec.frames} not divisible by "
                f"w*h = {per_grid}"
            )
        if spec.frames % spec.spatial_frames:
            raise ConfigError(
                f"spatial frame count {spec.spatial_frames} must divide "
                f"temporal count {spec.frames}"
            )
        ew, eh = bspec.image_size
        if ew % spec.grid_w or eh % spec.grid_h:
            raise ConfigError(
                f"image {bspec.image_size} not divisible by scaling "
                f"factors ({spec.grid_w}, {spec.grid_h})"
            )
        self.t_grids = spec.frames // per_grid

        rng = self.rng
        if enable_spatial:
            # Trainable copies of the frozen token embellishments: identical
            # at init so the path starts exactly at the pretrained function.
            self.sp_cls = Tensor(backbone.params["cls_token"].data.copy(),
                                 requires_grad=True)
            self.sp_pos = Tensor(backbone.params["pos_embed"].data.copy(),
                                 requires_grad=True)
            self._register({"dualpath.spatial.cls_token": self.sp_cls,
                            "dualpath.spatial.pos_embed": self.sp_pos})
            self.sp_adapters = []
            for i in range(bspec.depth):
                a_mha = Adapter(rng, d, spec.bottleneck, spec.scale,
                                spec.activation, placement="parallel_mha")
                a_mlp = Adapter(rng, d, spec.bottleneck, spec.scale,
                                spec.activation, placement="parallel_mlp")
                self.sp_adapters.append((a_mha, a_mlp))
                self._register(a_mha.named(f"dualpath.spatial.blocks.{i}.mha"))
                self._register(a_mlp.named(f"dualpath.spatial.blocks.{i}.mlp"))

        if enable_temporal:
            self.tp_cls = Tensor(backbone.params["cls_token"].data.copy(),
                                 requires_grad=True)
            self._register({"dualpath.temporal.cls_token": self.tp_cls})
            gh, gw = bspec.grid
            # Constant table, never trainable and never checkpointed. The
            # raw sin/cos table has RMS ~0.7, which would drown the patch
            # content at the backbone's embedding scale; normalize it to the
            # backbone's own positional-table scale so position and content
            # stay commensurate.
            pos_scale = float(backbone.params["pos_embed"].data.std())
            table = frameset_positions(spec.grid_w, spec.grid_h, gh, gw, d)
            self.tp_pos = Tensor(table * np.float32(pos_scale / 0.707))
            self.tp_adapters = []
            for i in range(bspec.depth):
                a_pre = (Adapter(rng, d, spec.bottleneck, spec.scale,
                                 spec.activation, placement="pre_mha")
                         if spec.ssv2_mode else None)
                a_mha = Adapter(rng, d, spec.bottleneck, spec.scale,
                                spec.activation, placement="serial_mha")
                a_mlp = Adapter(rng, d, spec.bottleneck, spec.scale,
                                spec.activation, placement="serial_mlp")
                self.tp_adapters.append((a_pre, a_mha, a_mlp))
                if a_pre is not None:
                    self._register(
                        a_pre.named(f"dualpath.temporal.blocks.{i}.pre"))
                self._register(a_mha.named(f"dualpath.temporal.blocks.{i}.mha"))
                self._register(a_mlp.named(f"dualpath.temporal.blocks.{i}.mlp"))

        in_dim = d * (int(enable_spatial) + int(enable_temporal))
        self.cls_w1 = Tensor(
            (rng.standard_normal((in_dim, d)) / np.sqrt(in_dim)).astype(np.float32),
            requires_grad=True)
        self.cls_b1 = Tensor(np.zeros(d, np.float32), requires_grad=True)
        self.cls_w2 = Tensor(
            (rng.standard_normal((d, spec.n_classes)) / np.sqrt(d)).astype(np.float32),
            requires_grad=True)
        self.cls_b2 = Tensor(np.zeros(spec.n_classes, np.float32),
                             requires_grad=True)
        self._register({
            "dualpath.classifier.w1": self.cls_w1,
            "dualpath.classifier.b1": self.cls_b1,
            "dualpath.classifier.w2": self.cls_w2,
            "dualpath.classifier.b2": self.cls_b2,
        })

    # -- per-block functions -------------------------------------------------

    def spatial_block_forward(self, h, i, capture=None):
        """z = h + MHA(LN h) + A(LN h); out = z + MLP(LN z) + A(LN z)."""
        bb = self.backbone
        a_mha, a_mlp = self.sp_adapters[i]
        normed1 = bb.ln1(h, i)
        z = h + bb.attn(normed1, i, capture=capture) + a_mha.bottleneck(normed1)
        normed2 = bb.ln2(z, i)
        return z + bb.mlp(normed2, i) + a_mlp.bottleneck(normed2)

    def temporal_block_forward(self, h, i, capture=None):
        """z = h + A(MHA(LN h)); out = z + A(MLP(LN z)); serial adapters."""
        bb = self.backbone
        a_pre, a_mha, a_mlp = self.tp_adapters[i]
        normed1 = bb.ln1(h, i)
        if a_pre is not None:
            normed1 = a_pre(normed1)
        z = h + a_mha(bb.attn(normed1, i, capture=capture))
        return z + a_mlp(bb.mlp(bb.ln2(z, i), i))

    # -- paths ----------------------------------------------------------------

    def spatial_path(self, frames, capture=None):
        """Frames ``[B, T_S, H, W, 3]`` -> mean CLS ``[B, d]`` (order-free)."""
        flat, b, t = self._flatten_frames(frames)
        bb = self.backbone
        h = bb.tokenize(flat, cls_token=self.sp_cls, pos_embed=self.sp_pos)
        for i in range(bb.spec.depth):
            cap = capture if i == bb.spec.depth - 1 else None
            h = self.spatial_block_forward(h, i, capture=cap)
        cls = bb.final_norm(h)[:, 0, :]
        return cls.reshape((b, t, -1)).mean(axis=1)

    def temporal_path(self, framesets, capture=None):
        """Frameset images ``[B, T_G, H, W, 3]`` -> mean CLS ``[B, d]``."""
        flat, b, t = self._flatten_frames(framesets)
        bb = self.backbone
        h = bb.tokenize(flat, cls_token=self.tp_cls, pos_embed=self.tp_pos)
        for i in range(bb.spec.depth):
            cap = capture if i == bb.spec.depth - 1 else None
            h = self.temporal_block_forward(h, i, capture=cap)
        cls = bb.final_norm(h)[:, 0, :]
        return cls.reshape((b, t, -1)).mean(axis=1)

    # -- end to end -------------------------------------------------------------

    def spatial_subset(self, frames):
        step = self.spec.frames // self.spec.spatial_frames
        return frames[:, ::step][:, :self.spec.spatial_frames]

    def pack_framesets(self, frames):
        """[B, T, H, W, 3] -> [B, T_G, H, W, 3] grid frameset images."""
        frames = np.asarray(frames, dtype=np.float32)
        out = np.empty(
            (frames.shape[0], self.t_grids) + frames.shape[2:], np.float32)
        for i in range(frames.shape[0]):
            grids = make_grid_frameset(frames[i], self.spec.grid_w,
                                       self.spec.grid_h)
            for g, grid in enumerate(grids):
                out[i, g] = grid.image
        return out

    def path_outputs(self, frames, capture_sp=None, capture_tp=None):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim == 4:
            frames = frames[None]
        if frames.shape[1] != self.spec.frames:
            raise ShapeError(
                f"expected {self.spec.frames} frames per clip, "
                f"got {frames.shape[1]}"
            )
        feats = []
        if self.enable_spatial:
            feats.append(self.spatial_path(self.spatial_subset(frames),
                                           capture=capture_sp))
        if self.enable_temporal:
            feats.append(self.temporal_path(self.pack_framesets(frames),
                                            capture=capture_tp))
        return feats

    def classify(self, feats) -> Tensor:
        y = feats[0] if len(feats) == 1 else concat(feats, axis=1)
        hidden = ops.gelu(ops.linear(y, self.cls_w1, self.cls_b1))
        return ops.linear(hidden, self.cls_w2, self.cls_b2)

    def forward(self, frames) -> Tensor:
        return self.classify(self.path_outputs(frames))


def build_dualpath_model(backbone: Backbone, spec: AdaptationSpec,
                         seed: int = 0, enable_spatial: bool = True,
                         enable_temporal: bool = True) -> DualPathModel:
    """Assemble the two-path model; trainable set = adapters + CLS tokens +
    spatial positional table + classifier."""
    if spec.method != "dualpath":
        raise ConfigError(f"spec method is {spec.method!r}, not 'dualpath'")
    return DualPathModel(backbone, spec, seed,
                         enable_spatial=enable_spatial,
                         enable_temporal=enable_temporal)
