"""Deterministic synthetic video tasks.

Two families with opposite information structure:

* ``appearance``: the label is a pure function of what the shape looks like
  (color and outline); its trajectory is sampled independently of the
  label, so frame 0 alone solves the task.
* ``motion``: the shape hops around a closed ring of ``frames`` cells and
  the label is the signed step size (rotation direction x angular speed).
  Every |step| is coprime to the ring length, so each clip visits *all*
  ring cells exactly once from a uniform start phase: single frames and
  unordered frame bags carry zero label information, and only temporal
  order separates the classes.
* ``combined``: label = (motion class, color class) pair; both signals are
  required.

Clips are bitwise-deterministic in ``(seed, clip_id)`` and labels are
assigned round-robin by clip id.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .tensor import ConfigError

__all__ = [
    "SyntheticTaskSpec",
    "VideoClip",
    "generate_clip",
    "make_splits",
    "shape_mask",
    "clip_shape_masks",
    "export_clips",
    "PALETTE",
]

# Eight well-separated colors; appearance classes each own one.
PALETTE = np.array([
    [0.95, 0.25, 0.20],
    [0.20, 0.90, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.90, 0.25, 0.90],
    [0.20, 0.90, 0.90],
    [0.95, 0.60, 0.20],
    [0.85, 0.85, 0.85],
], dtype=np.float32)

SHAPES = ("disc", "square", "triangle")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str                       # appearance | motion | combined
    canvas: int = 32
    n_classes: int = 8
    frames: int = 16
    shapes: tuple = SHAPES
    speeds: tuple = (1, 3, 5, 7)    # ring steps; |s| coprime to `frames`
    colors: tuple = tuple(range(len(PALETTE)))  # palette indices in play
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("appearance", "motion", "combined"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.canvas < 16:
            raise ConfigError("canvas too small to render shapes and a ring")
        if self.frames < 2:
            raise ConfigError("clips need at least two frames")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ConfigError(f"shape vocabulary must draw from {SHAPES}")
        if not self.colors or any(not 0 <= c < len(PALETTE)
                                  for c in self.colors):
            raise ConfigError(
                f"color vocabulary must index the {len(PALETTE)}-color palette"
            )
        for s in self.speeds:
            if s <= 0 or math.gcd(s, self.frames) != 1:
                raise ConfigError(
                    f"ring step {s} must be positive and coprime to the "
                    f"ring length {self.frames} so every cell is visited"
                )
        residues = {s % self.frames for s in self.speeds}
        residues |= {(-s) % self.frames for s in self.speeds}
        if len(residues) != 2 * len(self.speeds):
            raise ConfigError(
                f"speeds {self.speeds} alias on a ring of {self.frames}"
            )
        if self.kind == "motion" and self.n_classes != 2 * len(self.speeds):
            raise ConfigError(
                f"motion task has 2 x {len(self.speeds)} classes, "
                f"n_classes={self.n_classes} does not match"
            )
        if self.kind == "appearance" and not 2 <= self.n_classes <= len(PALETTE):
            raise ConfigError(
                f"appearance task supports 2..{len(PALETTE)} classes"
            )
        if self.kind == "combined" and \
                self.n_classes != 2 * len(self.speeds) * 2:
            raise ConfigError(
                "combined task has (2 x speeds) x 2 color classes; "
                f"n_classes={self.n_classes} does not match"
            )

    @property
    def motion_steps(self):
        """Signed ring steps, one per motion class."""
        return [s for s in self.speeds] + [-s for s in self.speeds]

    @property
    def shape_radius(self):
        return self.canvas * 0.11

    @property
    def ring_radius(self):
        return self.canvas * 0.30


@dataclass
class VideoClip:
    frames: np.ndarray              # [T, H, W, 3] float32 in [0, 1]
    label: int
    clip_id: int
    source_indices: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _ring_center(spec, cell):
    angle = 2.0 * np.pi * cell / spec.frames - np.pi / 2.0
    c = spec.canvas / 2.0
    return (c + spec.ring_radius * np.sin(angle),
            c + spec.ring_radius * np.cos(angle))


def shape_mask(canvas: int, shape: str, cy: float, cx: float,
               radius: float) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] for one shape instance."""
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float32)
    yy += 0.5
    xx += 0.5
    if shape == "disc":
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        alpha = radius + 0.5 - dist
    elif shape == "square":
        dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        alpha = radius + 0.5 - dist
    elif shape == "triangle":
        # Equilateral triangle pointing up; inside = min signed distance
        # to the three edges (positive inside).
        r = radius * 1.4
        verts = [(cy - r, cx),
                 (cy + r * 0.5, cx + r * math.sqrt(3) / 2),
                 (cy + r * 0.5, cx - r * math.sqrt(3) / 2)]
        dmin = None
        for k in range(3):
            y1, x1 = verts[k]
            y2, x2 = verts[(k + 1) % 3]
            ey, ex = y2 - y1, x2 - x1
            norm = math.hypot(ey, ex)
            # Left-of-edge signed distance (vertices are clockwise in
            # image coordinates, so inside is positive).
            d = ((yy - y1) * ex - (xx - x1) * ey) / norm
            dmin = d if dmin is None else np.minimum(dmin, d)
        alpha = dmin + 0.5
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return np.clip(alpha, 0.0, 1.0).astype(np.float32)


def _clip_rng(spec, clip_id):
    return np.random.default_rng([spec.seed, int(clip_id)])


def _class_attrs(spec, label, rng):
    """Per-clip shape/color/step, honoring the task kind's independences."""
    steps = spec.motion_steps
    if spec.kind == "motion":
        step = steps[label]
        shape = spec.shapes[rng.integers(len(spec.shapes))]
        color = PALETTE[spec.colors[rng.integers(len(spec.colors))]]
    elif spec.kind == "appearance":
        shape = spec.shapes[label % len(spec.shapes)]
        color = PALETTE[label]
        step = steps[rng.integers(len(steps))]
    else:  # combined: label = motion_class * 2 + color_class
        step = steps[label // 2]
        color = PALETTE[spec.colors[label % 2]]
        shape = spec.shapes[rng.integers(len(spec.shapes))]
    return shape, color, step


def generate_clip(spec: SyntheticTaskSpec, clip_id: int) -> VideoClip:
    """Render one clip; bitwise-deterministic in (spec.seed, clip_id)."""
    label = int(clip_id) % spec.n_classes
    rng = _clip_rng(spec, clip_id)
    shape, color, step = _class_attrs(spec, label, rng)
    phase = int(rng.integers(spec.frames))
    radius = spec.shape_radius

    cells = [(phase + t * step) % spec.frames for t in range(spec.frames)]
    positions = [_ring_center(spec, c) for c in cells]
    frames = np.empty((spec.frames, spec.canvas, spec.canvas, 3), np.float32)
    for t, (cy, cx) in enumerate(positions):
        alpha = shape_mask(spec.canvas, shape, cy, cx, radius)
        img = alpha[:, :, None] * color[None, None, :]
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise,
                                   img.shape).astype(np.float32)
        frames[t] = np.clip(img, 0.0, 1.0)
    return VideoClip(
        frames=frames, label=label, clip_id=int(clip_id),
        source_indices=list(range(spec.frames)),
        meta={"shape": shape, "color": color.tolist(), "step": int(step),
              "phase": phase, "cells": cells,
              "positions": positions, "radius": radius})


def clip_shape_masks(spec: SyntheticTaskSpec, clip: VideoClip) -> np.ndarray:
    """Ground-truth boolean shape masks ``[T, H, W]`` for a generated clip."""
    masks = np.zeros((spec.frames, spec.canvas, spec.canvas), bool)
    for t, (cy, cx) in enumerate(clip.meta["positions"]):
        masks[t] = shape_mask(spec.canvas, clip.meta["shape"], cy, cx,
                              clip.meta["radius"]) > 0.5
    return masks


def make_splits(spec: SyntheticTaskSpec, n_train: int, n_eval: int):
    """Disjoint deterministic splits: train ids [0, n_train), eval after."""
    train = [generate_clip(spec, i) for i in range(n_train)]
    eval_ = [generate_clip(spec, n_train + i) for i in range(n_eval)]
    return train, eval_


def export_clips(clips, out_dir, index_name="labels.txt"):
    """One directory per clip (frames in the checkpoint blob format) plus a
    plain-text label index."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for clip in clips:
        sub = os.path.join(out_dir, f"clip_{clip.clip_id:06d}")
        os.makedirs(sub, exist_ok=True)
        save_checkpoint(os.path.join(sub, "frames.dpck"),
                        {"frames": clip.frames})
        lines.append(f"clip_{clip.clip_id:06d} {clip.label}")
    with open(os.path.join(out_dir, index_name), "w") as f:
        f.write("\n".join(lines) + "\n")
