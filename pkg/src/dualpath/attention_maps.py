"""Final-block CLS attention extraction and graymap export.

For a trained two-path model, the CLS-query attention row of the last
transformer block (averaged over heads) is reshaped to the patch grid,
bilinearly upsampled to the input resolution, and written as binary PGM
(P5) files: one per spatial-path frame and one per temporal-path frameset.
"""

from __future__ import annotations

import os

import numpy as np

from .dual_path import DualPathModel
from .tensor import ConfigError

__all__ = ["bilinear_upsample", "write_pgm", "extract_cls_attention",
           "dump_attention"]


def bilinear_upsample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D array."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32)
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def write_pgm(path, arr: np.ndarray):
    """8-bit binary portable graymap; input is clipped to [0, 1]."""
    gray = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.tobytes())


def extract_cls_attention(model: DualPathModel, frames: np.ndarray):
    """Run one clip; return per-path CLS attention rows.

    Returns ``{"spatial": [T_S, n], "temporal": [T_G, n]}`` where each row
    is the head-averaged final-block attention distribution of the CLS
    query over all n tokens (CLS itself included; rows sum to one).
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 4:
        frames = frames[None]
    if frames.shape[0] != 1:
        raise ConfigError("attention dumping runs one clip at a time")
    cap_sp: dict = {}
    cap_tp: dict = {}
    model.path_outputs(frames, capture_sp=cap_sp, capture_tp=cap_tp)
    out = {}
    if model.enable_spatial:
        out["spatial"] = cap_sp["attn"][:, :, 0, :].mean(axis=1)
    if model.enable_temporal:
        out["temporal"] = cap_tp["attn"][:, :, 0, :].mean(axis=1)
    return out


def dump_attention(model: DualPathModel, frames: np.ndarray, out_dir: str):
    """Write one PGM per spatial frame and per temporal frameset.

    Returns a list of ``(path, raw_row, grid_map)`` entries; ``raw_row`` is
    the full softmax row (sums to 1), ``grid_map`` the patch-grid reshaped
    attention over patch tokens before upsampling.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = extract_cls_attention(model, frames)
    gh, gw = model.backbone.spec.grid
    ew, eh = model.backbone.spec.image_size
    entries = []
    for key, prefix in (("spatial", "spatial"), ("temporal", "temporal")):
        if key not in rows:
            continue
        for i, row in enumerate(rows[key]):
            grid = row[1:].reshape(gh, gw)
            up = bilinear_upsample(grid, eh, ew)
            peak = up.max()
            vis = up / peak if peak > 0 else up
            path = os.path.join(out_dir, f"{prefix}_{i:02d}.pgm")
            write_pgm(path, vis)
            entries.append((path, row, grid))
    return entries
