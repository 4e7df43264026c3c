"""Training, evaluation, and ablation drivers.

Deterministic end to end: parameter init, batch order, optimizer updates,
and evaluation views all derive from the run config and seed. Metrics are
line-delimited JSON records; wall time is printed but never persisted, so
identical (config, seed) runs produce identical metrics files.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .adapters import build_adapted_model
from .checkpoint import load_checkpoint, save_checkpoint, verify_names
from .config import RunConfig
from .costing import ViewSchedule, count_trainable, estimate_flops
from .datagen import make_splits
from .dual_path import build_dualpath_model
from .tensor import ConfigError
from .optim import AdamW, cosine_lr
from .vit import Backbone, BackboneSpec

__all__ = [
    "build_model",
    "train",
    "TrainResult",
    "evaluate",
    "parse_views",
    "ablate",
    "load_model_from_checkpoint",
]


def build_model(cfg: RunConfig, enable_spatial=True, enable_temporal=True):
    """Backbone from the run seed, frozen, wrapped by the chosen method."""
    backbone = Backbone.init_random(cfg.backbone, seed=cfg.seed)
    if cfg.adaptation.method == "dualpath":
        return build_dualpath_model(
            backbone, cfg.adaptation, seed=cfg.seed + 1,
            enable_spatial=enable_spatial, enable_temporal=enable_temporal)
    return build_adapted_model(backbone, cfg.adaptation, seed=cfg.seed + 1)


def _frame_indices(clip_len: int, model_frames: int, offset: int = 0):
    stride = clip_len // model_frames
    return [offset + k * stride for k in range(model_frames)]


def _clip_batch(clips, model_frames, offset=0):
    idx = _frame_indices(clips[0].frames.shape[0], model_frames, offset)
    frames = np.stack([c.frames[idx] for c in clips])
    labels = np.array([c.label for c in clips], dtype=np.int64)
    return frames, labels


def _spatial_view(frames: np.ndarray, j: int) -> np.ndarray:
    """Deterministic crop variants: identity, horizontal flip, vertical flip."""
    if j == 0:
        return frames
    if j == 1:
        return frames[..., :, ::-1, :].copy()
    if j == 2:
        return frames[..., ::-1, :, :].copy()
    raise ConfigError("at most 3 spatial views are defined (0..2)")


def parse_views(text: str):
    """Parse 'CxS' into (clips, spatial)."""
    try:
        c, s = text.lower().split("x")
        return int(c), int(s)
    except ValueError:
        raise ConfigError(f"views must look like '3x1', got {text!r}") from None


def evaluate(model, clips, model_frames, views=(1, 1), batch_size=16):
    """Multi-view top-1 (and top-5 when applicable): logits are averaged
    over all views before the argmax; ties break to the lowest class."""
    n_clips_views, n_spatial = views
    if n_spatial > 3:
        raise ConfigError("at most 3 spatial views are defined")
    clip_len = clips[0].frames.shape[0]
    max_offset = clip_len - (clip_len // model_frames) * (model_frames - 1) - 1
    if n_clips_views == 1:
        offsets = [0]
    else:
        offsets = [round(i * max_offset / (n_clips_views - 1))
                   for i in range(n_clips_views)]

    n_classes = None
    top1 = top5 = 0
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        labels = np.array([c.label for c in chunk])
        acc_logits = None
        for off in offsets:
            frames, _ = _clip_batch(chunk, model_frames, offset=off)
            for j in range(n_spatial):
                logits = model.forward(_spatial_view(frames, j)).data
                acc_logits = logits if acc_logits is None else acc_logits + logits
        acc_logits /= len(offsets) * n_spatial
        n_classes = acc_logits.shape[1]
        pred = np.argmax(acc_logits, axis=1)  # lowest index wins ties
        top1 += int((pred == labels).sum())
        if n_classes >= 5:
            order = np.argsort(-acc_logits, axis=1, kind="stable")[:, :5]
            top5 += int(sum(labels[i] in order[i] for i in range(len(chunk))))
    result = {"top1": top1 / len(clips)}
    if n_classes is not None and n_classes >= 5:
        result["top5"] = top5 / len(clips)
    return result


@dataclass
class TrainResult:
    best_checkpoint: str
    last_checkpoint: str
    metrics_path: str
    best_accuracy: float
    final_loss: float
    history: list = field(default_factory=list)
    wall_time: float = 0.0


def train(cfg: RunConfig, enable_spatial=True, enable_temporal=True,
          log=print) -> TrainResult:
    """Full training run: AdamW over trainable parameters only, cosine
    schedule, periodic evaluation, best checkpoint retained."""
    cfg.validate()
    t0 = time.time()
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = build_model(cfg, enable_spatial, enable_temporal)
    train_clips, eval_clips = make_splits(cfg.task, cfg.n_train, cfg.n_eval)

    opt_cfg = cfg.optimizer
    opt = AdamW(model.trainable_parameters(), lr=opt_cfg.learning_rate,
                weight_decay=opt_cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 2)
    n_trainable = count_trainable(model)
    gflops = estimate_flops(
        cfg.adaptation, cfg.backbone,
        ViewSchedule(frames=cfg.adaptation.frames)).total_gflops \
        if cfg.adaptation.method != "dualpath" or (enable_spatial and enable_temporal) \
        else float("nan")

    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    best_path = os.path.join(cfg.out_dir, "best.dpck")
    last_path = os.path.join(cfg.out_dir, "last.dpck")
    history = []
    best_acc = -1.0
    loss_val = float("nan")
    order = []

    def write_metrics(step, loss_val, acc):
        rec = {"step": step, "train_loss": loss_val, "eval_accuracy": acc,
               "trainable_params": n_trainable, "gflops": gflops}
        history.append(rec)
        with open(metrics_path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    with open(metrics_path, "w"):
        pass  # truncate

    snapshot = cfg.to_dict()
    snapshot["ablation"] = {"enable_spatial": enable_spatial,
                            "enable_temporal": enable_temporal}
    for step in range(1, opt_cfg.total_steps + 1):
        if len(order) < opt_cfg.batch_size:
            order.extend(rng.permutation(len(train_clips)).tolist())
        picks = [train_clips[i] for i in order[:opt_cfg.batch_size]]
        order = order[opt_cfg.batch_size:]
        frames, labels = _clip_batch(picks, cfg.adaptation.frames)
        logits = model.forward(frames)
        loss = ops.cross_entropy(logits, labels)
        loss_val = loss.item()
        opt.zero_grad()
        loss.backward()
        lr_now = cosine_lr(opt_cfg.learning_rate, step, opt_cfg.total_steps) \
            if opt_cfg.cosine else opt_cfg.learning_rate
        opt.step(lr_now)

        if step % opt_cfg.eval_every == 0 or step == opt_cfg.total_steps:
            acc = evaluate(model, eval_clips, cfg.adaptation.frames)["top1"]
            write_metrics(step, loss_val, acc)
            if acc > best_acc:
                best_acc = acc
                save_checkpoint(best_path, model.trainable_parameters(),
                                config=snapshot, step=step)
            log(f"step {step:5d}  loss {loss_val:.4f}  eval top1 {acc:.3f}")

    save_checkpoint(last_path, model.trainable_parameters(),
                    config=snapshot, step=opt_cfg.total_steps)
    wall = time.time() - t0
    log(f"done in {wall:.1f}s (wall time; not part of the metrics file)")
    return TrainResult(best_checkpoint=best_path, last_checkpoint=last_path,
                       metrics_path=metrics_path, best_accuracy=best_acc,
                       final_loss=loss_val, history=history, wall_time=wall)


def load_model_from_checkpoint(path):
    """Rebuild the model from the stored config and load trainable tensors."""
    tensors, snapshot, step = load_checkpoint(path)
    if snapshot is None:
        raise ConfigError(f"{path} carries no config snapshot")
    cfg = RunConfig.from_dict(snapshot)
    flags = snapshot.get("ablation") or {}
    model = build_model(cfg,
                        enable_spatial=flags.get("enable_spatial", True),
                        enable_temporal=flags.get("enable_temporal", True))
    expected = {n: t.shape for n, t in model.trainable_parameters().items()}
    verify_names(tensors, expected)
    for name, tens in model.trainable_parameters().items():
        tens.data = tensors[name].astype(np.float32).copy()
    return model, cfg, step


def ablate(cfg: RunConfig, mode: str, log=print):
    """Train DualPath variants with a shared seed; emit side-by-side rows."""
    if cfg.adaptation.method != "dualpath":
        raise ConfigError("ablations are defined for the dualpath method")
    rows = []

    def run(tag, cfg_variant, **flags):
        sub = RunConfig(**{**cfg_variant.__dict__})
        sub.out_dir = os.path.join(cfg.out_dir, f"ablate_{mode}", tag)
        res = train(sub, log=lambda *a, **k: None, **flags)
        a = sub.adaptation
        sched = ViewSchedule(frames=a.frames)
        flops = estimate_flops(a, sub.backbone, sched).total_gflops \
            if flags.get("enable_spatial", True) and \
            flags.get("enable_temporal", True) else float("nan")
        row = {"variant": tag, "accuracy": res.best_accuracy,
               "trainable_params": count_trainable(
                   a, sub.backbone,
                   enable_spatial=flags.get("enable_spatial", True),
                   enable_temporal=flags.get("enable_temporal", True)),
               "gflops": flops}
        rows.append(row)
        log(f"{tag:>16s}  top1 {res.best_accuracy:.3f}  "
            f"params {row['trainable_params']:,}")
        return res

    if mode == "no_temporal":
        run("full", cfg)
        run("no_temporal", cfg, enable_temporal=False)
    elif mode == "no_spatial":
        run("full", cfg)
        run("no_spatial", cfg, enable_spatial=False)
    elif mode == "ts_sweep":
        for ts in sorted({1, 2, cfg.adaptation.frames // 2,
                          cfg.adaptation.frames}):
            if ts < 1 or cfg.adaptation.frames % ts:
                continue
            variant = RunConfig(**{**cfg.__dict__})
            adapt = {**cfg.adaptation.__dict__, "spatial_frames": ts}
            variant.adaptation = type(cfg.adaptation)(**adapt)
            run(f"ts_{ts}", variant)
    elif mode == "grid_sweep":
        ew, eh = cfg.backbone.image_size
        for w in (1, 2, 4, 8):
            if ew % w or eh % w or cfg.adaptation.frames % (w * w):
                continue
            variant = RunConfig(**{**cfg.__dict__})
            adapt = {**cfg.adaptation.__dict__, "grid_w": w, "grid_h": w}
            variant.adaptation = type(cfg.adaptation)(**adapt)
            res = run(f"w{w}xh{w}", variant)
            rows[-1]["t_grids"] = cfg.adaptation.frames // (w * w)
    else:
        raise ConfigError(
            f"unknown ablation mode {mode!r}; expected no_temporal, "
            f"no_spatial, ts_sweep, or grid_sweep"
        )
    return rows
