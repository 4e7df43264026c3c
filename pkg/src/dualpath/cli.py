"""Command-line driver: train, eval, ablate, cost, dump-attention.

Exit code 0 on success; any failure prints a single-line error to stderr
and exits nonzero.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import load_config
from .costing import ViewSchedule, compare_methods, estimate_flops, render_table
from .datagen import generate_clip, make_splits
from .tensor import ConfigError


def _cmd_train(args):
    from .train import train
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    result = train(cfg)
    print(f"best top1 {result.best_accuracy:.3f}  "
          f"checkpoint {result.best_checkpoint}")
    print(f"metrics {result.metrics_path}")
    return 0


def _cmd_eval(args):
    from .train import evaluate, load_model_from_checkpoint, parse_views
    model, cfg, step = load_model_from_checkpoint(args.ckpt)
    clips_views, spatial_views = parse_views(args.views)
    _, eval_clips = make_splits(cfg.task, cfg.n_train, cfg.n_eval)
    result = evaluate(model, eval_clips, cfg.adaptation.frames,
                      views=(clips_views, spatial_views))
    line = f"top1 {result['top1']:.4f}"
    if "top5" in result:
        line += f"  top5 {result['top5']:.4f}"
    print(f"{line}  (checkpoint step {step}, "
          f"views {cfg.adaptation.frames}x{clips_views}x{spatial_views})")
    return 0


def _cmd_ablate(args):
    from .train import ablate
    cfg = load_config(args.config)
    rows = ablate(cfg, args.mode)
    cols = sorted({k for row in rows for k in row})
    print("  ".join(f"{c:>16s}" for c in cols))
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c, "")
            if isinstance(v, float):
                cells.append(f"{v:>16.3f}")
            else:
                cells.append(f"{str(v):>16s}")
        print("  ".join(cells))
    return 0


def _cmd_cost(args):
    cfg = load_config(args.config)
    sched = ViewSchedule(frames=cfg.adaptation.frames, clips=args.clips,
                         spatial=args.spatial)
    specs = [cfg.adaptation]
    if args.compare:
        from dataclasses import replace
        specs.append(replace(cfg.adaptation, method=args.compare))
    rows = compare_methods(specs, cfg.backbone, sched)
    print(render_table(rows))
    main_report = estimate_flops(cfg.adaptation, cfg.backbone, sched)
    print(f"\n{cfg.adaptation.method}: ~{main_report.trainable_params / 1e6:.1f}M "
          f"trainable of {main_report.total_params / 1e6:.1f}M total; "
          f"{main_report.total_gflops:.1f} GFLOPs at views "
          f"{sched.frames}x{sched.clips}x{sched.spatial}")
    return 0


def _cmd_dump_attention(args):
    from .attention_maps import dump_attention
    from .train import load_model_from_checkpoint
    model, cfg, _ = load_model_from_checkpoint(args.ckpt)
    if model.method != "dualpath":
        raise ConfigError("attention dumping needs a dualpath checkpoint")
    clip = generate_clip(cfg.task, args.clip)
    stride = cfg.task.frames // cfg.adaptation.frames
    frames = clip.frames[::stride][:cfg.adaptation.frames]
    entries = dump_attention(model, frames, args.out)
    for path, row, _ in entries:
        print(f"{path}  (row sum {float(np.sum(row)):.6f})")
    print(f"{len(entries)} maps written to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dualpath",
        description="Two-path parameter-efficient video adaptation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--views", default="1x1",
                   help="clips x spatial crops, e.g. 3x1")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="train and compare model variants")
    a.add_argument("--config", required=True)
    a.add_argument("--mode", required=True,
                   choices=["no_temporal", "no_spatial", "ts_sweep",
                            "grid_sweep"])
    a.set_defaults(fn=_cmd_ablate)

    c = sub.add_parser("cost", help="analytic parameter and FLOP report")
    c.add_argument("--config", required=True)
    c.add_argument("--compare", default=None,
                   help="second method to cost at the same schedule")
    c.add_argument("--clips", type=int, default=1)
    c.add_argument("--spatial", type=int, default=1)
    c.set_defaults(fn=_cmd_cost)

    d = sub.add_parser("dump-attention",
                       help="write CLS attention graymaps for one clip")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--clip", type=int, required=True)
    d.add_argument("--out", default="attention_maps")
    d.set_defaults(fn=_cmd_dump_attention)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # single-line error contract
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
