"""Run configuration: plain-text key-value sections, reproducible runs.

The file format is a TOML-style subset: ``[section]`` headers, ``key =
value`` lines, ``#`` comments. Values are ints, floats, booleans, quoted
or bare strings, and flat ``[a, b, c]`` lists. Every run is reproducible
from (config, seed) alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .adapters import AdaptationSpec
from .datagen import SyntheticTaskSpec
from .tensor import ConfigError
from .vit import VIT_B_16, BackboneSpec

__all__ = ["RunConfig", "parse_config_text", "load_config", "TOY_BACKBONE"]

TOY_BACKBONE = BackboneSpec(depth=4, width=64, heads=4, patch_size=8,
                            image_size=(32, 32))

BACKBONE_PRESETS = {"vit_b16": VIT_B_16, "toy": TOY_BACKBONE}


def _parse_scalar(tok: str):
    tok = tok.strip()
    if tok.startswith('"') and tok.endswith('"'):
        return tok[1:-1]
    if tok in ("true", "false"):
        return tok == "true"
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    return tok


def parse_config_text(text: str) -> dict:
    """Parse the TOML-style subset into {section: {key: value}}."""
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        if section is None:
            raise ConfigError(f"config line {lineno}: key outside a [section]")
        key, val = (s.strip() for s in line.split("=", 1))
        if val.startswith("[") and val.endswith("]"):
            inner = val[1:-1].strip()
            out[section][key] = tuple(
                _parse_scalar(v) for v in inner.split(",") if v.strip())
        else:
            out[section][key] = _parse_scalar(val)
    return out


@dataclass
class OptimizerConfig:
    learning_rate: float = 3e-4   # paper default for the appearance-heavy set
    weight_decay: float = 5e-2
    batch_size: int = 16          # desk scale; the paper trains at 64+
    total_steps: int = 2000       # desk scale substitute for epoch counts
    cosine: bool = True
    eval_every: int = 100

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 \
                or self.total_steps <= 0 or self.eval_every <= 0:
            raise ConfigError(f"invalid optimizer settings: {self}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


@dataclass
class RunConfig:
    backbone: BackboneSpec
    adaptation: AdaptationSpec
    task: SyntheticTaskSpec
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    n_train: int = 64
    n_eval: int = 64
    seed: int = 0
    out_dir: str = "runs/out"

    def validate(self):
        self.optimizer.validate()
        if self.adaptation.n_classes != self.task.n_classes:
            raise ConfigError(
                f"model head has {self.adaptation.n_classes} classes but the "
                f"task defines {self.task.n_classes}"
            )
        if self.task.frames % self.adaptation.frames:
            raise ConfigError(
                f"model frame count {self.adaptation.frames} must divide "
                f"clip length {self.task.frames}"
            )
        cw, ch = self.backbone.image_size
        if (self.task.canvas, self.task.canvas) != (cw, ch):
            raise ConfigError(
                f"task canvas {self.task.canvas} does not match backbone "
                f"image size {self.backbone.image_size}"
            )
        if self.n_train <= 0 or self.n_eval <= 0:
            raise ConfigError("split sizes must be positive")
        return self

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        bsec = dict(raw.get("backbone", {}))
        preset = bsec.pop("preset", None)
        if preset is not None:
            if preset not in BACKBONE_PRESETS:
                raise ConfigError(
                    f"unknown backbone preset {preset!r}; "
                    f"have {sorted(BACKBONE_PRESETS)}"
                )
            base = BACKBONE_PRESETS[preset]
            defaults = dict(
                depth=base.depth, width=base.width, heads=base.heads,
                patch_size=base.patch_size,
                image_width=base.image_size[0],
                image_height=base.image_size[1],
                mlp_ratio=base.mlp_ratio)
        else:
            defaults = {}
        defaults.update(bsec)
        try:
            backbone = BackboneSpec(
                depth=defaults["depth"], width=defaults["width"],
                heads=defaults["heads"], patch_size=defaults["patch_size"],
                image_size=(defaults["image_width"], defaults["image_height"]),
                mlp_ratio=defaults.get("mlp_ratio", 4.0))
        except KeyError as e:
            raise ConfigError(f"backbone section missing key {e}") from None

        asec = dict(raw.get("adaptation", {}))
        tsec = dict(raw.get("task", {}))
        n_train = tsec.pop("n_train", 64)
        n_eval = tsec.pop("n_eval", 64)
        if "speeds" in tsec:
            tsec["speeds"] = tuple(int(s) for s in tsec["speeds"])
        if "colors" in tsec:
            tsec["colors"] = tuple(int(c) for c in tsec["colors"])
        if "shapes" in tsec:
            tsec["shapes"] = tuple(tsec["shapes"])
        if "conv3d_kernel" in asec:
            asec["conv3d_kernel"] = tuple(int(s) for s in asec["conv3d_kernel"])
        try:
            adaptation = AdaptationSpec(**asec)
            task = SyntheticTaskSpec(**tsec)
        except TypeError as e:
            raise ConfigError(f"bad config key: {e}") from None

        osec = dict(raw.get("optimizer", {}))
        try:
            optimizer = OptimizerConfig(**osec)
        except TypeError as e:
            raise ConfigError(f"bad optimizer key: {e}") from None

        rsec = dict(raw.get("run", {}))
        cfg = cls(backbone=backbone, adaptation=adaptation, task=task,
                  optimizer=optimizer, n_train=n_train, n_eval=n_eval,
                  seed=rsec.get("seed", 0),
                  out_dir=rsec.get("out_dir", "runs/out"))
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(parse_config_text(f.read()))

    def to_dict(self) -> dict:
        """Round-trippable snapshot (stored inside checkpoints)."""
        a, t, o = self.adaptation, self.task, self.optimizer
        return {
            "backbone": {
                "depth": self.backbone.depth, "width": self.backbone.width,
                "heads": self.backbone.heads,
                "patch_size": self.backbone.patch_size,
                "image_width": self.backbone.image_size[0],
                "image_height": self.backbone.image_size[1],
                "mlp_ratio": self.backbone.mlp_ratio,
            },
            "adaptation": {
                "method": a.method, "n_classes": a.n_classes,
                "bottleneck": a.bottleneck, "scale": a.scale,
                "prompt_tokens": a.prompt_tokens, "activation": a.activation,
                "frames": a.frames, "spatial_frames": a.spatial_frames,
                "grid_w": a.grid_w, "grid_h": a.grid_h,
                "ssv2_mode": a.ssv2_mode,
                "conv3d_kernel": list(a.conv3d_kernel),
            },
            "task": {
                "kind": t.kind, "canvas": t.canvas,
                "n_classes": t.n_classes, "frames": t.frames,
                "shapes": list(t.shapes), "colors": list(t.colors),
                "speeds": list(t.speeds), "noise": t.noise, "seed": t.seed,
                "n_train": self.n_train, "n_eval": self.n_eval,
            },
            "optimizer": {
                "learning_rate": o.learning_rate,
                "weight_decay": o.weight_decay,
                "batch_size": o.batch_size, "total_steps": o.total_steps,
                "cosine": o.cosine, "eval_every": o.eval_every,
            },
            "run": {"seed": self.seed, "out_dir": self.out_dir},
        }


def load_config(path) -> RunConfig:
    return RunConfig.from_file(path)
