"""Run configuration: YAML schema, dotted-key overrides and validation.

A single ``RunConfig`` drives training, evaluation and inference.  All
ablation switches live here so that experiment variants are config sweeps
rather than code forks.  Every run writes its fully resolved config back
to disk before doing any work, and a checkpoint stores a hash of that
resolved config so that mismatched checkpoint/config pairs are refused.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

REGIMES = ("unsupervised", "weak", "mixed", "full")
CLS_HEAD_VARIANTS = ("simple", "none", "complex", "max_of_map")
ANOMALY_STRATEGIES = ("masked", "simplenet", "none")

# Perlin binarisation threshold when synth.perlin_threshold is left null.
# Pixel-labelled regimes keep synthetic anomalies small; label-free regimes
# need larger ones.
DEFAULT_PERLIN_THRESHOLD = {
    "unsupervised": 0.2,
    "weak": 0.2,
    "mixed": 0.6,
    "full": 0.6,
}

# (H, W) applied at read time per dataset layout/category.
DEFAULT_IMAGE_SIZE = {
    ("mvtec", None): (256, 256),
    ("visa", None): (256, 256),
    ("ksdd2", None): (640, 232),
    ("sensum", "capsule"): (192, 320),
    ("sensum", "softgel"): (144, 144),
}


@dataclass
class BackboneConfig:
    name: str = "wide_resnet50"
    weights_path: str | None = None
    pretrained: bool = True
    layers: list[int] = field(default_factory=lambda: [2, 3])
    init_seed: int = 1234


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_heads: float = 2e-4
    lr_adaptor: float = 1e-4
    weight_decay: float = 1e-5
    lr_decay_factor: float = 0.4
    lr_decay_epochs: list[int] = field(default_factory=lambda: [240, 270])
    grad_clip_norm: float = 1.0
    cache_features: bool = False
    device: str = "cpu"


@dataclass
class SynthConfig:
    sigma: float = 0.015
    perlin_threshold: float | None = None
    seed: int | None = None


@dataclass
class LossConfig:
    th: float = 0.5
    focal_alpha: float | None = 0.25
    focal_gamma: float = 2.0
    weighting_enabled: bool = True
    w_max: float = 3.0


@dataclass
class HeadsConfig:
    cls_width: int = 128


@dataclass
class AblateConfig:
    upscale: bool = True
    cls_head: str = "simple"
    anomaly_strategy: str = "masked"
    overlap_allowed: bool = False


@dataclass
class DataConfig:
    root: str | None = None
    layout: str = "manifest"
    category: str | None = None
    image_size: list[int] | None = None
    fold: int | None = None


@dataclass
class MixedConfig:
    ratio: float | None = None
    count: int | None = None


@dataclass
class EvalConfig:
    fpr_limit: float = 0.3
    batch_size: int = 16


@dataclass
class RunConfig:
    regime: str = "unsupervised"
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mixed: MixedConfig = field(default_factory=MixedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def perlin_threshold(self) -> float:
        if self.synth.perlin_threshold is not None:
            return self.synth.perlin_threshold
        return DEFAULT_PERLIN_THRESHOLD[self.regime]

    def image_size(self) -> tuple[int, int]:
        if self.data.image_size is not None:
            h, w = self.data.image_size
            return int(h), int(w)
        key = (self.data.layout, self.data.category)
        if key in DEFAULT_IMAGE_SIZE:
            return DEFAULT_IMAGE_SIZE[key]
        key = (self.data.layout, None)
        return DEFAULT_IMAGE_SIZE.get(key, (256, 256))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_dict(self) -> dict:
        """Config dict with regime-dependent defaults filled in."""
        d = self.to_dict()
        d["synth"]["perlin_threshold"] = self.perlin_threshold()
        d["data"]["image_size"] = list(self.image_size())
        return d

    def config_hash(self) -> str:
        """Stable hash of the resolved config, embedded in checkpoints."""
        blob = json.dumps(self.resolved_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "loss": LossConfig,
    "heads": HeadsConfig,
    "ablate": AblateConfig,
    "data": DataConfig,
    "mixed": MixedConfig,
    "eval": EvalConfig,
}


def _build_section(name: str, cls, values: dict):
    known = cls().__dict__
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    merged = {**known, **values}
    return cls(**merged)


def config_from_dict(raw: dict) -> RunConfig:
    """Build and validate a RunConfig from a plain nested dict."""
    raw = copy.deepcopy(raw or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if section is None:
            section = {}
        if not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
        kwargs[name] = _build_section(name, cls, section)
    for key in ("regime", "seed"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ConfigError(f"unknown config key '{sorted(raw)[0]}'")
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def _require(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def validate_config(cfg: RunConfig) -> None:
    _require(cfg.regime in REGIMES, "regime", f"must be one of {REGIMES}, got {cfg.regime!r}")
    _require(isinstance(cfg.seed, int), "seed", "must be an integer")

    t = cfg.train
    _require(t.epochs >= 1, "train.epochs", "must be >= 1")
    _require(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    _require(t.lr_heads > 0, "train.lr_heads", "must be > 0")
    _require(t.lr_adaptor > 0, "train.lr_adaptor", "must be > 0")
    _require(t.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    _require(0 < t.lr_decay_factor <= 1, "train.lr_decay_factor", "must be in (0, 1]")
    epochs = list(t.lr_decay_epochs)
    _require(
        all(epochs[i] < epochs[i + 1] for i in range(len(epochs) - 1)),
        "train.lr_decay_epochs",
        "must be strictly increasing",
    )
    _require(
        all(0 < e < t.epochs for e in epochs),
        "train.lr_decay_epochs",
        f"every entry must lie in (0, {t.epochs})",
    )
    _require(t.grad_clip_norm > 0, "train.grad_clip_norm", "must be > 0")

    s = cfg.synth
    _require(s.sigma >= 0, "synth.sigma", "must be >= 0")
    if s.perlin_threshold is not None:
        _require(-1 < s.perlin_threshold < 1, "synth.perlin_threshold", "must lie in (-1, 1)")

    lo = cfg.loss
    _require(lo.th > 0, "loss.th", "must be > 0")
    _require(lo.focal_gamma >= 0, "loss.focal_gamma", "must be >= 0")
    if lo.focal_alpha is not None:
        _require(0 < lo.focal_alpha < 1, "loss.focal_alpha", "must lie in (0, 1) or null")
    _require(lo.w_max >= 1, "loss.w_max", "must be >= 1")

    _require(cfg.heads.cls_width >= 1, "heads.cls_width", "must be >= 1")

    a = cfg.ablate
    _require(
        a.cls_head in CLS_HEAD_VARIANTS,
        "ablate.cls_head",
        f"must be one of {CLS_HEAD_VARIANTS}, got {a.cls_head!r}",
    )
    _require(
        a.anomaly_strategy in ANOMALY_STRATEGIES,
        "ablate.anomaly_strategy",
        f"must be one of {ANOMALY_STRATEGIES}, got {a.anomaly_strategy!r}",
    )

    _require(len(cfg.backbone.layers) >= 1, "backbone.layers", "must name at least one layer")
    _require(
        all(1 <= l <= 4 for l in cfg.backbone.layers),
        "backbone.layers",
        "layer indices must lie in 1..4",
    )

    m = cfg.mixed
    if m.ratio is not None:
        _require(0 <= m.ratio <= 1, "mixed.ratio", "must lie in [0, 1]")
    if m.count is not None:
        _require(m.count >= 0, "mixed.count", "must be >= 0")
    if cfg.regime == "mixed":
        _require(
            (m.ratio is None) != (m.count is None),
            "mixed",
            "regime 'mixed' requires exactly one of mixed.ratio or mixed.count",
        )

    _require(0 < cfg.eval.fpr_limit <= 1, "eval.fpr_limit", "must lie in (0, 1]")

    if cfg.data.image_size is not None:
        _require(len(cfg.data.image_size) == 2, "data.image_size", "must be [height, width]")
        h, w = cfg.data.image_size
        _require(
            h % 8 == 0 and w % 8 == 0 and h >= 32 and w >= 32,
            "data.image_size",
            "height and width must be multiples of 8 and >= 32",
        )


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML config file and apply ``key.subkey=value`` overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    for item in overrides or []:
        apply_override(raw, item)
    return config_from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, _, value = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: {item!r}")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override value for '{key}' is not valid YAML: {exc}") from exc
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}' descends into a non-mapping value")
    node[parts[-1]] = parsed


def save_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write the resolved-config snapshot; called before any real work."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.resolved_dict(), fh, sort_keys=True)
    return path
