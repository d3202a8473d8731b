"""Run configuration: dataclasses, strict YAML loading and hashing.

Unknown keys anywhere in the file are rejected. Relative paths resolve
against the directory holding the config file.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from .geometry import AugmentConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 8
    views_per_image: int = 2
    kappa: float = 10.0
    segments_per_view: int = 36
    kmeans_iters: int = 10
    anchors_per_view: int = 1024
    top_m: int = 32
    unknown_u: int = 64
    bank_depth: int = 2
    lr: float = 0.001
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    # weights of (contrastive, embedding consistency, semantic consistency)
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    semantic_temperature: float = 1.0
    hidden: int = 64
    embed_dim: Optional[int] = None
    checkpoint_every: int = 0
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        positive = ("iterations", "batch_size", "views_per_image", "kappa", "segments_per_view",
                    "kmeans_iters", "anchors_per_view", "top_m", "unknown_u", "hidden")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        for name in ("bank_depth", "lr", "poly_power", "momentum", "weight_decay", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be non-negative")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ConfigError("train.loss_weights needs three non-negative numbers")
        if self.semantic_temperature <= 0:
            raise ConfigError("train.semantic_temperature must be positive")


@dataclass
class RegionPriorConfig:
    method: str = "slic"  # slic | file
    n_regions: int = 36
    compactness: float = 10.0


@dataclass
class DatasetConfig:
    image_dir: str = ""
    region_prior_dir: Optional[str] = None
    gt_dir: Optional[str] = None
    region_prior: RegionPriorConfig = field(default_factory=RegionPriorConfig)


@dataclass
class EncoderConfig:
    kind: str = "stub"  # stub | clip
    palette: Optional[str] = None
    noise_sigma: float = 0.0
    stride: int = 1
    text_noise: float = 0.0
    seed: int = 0
    clip_name: str = "RN50"
    clip_pretrained: str = "openai"
    prompt_file: Optional[str] = None


@dataclass
class EvalConfig:
    image_dir: Optional[str] = None
    gt_dir: Optional[str] = None
    video_dir: Optional[str] = None  # frames/*.png and masks/*.png
    known_classes: List[str] = field(default_factory=list)
    unknown_classes: List[str] = field(default_factory=list)
    fold: int = 0
    knn_k: int = 20
    segments: int = 36
    track_top_r: int = 5
    track_radius: int = 12


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    @property
    def class_names(self):
        return list(self.eval.known_classes) + list(self.eval.unknown_classes)


def _strip_optional(tp):
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = _strip_optional(hints[key])
        sub = where + "." + key if where else key
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, sub)
        elif get_origin(tp) is tuple and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _resolve(base, p):
    if p is None:
        return None
    path = Path(p)
    return str(path if path.is_absolute() else (base / path))


def from_dict(data, base_dir=None, check_paths=False):
    cfg = _build(RunConfig, data or {}, "")
    base = Path(base_dir) if base_dir is not None else None
    if base is not None:
        d = cfg.dataset
        d.image_dir = _resolve(base, d.image_dir) if d.image_dir else d.image_dir
        d.region_prior_dir = _resolve(base, d.region_prior_dir)
        d.gt_dir = _resolve(base, d.gt_dir)
        cfg.encoder.palette = _resolve(base, cfg.encoder.palette)
        cfg.encoder.prompt_file = _resolve(base, cfg.encoder.prompt_file)
        cfg.eval.image_dir = _resolve(base, cfg.eval.image_dir)
        cfg.eval.gt_dir = _resolve(base, cfg.eval.gt_dir)
        cfg.eval.video_dir = _resolve(base, cfg.eval.video_dir)
        cfg.output_dir = _resolve(base, cfg.output_dir)
    cfg.train.validate()
    try:
        cfg.augment.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if set(cfg.eval.known_classes) & set(cfg.eval.unknown_classes):
        raise ConfigError("known and unknown class lists must be disjoint")
    if cfg.encoder.kind not in ("stub", "clip"):
        raise ConfigError(f"encoder.kind must be 'stub' or 'clip', got {cfg.encoder.kind!r}")
    if cfg.dataset.region_prior.method not in ("slic", "file"):
        raise ConfigError("dataset.region_prior.method must be 'slic' or 'file'")
    if check_paths:
        check_config_paths(cfg)
    return cfg


def check_config_paths(cfg):
    required = [("dataset.image_dir", cfg.dataset.image_dir)]
    optional = [
        ("dataset.region_prior_dir", cfg.dataset.region_prior_dir),
        ("dataset.gt_dir", cfg.dataset.gt_dir),
        ("encoder.prompt_file", cfg.encoder.prompt_file),
        ("eval.image_dir", cfg.eval.image_dir),
        ("eval.gt_dir", cfg.eval.gt_dir),
        ("eval.video_dir", cfg.eval.video_dir),
    ]
    if cfg.encoder.kind == "stub":
        required.append(("encoder.palette", cfg.encoder.palette))
    if cfg.dataset.region_prior.method == "file":
        required.append(("dataset.region_prior_dir", cfg.dataset.region_prior_dir))
    for name, p in required:
        if not p or not Path(p).exists():
            raise ConfigError(f"{name}: path {p!r} does not exist")
    for name, p in optional:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{name}: path {p!r} does not exist")


def load_config(path, check_paths=True, overrides=None):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(data, base_dir=path.parent, check_paths=check_paths)


def to_dict(cfg):
    def clean(x):
        if isinstance(x, tuple):
            return [clean(v) for v in x]
        if isinstance(x, list):
            return [clean(v) for v in x]
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        return x

    return clean(dataclasses.asdict(cfg))


def config_hash(cfg):
    """Stable short digest of the configuration, output location excluded."""
    data = to_dict(cfg)
    data.pop("output_dir", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
