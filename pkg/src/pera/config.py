"""Run configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import yaml

from .errors import ConfigurationError


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    # None means the halfway layer, depth // 2
    inject_layer: int | None = None

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def injection_layer(self) -> int:
        return self.depth // 2 if self.inject_layer is None else self.inject_layer

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.depth < 1 or self.embed_dim < 1 or self.heads < 1:
            raise ConfigurationError("depth, embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 <= self.injection_layer <= self.depth:
            raise ConfigurationError(f"inject_layer {self.injection_layer} outside [0, {self.depth}]")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigurationError("drop_path_rate must lie in [0, 1)")


@dataclass
class AugConfig:
    crop_scale: tuple[float, float] = (0.32, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError(f"crop_scale {self.crop_scale} must satisfy 0 < lo <= hi <= 1")
        if not 0.0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ConfigurationError(f"crop_ratio {self.crop_ratio} invalid")
        for name in ("hflip_p", "vflip_p", "jitter_p", "grayscale_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be a probability")
        if min(self.brightness, self.contrast, self.saturation) < 0 or not 0 <= self.hue <= 0.5:
            raise ConfigurationError("jitter strengths must be non-negative and hue <= 0.5")


@dataclass
class MaskRatios:
    s: float = 0.3
    l: float = 0.2  # noqa: E741
    t: float = 0.5

    def validate(self) -> None:
        values = (self.s, self.l, self.t)
        if any(v < 0 or v > 1 for v in values):
            raise ConfigurationError(f"mask ratios {values} must lie in [0, 1]")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ConfigurationError(f"mask ratios {values} must sum to 1")


@dataclass
class Toggles:
    sa: bool = True  # spatial alignment
    dm: bool = True  # disjoint masks
    pp: bool = True  # pixel prediction


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    base_lr: float = 3e-4
    warmup_epochs: int = 4
    final_lr: float = 1e-6
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    ema_momentum_start: float = 0.992
    ema_momentum_end: float = 1.0
    tpt_s: float = 0.1
    tpt_t_start: float = 0.04
    tpt_t_max: float = 0.07
    tpt_t_warmup_epochs: int = 6
    center_momentum: float = 0.9
    # initialise the center from the first batch's mean teacher logits rather than zeros
    center_warm_start: bool = True
    mse_weight: float = 1.0
    mse_through_encoder: bool = True
    clip_grad: float = 3.0
    # prototype layer receives no update for this many initial epochs
    freeze_prototypes_epochs: int = 1
    num_prototypes: int = 256
    head_hidden_dim: int = 256
    head_bottleneck_dim: int = 16
    # batch-statistics normalisation inside the projector MLP
    head_batchnorm: bool = True
    checkpoint_every: int = 0
    seed: int = 0
    ratios: MaskRatios = field(default_factory=MaskRatios)
    toggles: Toggles = field(default_factory=Toggles)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def validate(self) -> None:
        self.backbone.validate()
        self.aug.validate()
        self.ratios.validate()
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must be < epochs")
        if not 0 <= self.tpt_t_warmup_epochs <= self.epochs:
            raise ConfigurationError("tpt_t_warmup_epochs must be <= epochs")
        for name in ("base_lr", "tpt_s", "tpt_t_start", "tpt_t_max"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.final_lr < 0 or min(self.weight_decay_start, self.weight_decay_end) < 0:
            raise ConfigurationError("final_lr and weight decays must be non-negative")
        for name in ("ema_momentum_start", "ema_momentum_end", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.num_prototypes < 2:
            raise ConfigurationError("num_prototypes must be >= 2")
        if self.toggles.pp and not self.toggles.dm:
            raise ConfigurationError("pixel prediction needs disjoint masks (no learnable part otherwise)")


@dataclass
class DataConfig:
    num_images: int = 800
    num_classes: int = 4
    seed: int = 0
    # labelled set used by probing, drawn from a different seed than pre-training
    probe_images: int = 1000
    probe_seed: int = 1
    root: str | None = None
    manifest: str | None = None


@dataclass
class EvalConfig:
    train_ratio: float = 0.2
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    probe_weight_decay: float = 1e-4
    probe_seeds: tuple[int, ...] = (0, 1, 2)
    histogram_bins: int = 40
    diff_range: tuple[float, float] = (0.0, 2.0)
    value_range: tuple[float, float] = (-4.0, 4.0)
    reconstruct_ratio: float = 0.7


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.trainer.validate()
        if not 2 <= self.data.num_classes <= 16:
            raise ConfigurationError("num_classes must lie in [2, 16]")
        if not 0.0 < self.eval.train_ratio < 1.0:
            raise ConfigurationError("train_ratio must lie in (0, 1)")


def to_dict(obj: Any) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def config_hash(obj: Any) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        inner = args[0]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, inner, key) for v in value)
        if len(value) != len(args):
            raise ConfigurationError(f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        return str(value)
    raise ConfigurationError(f"{key}: unsupported type {hint}")


def from_dict(cls: type, data: dict[str, Any], prefix: str = "") -> Any:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = from_dict(hint, value, prefix + name + ".")
        else:
            kwargs[name] = _coerce(value, hint, prefix + name)
    return cls(**kwargs)


def iter_keys(obj: Any, prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield (dotted_key, value) for every leaf field."""
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            yield from iter_keys(value, prefix + f.name + ".")
        else:
            yield prefix + f.name, value


def apply_override(data: dict[str, Any], assignment: str) -> None:
    """Apply one ``a.b.c=value`` override to a raw config mapping.

    Values are parsed as YAML scalars, so ``true``, ``3`` and ``[0.3, 1.0]`` work.
    Key existence is checked later by :func:`from_dict`.
    """
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> Config:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    for assignment in overrides:
        apply_override(data, assignment)
    cfg = from_dict(Config, data)
    cfg.validate()
    return cfg


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
