"""Run configuration: one dataclass per module, loaded from flat ``key=value`` files.

Keys use dotted namespaces matching the attribute names of :class:`RunConfig`,
e.g. ``cluster.k=32`` or ``loss.enable_ci_object=false``. Unknown keys are
rejected.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class SceneConfig:
    image_size: int = 64
    patch_size: int = 8
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    min_object_size: float = 0.2  # fraction of image side
    max_object_size: float = 0.5
    class_color_spread: float = 0.12
    background_chroma: float = 0.3  # 0 gives grey backgrounds, 1 fully random colours
    texture_amplitude: float = 0.2
    texture_period: tuple[float, float] = (6.0, 8.0)  # pixels
    illumination_gain: tuple[float, float] = (0.6, 1.1)
    illumination_offset: tuple[float, float] = (-0.15, 0.25)
    pixel_noise: float = 0.05
    palette_seed: int = 1234

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("scene.num_classes must be >= 2 (class 0 is background)")
        if self.num_classes > 5:
            raise ConfigError("scene.num_classes must be <= 5 (four foreground textures)")
        if not 0 <= self.background_chroma <= 1:
            raise ConfigError("scene.background_chroma must be in [0, 1]")
        if not 0 < self.texture_period[0] <= self.texture_period[1]:
            raise ConfigError("scene.texture_period must satisfy 0 < lo <= hi")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"scene.image_size={self.image_size} not divisible by patch_size={self.patch_size}"
            )
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("scene.min_objects must be in [0, max_objects]")
        if not 0 < self.min_object_size <= self.max_object_size <= 1:
            raise ConfigError("scene object size fractions must satisfy 0 < min <= max <= 1")


@dataclass
class AugConfig:
    view_size: int = 32
    crop_scale: tuple[float, float] = (0.3, 1.0)
    aspect_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    brightness: float = 0.25
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.0  # max rotation around the grey axis, in turns
    min_overlap: float = 0.3
    max_retries: int = 100

    @classmethod
    def identity(cls, view_size: int = 32) -> AugConfig:
        return cls(view_size=view_size, crop_scale=(1.0, 1.0), aspect_ratio=(1.0, 1.0),
                   flip_prob=0.0, brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, min_overlap=0.0)

    def validate(self, patch_size: int, image_size: int) -> None:
        if self.view_size % patch_size:
            raise ConfigError(f"aug.view_size={self.view_size} not divisible by patch_size={patch_size}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("aug.crop_scale must satisfy 0 < lo <= hi <= 1")
        # smallest possible crop side must still cover one source patch
        min_side = image_size * (lo / max(self.aspect_ratio[1], 1.0 / self.aspect_ratio[0])) ** 0.5
        if min_side < patch_size:
            raise ConfigError(f"aug.crop_scale lower bound gives crops smaller than one patch ({min_side:.2f}px)")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("aug.flip_prob must be in [0, 1]")
        if not 0 <= self.min_overlap <= 1:
            raise ConfigError("aug.min_overlap must be in [0, 1]")


@dataclass
class EncoderConfig:
    dim: int = 32
    depth: int = 2
    attention: bool = False
    head_hidden: int = 64
    out_dim: int = 256
    out_dim_global: int = 256
    init_gain: float = 1.0

    def validate(self) -> None:
        if min(self.dim, self.head_hidden, self.out_dim, self.out_dim_global) < 1 or self.depth < 0:
            raise ConfigError("encoder dimensions must be positive")


@dataclass
class ClusterConfig:
    method: str = "sinkhorn"  # sinkhorn | kmeans | oracle
    k: int = 8
    lambda_pos: float = 1.0
    epsilon: float = 0.05
    outer_iters: int = 5
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    kmeans_iters: int = 20

    def validate(self) -> None:
        if self.method not in ("sinkhorn", "kmeans", "oracle"):
            raise ConfigError(f"cluster.method must be sinkhorn, kmeans or oracle, got {self.method!r}")
        if self.k < 1:
            raise ConfigError("cluster.k must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("cluster.epsilon must be > 0")
        if self.lambda_pos < 0:
            raise ConfigError("cluster.lambda_pos must be >= 0")
        if self.outer_iters < 1 or self.sinkhorn_iters < 1:
            raise ConfigError("cluster iteration counts must be >= 1")


@dataclass
class LossConfig:
    enable_global: bool = True
    enable_cv_object: bool = True
    enable_ci_object: bool = True
    tau_s: float = 0.1
    tau_t: float = 0.04
    tau_s_global: float = 0.1
    tau_t_global: float = 0.04
    centering: bool = True
    center_momentum: float = 0.9

    def validate(self) -> None:
        if not (self.enable_global or self.enable_cv_object or self.enable_ci_object):
            raise ConfigError("at least one loss term must be enabled")
        if min(self.tau_s, self.tau_t, self.tau_s_global, self.tau_t_global) <= 0:
            raise ConfigError("temperatures must be > 0")
        if not 0 <= self.center_momentum <= 1:
            raise ConfigError("loss.center_momentum must be in [0, 1]")

    @property
    def needs_objects(self) -> bool:
        return self.enable_cv_object or self.enable_ci_object


@dataclass
class BankConfig:
    capacity: int = 64  # images per bank

    def validate(self) -> None:
        if self.capacity < 1:
            raise ConfigError("bank.capacity must be >= 1")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_momentum: float = 0.996

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("optim.lr must be > 0")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("optim.ema_momentum must be in [0, 1]")


@dataclass
class TrainConfig:
    seed: int = 0
    train_scenes: int = 256
    batch_size: int = 4
    epochs: int = 30
    checkpoint_every: int = 1  # epochs

    def validate(self) -> None:
        if self.batch_size < 1 or self.train_scenes < 1 or self.epochs < 0:
            raise ConfigError("train sizes must be positive")


@dataclass
class EvalConfig:
    seed: int = 10_000
    val_scenes: int = 64
    k: int = 5
    ratios: tuple[int, ...] = (1, 8, 64, 128)
    probe_epochs: int = 100
    probe_lr: float = 0.5
    query_chunk: int = 2048
    runs: int = 5  # subsample draws averaged for ratio > 1

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("eval.k must be >= 1")
        if any(r < 1 for r in self.ratios):
            raise ConfigError("eval.ratios must be >= 1")
        if self.runs < 1:
            raise ConfigError("eval.runs must be >= 1")


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> RunConfig:
        self.scene.validate()
        self.aug.validate(self.scene.patch_size, self.scene.image_size)
        self.encoder.validate()
        self.cluster.validate()
        self.loss.validate()
        self.bank.validate()
        self.optim.validate()
        self.train.validate()
        self.eval.validate()
        n_view = (self.aug.view_size // self.scene.patch_size) ** 2
        if self.loss.needs_objects and self.cluster.method != "oracle" and self.cluster.k > 2 * n_view:
            raise ConfigError(f"cluster.k={self.cluster.k} exceeds 2N={2 * n_view} tokens per view pair")
        return self


# Published full-scale settings, kept as override sets; the desk-scale defaults above differ.
FULL_SCALE = {
    "coco": {"cluster.lambda_pos": "2.0", "bank.capacity": "25000", "cluster.k": "64"},
    "imagenet": {"cluster.lambda_pos": "1.0", "bank.capacity": "25000", "cluster.k": "32"},
}
FULL_SCALE_KNN_K = 50


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw.strip()
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(p, args[0], key) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    raise ConfigError(f"unsupported field type for {key}: {tp}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def apply_overrides(cfg, items: dict[str, str]):
    """Set dotted ``section.field`` keys on a (nested) config dataclass in place."""
    for key, raw in items.items():
        target = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(f"unknown config key: {key}")
            target = getattr(target, part)
        hints = typing.get_type_hints(type(target)) if dataclasses.is_dataclass(target) else {}
        name = parts[-1]
        if name not in hints or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key: {key}")
        setattr(target, name, _coerce(raw, hints[name], key))
    return cfg


def parse_kv_text(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        items[key] = value
    return items


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        apply_overrides(cfg, parse_kv_text(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def to_kv_text(cfg) -> str:
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                lines.append(f"{prefix}{f.name}={_format(value)}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"
