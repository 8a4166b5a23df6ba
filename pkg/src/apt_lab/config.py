"""Run configuration: typed sections, defaults, validation and ``key=value`` overrides.

Every field has a default. Constants prefixed ``FULL_SCALE_`` and comments
marked *full scale* give the values used for large image/video runs; the rest
are desk-scale choices for the toy tasks.
"""
from __future__ import annotations

import dataclasses
import difflib
import logging
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from apt_lab.errors import ConfigError

log = logging.getLogger(__name__)

FULL_SCALE_LAMBDA = 100.0
FULL_SCALE_EMA_DECAY = 0.995
FULL_SCALE_CFG_SCALE = 7.5
FULL_SCALE_LR_IMAGE = 5e-6
FULL_SCALE_LR_VIDEO = 3e-6
FULL_SCALE_EMA_ADOPT_STEP = 350

STAGES = ("pretrain", "distill", "apt")


@dataclass
class ModelConfig:
    depth: int = 12
    width: int = 128
    heads: int = 4
    patch_size: int = 4
    # condition vocabulary; index ``num_classes`` is the null/negative condition
    num_classes: int = 8
    # (t', h', w', c'); t' is always 1 here
    data_shape: tuple[int, int, int, int] = (1, 1, 1, 2)
    mlp_ratio: float = 4.0
    freq_dim: int = 256

    def validate(self) -> None:
        for name in ("depth", "width", "heads", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be a positive integer")
        if self.num_classes < 0:
            raise ConfigError("model.num_classes must be >= 0")
        if self.width % self.heads:
            raise ConfigError("model.width must be divisible by model.heads")
        if self.depth < 3:
            raise ConfigError("model.depth must be >= 3 (three discriminator head layers)")
        if len(self.data_shape) != 4 or any(d < 1 for d in self.data_shape):
            raise ConfigError("model.data_shape must be four positive integers (t', h', w', c')")
        if self.data_shape[0] != 1:
            raise ConfigError("model.data_shape: only t' = 1 is supported")
        if not self.is_point:
            _, h, w, _ = self.data_shape
            if h % self.patch_size or w % self.patch_size:
                raise ConfigError("model.patch_size must divide the image height and width")

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def is_point(self) -> bool:
        return self.data_shape[1] == 1 and self.data_shape[2] == 1

    @property
    def grid(self) -> tuple[int, int]:
        if self.is_point:
            return 1, 1
        return self.data_shape[1] // self.patch_size, self.data_shape[2] // self.patch_size

    @property
    def token_count(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def token_dim(self) -> int:
        if self.is_point:
            return self.data_shape[3]
        return self.patch_size * self.patch_size * self.data_shape[3]


def default_head_layers(depth: int) -> tuple[int, int, int]:
    """Scale the (16, 26, 36)-of-36 head placement to ``depth`` blocks."""
    a = max(1, round(depth * 16 / 36))
    b = max(a + 1, round(depth * 26 / 36))
    return a, min(b, depth - 1), depth


@dataclass
class HeadConfig:
    # 1-based block indices; empty means the proportional default for the model depth
    layer_indices: tuple[int, ...] = ()
    attn_heads: int = 1

    def resolved(self, depth: int) -> tuple[int, ...]:
        return tuple(self.layer_indices) if self.layer_indices else default_head_layers(depth)

    def validate(self, depth: int) -> None:
        idx = self.resolved(depth)
        if not idx:
            raise ConfigError("heads.layer_indices must not be empty")
        if any(i < 1 or i > depth for i in idx):
            raise ConfigError(f"heads.layer_indices must lie in [1, {depth}]")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError("heads.layer_indices must be strictly increasing")
        if self.attn_heads < 1:
            raise ConfigError("heads.attn_heads must be >= 1")


@dataclass
class OptimizerConfig:
    # RMSProp with alpha = beta2 = 0.9 (full scale); beta1 is fixed at 0
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0  # full scale: none
    grad_clip: float | None = None  # full scale: none

    def validate(self) -> None:
        if self.beta1 != 0.0:
            raise ConfigError("optimizer.beta1 must be 0 (first moment is disabled)")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("optimizer.beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("optimizer.eps must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("optimizer.grad_clip must be > 0 or null")


@dataclass
class PretrainConfig:
    steps: int = 6000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.1
    shift_s: float = 1.0

    def validate(self) -> None:
        _check_common("pretrain", self.steps, self.batch_size, self.lr)
        _check_unit("pretrain.cond_dropout", self.cond_dropout)
        if self.shift_s < 1:
            raise ConfigError("pretrain.shift_s must be >= 1")


@dataclass
class DistillConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 2e-4
    cfg_scale: float = FULL_SCALE_CFG_SCALE
    n_segments: int = 32
    target_decay: float = 0.99
    cond_dropout: float = 0.1

    def validate(self) -> None:
        _check_common("distill", self.steps, self.batch_size, self.lr)
        if self.n_segments < 1:
            raise ConfigError("distill.n_segments must be >= 1")
        _check_unit("distill.target_decay", self.target_decay)
        _check_unit("distill.cond_dropout", self.cond_dropout)


@dataclass
class AptConfig:
    steps: int = 1000
    batch_size: int = 256
    lr_generator: float = 1e-4  # full scale: 5e-6 images, 3e-6 videos
    lr_discriminator: float = 1e-4
    ema_decay: float = FULL_SCALE_EMA_DECAY
    ema_adopt_step: int = FULL_SCALE_EMA_ADOPT_STEP
    shift_s: float = 1.0  # full scale: 1 images, 12 videos
    lam: float = field(default=FULL_SCALE_LAMBDA, metadata={"key": "lambda"})
    # null resolves per data kind: 0.01 images (full scale), 0.05 2D points
    sigma: float | None = None
    cond_dropout: float = 0.1
    collapse_window: int = 200
    collapse_threshold: float = 0.05
    stop_on_collapse: bool = True
    # ablation switches; the defaults train the whole discriminator at one rate
    disc_backbone_lr: float | None = None
    freeze_disc_backbone: bool = False
    allow_distilled_disc_init: bool = False

    def validate(self) -> None:
        _check_common("apt", self.steps, self.batch_size, self.lr_generator)
        if self.lr_discriminator <= 0:
            raise ConfigError("apt.lr_discriminator must be > 0")
        _check_unit("apt.ema_decay", self.ema_decay)
        if self.ema_adopt_step < 1:
            raise ConfigError("apt.ema_adopt_step must be >= 1")
        if self.shift_s < 1:
            raise ConfigError("apt.shift_s must be >= 1")
        if self.lam < 0:
            raise ConfigError("apt.lambda must be >= 0")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("apt.sigma must be > 0")
        _check_unit("apt.cond_dropout", self.cond_dropout)
        if self.collapse_window < 1:
            raise ConfigError("apt.collapse_window must be >= 1")
        if self.disc_backbone_lr is not None and self.disc_backbone_lr < 0:
            raise ConfigError("apt.disc_backbone_lr must be >= 0")


@dataclass
class DataConfig:
    kind: str = "gmm_ring"
    n_modes: int = 8
    radius: float = 1.0
    mode_std: float = 0.05
    grid: int = 4
    extent: float = 2.0
    path: str | None = None
    edge: int | None = None
    channels: int | None = None
    classes: int | None = None

    def validate(self) -> None:
        if self.kind not in ("gmm_ring", "checkerboard", "image_corpus"):
            raise ConfigError(f"data.kind: unknown kind {self.kind!r}")
        if self.kind == "gmm_ring" and (self.n_modes < 1 or self.radius <= 0 or self.mode_std <= 0):
            raise ConfigError("data: gmm_ring needs n_modes >= 1, radius > 0, mode_std > 0")
        if self.kind == "checkerboard" and (self.grid < 2 or self.extent <= 0):
            raise ConfigError("data: checkerboard needs grid >= 2 and extent > 0")
        if self.kind == "image_corpus" and not self.path:
            raise ConfigError("data.path is required for image_corpus")


@dataclass
class EvalConfig:
    n_samples: int = 4000
    euler_steps: int = 25
    cfg_scale: float = FULL_SCALE_CFG_SCALE
    n_steps: int = 1
    t_mid: float = 0.5
    feature_dim: int = 32
    traversal_frames: int = 33
    traversal_pairs: int = 16
    probe_steps: int = 300
    probe_lr: float = 1e-2

    def validate(self) -> None:
        if self.n_samples < 2:
            raise ConfigError("eval.n_samples must be >= 2")
        if self.euler_steps < 1 or self.n_steps < 1:
            raise ConfigError("eval.euler_steps and eval.n_steps must be >= 1")
        _check_unit("eval.t_mid", self.t_mid)
        if self.feature_dim < 2:
            raise ConfigError("eval.feature_dim must be >= 2")
        if self.traversal_frames < 2:
            raise ConfigError("eval.traversal_frames must be >= 2")


@dataclass
class AblateConfig:
    preset: str | None = None
    # dotted key -> list of values; the cartesian product defines the child runs
    matrix: dict = field(default_factory=dict)
    workers: int = 1
    # stages each child runs; earlier-stage checkpoints come from the parent run
    stages: tuple[str, ...] = ("apt", "eval")

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("ablate.workers must be >= 1")
        known = set(STAGES) | {"eval"}
        bad = [s for s in self.stages if s not in known]
        if bad or not self.stages:
            raise ConfigError(f"ablate.stages must be a non-empty subset of {sorted(known)}, got {list(self.stages)}")
        for key, values in self.matrix.items():
            resolve_key(key)
            if not isinstance(values, list) or not values:
                raise ConfigError(f"ablate.matrix.{key} must be a non-empty list of values")


@dataclass
class RunConfig:
    seed: int = 0
    run_name: str = "default"
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    apt: AptConfig = field(default_factory=AptConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> None:
        self.model.validate()
        self.heads.validate(self.model.depth)
        self.optimizer.validate()
        self.pretrain.validate()
        self.distill.validate()
        self.apt.validate()
        self.data.validate()
        self.eval.validate()
        self.ablate.validate()
        if self.data.kind == "gmm_ring" and self.model.num_classes not in (0, self.data.n_modes):
            raise ConfigError("model.num_classes must be 0 or data.n_modes for gmm_ring")
        if self.data.kind in ("gmm_ring", "checkerboard") and tuple(self.model.data_shape) != (1, 1, 1, 2):
            raise ConfigError("model.data_shape must be (1, 1, 1, 2) for 2D point data")

    @property
    def sigma(self) -> float:
        if self.apt.sigma is not None:
            return self.apt.sigma
        return 0.01 if self.data.kind == "image_corpus" else 0.05

    def to_dict(self) -> dict[str, Any]:
        return _to_dict(self)


def _check_common(name: str, steps: int, batch_size: int, lr: float) -> None:
    if steps < 0:
        raise ConfigError(f"{name}.steps must be >= 0")
    if batch_size < 1:
        raise ConfigError(f"{name}.batch_size must be >= 1")
    if lr <= 0:
        raise ConfigError(f"{name}.lr must be > 0")


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1]")


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {_key(f): _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _to_dict(v) for k, v in obj.items()}
    return obj


def all_keys(cls: type = RunConfig, prefix: str = "") -> dict[str, tuple[type, dataclasses.Field]]:
    """Map every dotted leaf key to its owning dataclass and field."""
    out = {}
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        dotted = prefix + _key(f)
        if dataclasses.is_dataclass(tp):
            out.update(all_keys(tp, dotted + "."))
        else:
            out[dotted] = (cls, f)
    return out


def _coerce(key: str, tp: Any, value: Any) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, inner[0], value)
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    elif origin is tuple:
        if isinstance(value, (list, tuple)):
            elem = args[0] if args else int
            return tuple(_coerce(key, elem, v) for v in value)
    elif tp is dict or origin is dict:
        if isinstance(value, dict):
            return value
    raise ConfigError(f"{key}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def resolve_key(key: str) -> str:
    """Resolve a dotted or bare leaf key; bare names must be unambiguous."""
    keys = all_keys()
    if key in keys:
        return key
    leaf_matches = [k for k in keys if k.rsplit(".", 1)[-1] == key]
    if len(leaf_matches) == 1:
        return leaf_matches[0]
    if len(leaf_matches) > 1:
        raise ConfigError(f"ambiguous key {key!r}: use one of {', '.join(sorted(leaf_matches))}")
    names = set(keys) | {k.rsplit(".", 1)[-1] for k in keys}
    close = difflib.get_close_matches(key, sorted(names), n=1, cutoff=0.6)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    raise ConfigError(f"unknown key {key!r}{hint}")


_LEAF_KEYS: dict = {}


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        dotted = f"{prefix}{k}"
        # dict-valued leaves (ablate.matrix) stay whole
        if isinstance(v, dict) and dotted not in _LEAF_KEYS:
            out.update(_flatten(v, dotted + "."))
        else:
            out[dotted] = v
    return out


def apply_values(cfg: RunConfig, values: dict[str, Any]) -> RunConfig:
    keys = all_keys()
    for raw_key, value in values.items():
        key = resolve_key(raw_key)
        cls, f = keys[key]
        owner = cfg
        for part in key.split(".")[:-1]:
            owner = getattr(owner, part)
        tp = typing.get_type_hints(cls)[f.name]
        setattr(owner, f.name, _coerce(key, tp, value))
    return cfg


def parse_overrides(items: list[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
    return out


def load_preset(name: str) -> dict[str, Any]:
    path = Path(__file__).parent / "presets" / f"{name}.yaml"
    if not path.exists():
        available = sorted(p.stem for p in path.parent.glob("*.yaml"))
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(available)}")
    return yaml.safe_load(path.read_text()) or {}


_LEAF_KEYS.update(all_keys())


def parse_config(path: str | Path | None = None, overrides: list[str] | dict | None = None) -> RunConfig:
    """Build a validated config: defaults, then preset, then file, then overrides."""
    file_values: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        file_values = _flatten(loaded or {})
    if isinstance(overrides, dict):
        override_values = dict(overrides)
    else:
        override_values = parse_overrides(list(overrides or []))

    preset = override_values.get("ablate.preset", override_values.get("preset"))
    if preset is None:
        preset = file_values.get("ablate.preset")
    cfg = RunConfig()
    if preset:
        apply_values(cfg, _flatten(load_preset(preset)))
    apply_values(cfg, file_values)
    apply_values(cfg, override_values)
    cfg.validate()
    if cfg.apt.lam != FULL_SCALE_LAMBDA:
        log.warning("apt.lambda=%g differs from the full-scale setting λ=100 (ablation run)", cfg.apt.lam)
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
