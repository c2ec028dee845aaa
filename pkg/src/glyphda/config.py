"""Experiment configuration.

Configs are YAML files whose tree mirrors :class:`ExperimentConfig`. Every key
is optional; anything missing falls back to the defaults below, and unknown
keys are rejected. ``--set section.key=value`` overrides are applied on top
of the parsed tree before validation, with values parsed as YAML scalars.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

OUTPUT_ROOT_ENV = "GLYPHDA_OUTPUT_ROOT"

TEXTURE_TAPS = ("relu1_1", "relu2_1", "relu3_1")
STRUCTURE_TAPS = ("relu4_1", "relu5_1")
ALL_TAPS = TEXTURE_TAPS + STRUCTURE_TAPS

# per-layer weight regimes, in tap order relu1_1 .. relu5_1
ASC = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
REGIMES = {
    "asc": ASC,
    "same": (1.0, 1.0, 1.0, 1.0, 1.0),
    "des": tuple(reversed(ASC)),
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0  # feature-level adversarial
    alpha2: float = 0.01  # image-level adversarial
    alpha3: float = 0.05  # perceptual
    alpha4: float = 0.5  # reconstruction

    def validate(self, prefix: str = "loss") -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{prefix}.{f.name}", f"must be finite and >= 0, got {v!r}")


Taps = tuple[tuple[str, float], ...]


def _regime_taps(names: tuple[str, ...], regime: str) -> Taps:
    weights = dict(zip(ALL_TAPS, REGIMES[regime]))
    return tuple((n, weights[n]) for n in names)


@dataclass(frozen=True)
class PerceptualSpec:
    texture_taps: Taps = _regime_taps(TEXTURE_TAPS, "same")
    structure_taps: Taps = _regime_taps(STRUCTURE_TAPS, "asc")
    reconstruction_taps: Taps = _regime_taps(ALL_TAPS, "asc")

    @classmethod
    def from_regimes(cls, rec: str = "asc", structure: str = "asc", texture: str = "same") -> "PerceptualSpec":
        """Build a spec from named per-layer weight regimes ('asc', 'same', 'des')."""
        for key, r in (("rec", rec), ("structure", structure), ("texture", texture)):
            if r not in REGIMES:
                raise ConfigError(f"perceptual.{key}", f"unknown regime {r!r}")
        return cls(
            texture_taps=_regime_taps(TEXTURE_TAPS, texture),
            structure_taps=_regime_taps(STRUCTURE_TAPS, structure),
            reconstruction_taps=_regime_taps(ALL_TAPS, rec),
        )

    def tap_names(self) -> tuple[str, ...]:
        seen = []
        for name, _ in self.reconstruction_taps + self.texture_taps + self.structure_taps:
            if name not in seen:
                seen.append(name)
        return tuple(seen)

    def validate(self, available: tuple[str, ...] = ALL_TAPS) -> None:
        for key in ("texture_taps", "structure_taps", "reconstruction_taps"):
            for name, w in getattr(self, key):
                if name not in available:
                    raise ConfigError(f"perceptual.{key}", f"unknown tap {name!r}")
                if not (math.isfinite(w) and w > 0):
                    raise ConfigError(f"perceptual.{key}", f"weight for {name} must be > 0")
        rec = {n for n, _ in self.reconstruction_taps}
        union = {n for n, _ in self.texture_taps} | {n for n, _ in self.structure_taps}
        if rec != union:
            raise ConfigError(
                "perceptual.reconstruction_taps",
                f"must cover exactly the texture and structure taps {sorted(union)}",
            )


@dataclass(frozen=True)
class ScheduleSpec:
    base_rate: float
    total_iterations: int
    exponent: float = 0.9

    def __post_init__(self):
        if not self.base_rate > 0:
            raise ConfigError("schedule.base_rate", "must be > 0")
        if not (isinstance(self.total_iterations, int) and self.total_iterations > 0):
            raise ConfigError("schedule.total_iterations", "must be a positive integer")
        if not self.exponent > 0:
            raise ConfigError("schedule.exponent", "must be > 0")


@dataclass(frozen=True)
class AblationFlags:
    use_advF: bool = True
    use_advI: bool = True
    use_rec: bool = True
    use_per: bool = True
    use_cls_st: bool = True


# rows of the ablation table; source classification is always on
PRESETS = {
    "source-only": AblationFlags(False, False, False, False, False),
    "model-A": AblationFlags(use_advF=False),
    "model-B": AblationFlags(True, False, False, False, False),
    "model-C": AblationFlags(True, True, False, False, False),
    "model-D": AblationFlags(True, True, True, False, False),
    "model-E": AblationFlags(use_cls_st=False),
    "full": AblationFlags(),
}


def preset_ablation(name: str) -> AblationFlags:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("ablation.preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"  # "sgd" (with momentum) or "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.99, 0.999)
    weight_decay: float = 0.0

    def validate(self, prefix: str) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"{prefix}.kind", f"expected 'sgd' or 'adam', got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"{prefix}.lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError(f"{prefix}.weight_decay", "must be >= 0")
        if not all(0 <= b < 1 for b in self.betas) or not 0 <= self.momentum < 1:
            raise ConfigError(f"{prefix}.betas", "momentum terms must lie in [0, 1)")


@dataclass(frozen=True)
class OptimConfig:
    backbone: OptimizerSpec = OptimizerSpec(kind="sgd", lr=2.5e-4, momentum=0.9, weight_decay=5e-4)
    discriminators: OptimizerSpec = OptimizerSpec(kind="adam", lr=1e-4)
    generator: OptimizerSpec = OptimizerSpec(kind="adam", lr=1e-3)


# network -> optimizer group
GROUPS = {
    "structure_encoder": "backbone",
    "classifier": "backbone",
    "feature_disc": "discriminators",
    "image_disc_s": "discriminators",
    "image_disc_t": "discriminators",
    "texture_encoder_s": "generator",
    "texture_encoder_t": "generator",
    "generator": "generator",
}


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "small-conv"  # or "residual-18"
    backbone_weights: Optional[str] = None
    num_classes: int = 10
    structure_width: int = 512  # dense width of the small-conv backbone
    generator_deconv: tuple[int, ...] = (256, 128, 64, 32, 32)
    generator_conv: tuple[int, ...] = (128, 64, 32, 32, 32)
    disc_width: int = 64
    feature_disc_hidden: int = 1024
    perceptual_weights: Optional[str] = None
    perceptual_width: float = 1.0  # channel multiplier; a weights file must match it
    init_seed: Optional[int] = None  # defaults to the experiment seed


@dataclass(frozen=True)
class CorpusSpec:
    kind: str = "synth"  # "idx", "folder" or "synth"
    images: Optional[str] = None  # idx image file
    labels: Optional[str] = None  # idx label file
    root: Optional[str] = None  # folder corpus
    role: str = "clean"  # synth: "clean" or "degraded"
    split: str = "train"  # synth: "train" or "test"
    limit: Optional[int] = None


@dataclass(frozen=True)
class DegradationConfig:
    occlusion_count: tuple[int, int] = (0, 2)
    occlusion_size: tuple[float, float] = (0.15, 0.3)  # fraction of image side
    salt_pepper: float = 0.08
    morph_radius: tuple[int, int] = (1, 1)
    morph_prob: float = 0.5
    contrast: tuple[float, float] = (0.2, 0.6)  # fraction of contrast removed
    thickness_jitter: int = 0


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 10
    per_class: int = 50
    test_per_class: int = 50
    seed: int = 7
    degradation: DegradationConfig = DegradationConfig()


@dataclass(frozen=True)
class AugmentConfig:
    crop_pad: int = 0
    flip: bool = False


@dataclass(frozen=True)
class DataConfig:
    side: int = 32
    source: CorpusSpec = CorpusSpec(kind="synth", role="clean")
    target: CorpusSpec = CorpusSpec(kind="synth", role="degraded")
    source_eval: Optional[CorpusSpec] = CorpusSpec(kind="synth", role="clean", split="test")
    target_eval: Optional[CorpusSpec] = CorpusSpec(kind="synth", role="degraded", split="test")
    synth: SynthConfig = SynthConfig()
    augment: AugmentConfig = AugmentConfig()


@dataclass(frozen=True)
class TrainerConfig:
    t_max: int = 150_000
    batch_size: int = 16  # per domain
    lr_exponent: float = 0.9
    log_every: int = 1
    eval_every: int = 500
    checkpoint_every: int = 5000
    grid_rows: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    perceptual: PerceptualSpec = PerceptualSpec()
    ablation: AblationFlags = AblationFlags()
    optim: OptimConfig = OptimConfig()
    data: DataConfig = DataConfig()
    trainer: TrainerConfig = TrainerConfig()

    def schedules(self) -> dict[str, ScheduleSpec]:
        return {
            group: ScheduleSpec(getattr(self.optim, group).lr, self.trainer.t_max, self.trainer.lr_exponent)
            for group in ("backbone", "discriminators", "generator")
        }

    def digest(self) -> str:
        blob = json.dumps(to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def validate(self, check_paths: bool = True) -> None:
        self.loss.validate()
        self.perceptual.validate()
        for group in ("backbone", "discriminators", "generator"):
            getattr(self.optim, group).validate(f"optim.{group}")
        m = self.model
        if m.backbone not in ("small-conv", "residual-18"):
            raise ConfigError("model.backbone", f"unknown backbone {m.backbone!r}")
        if m.num_classes < 2:
            raise ConfigError("model.num_classes", "must be >= 2")
        if len(m.generator_deconv) != len(m.generator_conv) or not m.generator_deconv:
            raise ConfigError("model.generator_conv", "must have as many entries as model.generator_deconv")
        if not m.perceptual_width > 0:
            raise ConfigError("model.perceptual_width", "must be > 0")
        t = self.trainer
        if t.batch_size < 2:
            raise ConfigError("trainer.batch_size", "must be >= 2 per domain")
        if t.t_max < 1:
            raise ConfigError("trainer.t_max", "must be >= 1")
        for key in ("log_every", "eval_every", "checkpoint_every"):
            if getattr(t, key) < 1:
                raise ConfigError(f"trainer.{key}", "must be >= 1")
        d = self.data
        if d.side < 8:
            raise ConfigError("data.side", "must be >= 8")
        if d.augment.crop_pad < 0:
            raise ConfigError("data.augment.crop_pad", "must be >= 0")
        s = d.synth
        if s.classes < 2 or s.per_class < 2:
            raise ConfigError("data.synth", "classes and per_class must be >= 2")
        _validate_degradation(s.degradation)
        for key in ("source", "target", "source_eval", "target_eval"):
            corpus = getattr(d, key)
            if corpus is not None:
                _validate_corpus(f"data.{key}", corpus, check_paths)
        if d.source.kind == "folder" and d.source.root is None:
            raise ConfigError("data.source.root", "labeled folder corpus needs a root")


def _validate_degradation(g: DegradationConfig) -> None:
    p = "data.synth.degradation"
    for key in ("occlusion_count", "occlusion_size", "morph_radius", "contrast"):
        lo, hi = getattr(g, key)
        if lo < 0 or hi < lo:
            raise ConfigError(f"{p}.{key}", f"expected 0 <= lo <= hi, got {(lo, hi)}")
    if g.occlusion_size[1] > 1 or g.contrast[1] > 1:
        raise ConfigError(p, "occlusion_size and contrast are fractions in [0, 1]")
    for key in ("salt_pepper", "morph_prob"):
        if not 0 <= getattr(g, key) <= 1:
            raise ConfigError(f"{p}.{key}", "probability must lie in [0, 1]")
    if g.thickness_jitter < 0:
        raise ConfigError(f"{p}.thickness_jitter", "must be >= 0")


def _validate_corpus(prefix: str, c: CorpusSpec, check_paths: bool) -> None:
    if c.kind not in ("idx", "folder", "synth"):
        raise ConfigError(f"{prefix}.kind", f"unknown corpus kind {c.kind!r}")
    if c.limit is not None and c.limit < 1:
        raise ConfigError(f"{prefix}.limit", "must be >= 1")
    if c.kind == "synth":
        if c.role not in ("clean", "degraded"):
            raise ConfigError(f"{prefix}.role", "expected 'clean' or 'degraded'")
        if c.split not in ("train", "test"):
            raise ConfigError(f"{prefix}.split", "expected 'train' or 'test'")
        return
    required = ("images", "labels") if c.kind == "idx" else ("root",)
    for key in required:
        path = getattr(c, key)
        if path is None:
            raise ConfigError(f"{prefix}.{key}", "missing dataset path")
        if check_paths and not Path(path).exists():
            raise ConfigError(f"{prefix}.{key}", f"dataset path does not exist: {path}")


# --- (de)serialization -------------------------------------------------------


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _is_dataclass_type(tp: Any) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _resolve(tp: Any) -> Any:
    # Optional[X] -> X
    args = getattr(tp, "__args__", None)
    if args and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0]
    return tp


def _coerce(value: Any, tp: Any, key: str) -> Any:
    if value is None:
        return None
    tp = _resolve(tp)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
        return from_dict(tp, value, key)
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, "expected a list")
        args = tp.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(args) != len(value):
            raise ConfigError(key, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _taps(value: Any, key: str) -> Taps:
    # accepts [[name, weight], ...] or {name: weight, ...}
    items = value.items() if isinstance(value, dict) else value
    try:
        return tuple((str(n), float(w)) for n, w in items)
    except (TypeError, ValueError):
        raise ConfigError(key, "expected a list of [tap, weight] pairs") from None


def from_dict(cls: type, data: dict, prefix: str = "") -> Any:
    known = {f.name: f for f in fields(cls)}
    data = dict(data)
    kwargs = {}
    if cls is PerceptualSpec and "regimes" in data:
        regimes = data.pop("regimes") or {}
        base = PerceptualSpec.from_regimes(**regimes)
        kwargs = {f.name: getattr(base, f.name) for f in fields(base)}
    if cls is AblationFlags and "preset" in data:
        base = preset_ablation(data.pop("preset"))
        kwargs = {f.name: getattr(base, f.name) for f in fields(base)}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        if name not in known:
            raise ConfigError(key, "unknown key")
        if cls is PerceptualSpec:
            kwargs[name] = _taps(value, key)
        else:
            kwargs[name] = _coerce(value, known[name].type, key)
    return cls(**kwargs)


def _types_resolved() -> None:
    # dataclass field types are strings under postponed evaluation
    import typing

    for cls in (
        LossWeights, PerceptualSpec, AblationFlags, OptimizerSpec, OptimConfig, ModelConfig,
        CorpusSpec, DegradationConfig, SynthConfig, AugmentConfig, DataConfig, TrainerConfig,
        ExperimentConfig,
    ):
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            f.type = hints[f.name]


_types_resolved()


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides to a raw config tree."""
    tree = dict(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node = tree
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        if parts[-1] in _WHOLESALE:
            # a preset replaces the whole section rather than merging into it
            node.clear()
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


_WHOLESALE = ("preset", "regimes")


def config_from_tree(tree: Optional[dict], check_paths: bool = True) -> ExperimentConfig:
    cfg = from_dict(ExperimentConfig, tree or {})
    cfg.validate(check_paths=check_paths)
    return cfg


def load_config(path: str | os.PathLike, overrides: Optional[list[str]] = None, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("config", f"parse failure: {e}") from None
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config", "top level must be a mapping")
    if overrides:
        tree = apply_overrides(tree, overrides)
    return config_from_tree(tree, check_paths=check_paths)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(cfg))


def loads_config(text: str, check_paths: bool = False) -> ExperimentConfig:
    return config_from_tree(yaml.safe_load(text), check_paths=check_paths)
