"""
Experiment configuration.

A run is described by a TrainConfig with one section per module:

    preset: desk
    seed: 0
    train:   {method: fm_j_m, theta: 0.5, n_samples: 8, alpha: 0.999, ...}
    model:   {channels: [8, 16, 32], latent_dim: 6, num_classes: 1, ...}
    augment: {weak: {...}, strong: {...}}
    data:    {root: data/, source_domain: source, target_domain: target, ...}

Method names follow the grid of self-training variant x strategy x filter:
    mt_j, mt_j_m, mt_j_w, mt_s, mt_s_m, mt_s_w,
    fm_j, fm_j_m, fm_j_w, fm_s, fm_s_m, fm_s_w
plus "source" for supervised PUNet training on the source domain and "unet"
for the deterministic UNet baseline trained the same way.

Values are resolved in this order (later wins): dataclass defaults, preset,
config file, command-line overrides.
"""

import copy
import hashlib
from dataclasses import dataclass, field, asdict, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .augment import AugmentationSpec, Strength
from .consensus import FilterMode
from .errors import ConfigError


class Training(str, Enum):
    MEAN_TEACHER = "mt"
    FIX_MATCH = "fm"


class Strategy(str, Enum):
    SOURCE = "source"
    JOINT = "joint"
    SEPARATE = "separate"


@dataclass(frozen=True)
class MethodSpec:
    """One cell of the method grid."""
    name: str
    training: Optional[Training]
    strategy: Strategy
    filter_mode: FilterMode
    probabilistic: bool = True

    @property
    def shares_weights(self) -> bool:
        return self.training is Training.FIX_MATCH

    @property
    def student_strength(self) -> Strength:
        return Strength.STRONG if self.training is Training.FIX_MATCH else Strength.WEAK

    @property
    def teacher_strength(self) -> Strength:
        return Strength.WEAK

    @property
    def label(self) -> str:
        """Human readable label, e.g. FM_j^m."""
        if self.training is None:
            return "PUNet" if self.probabilistic else "UNet"
        label = f"{self.training.value.upper()}_{self.strategy.value[0]}"
        if self.filter_mode is not FilterMode.NONE:
            label += f"^{self.filter_mode.value[0]}"
        return label


def _build_methods() -> Dict[str, MethodSpec]:
    methods = {}
    for training in Training:
        for strategy in (Strategy.JOINT, Strategy.SEPARATE):
            for mode in (FilterMode.NONE, FilterMode.MASK, FilterMode.WEIGHT):
                name = f"{training.value}_{strategy.value[0]}"
                if mode is not FilterMode.NONE:
                    name += f"_{mode.value[0]}"
                methods[name] = MethodSpec(name, training, strategy, mode)
    return methods


# Self-training grid (12 entries)
METHODS: Dict[str, MethodSpec] = _build_methods()

SOURCE_METHOD = MethodSpec("source", None, Strategy.SOURCE, FilterMode.NONE)
# deterministic UNet baseline, trained on source data like "source"
UNET_METHOD = MethodSpec("unet", None, Strategy.SOURCE, FilterMode.NONE, probabilistic=False)

SUPERVISED_METHODS: Dict[str, MethodSpec] = {m.name: m for m in (SOURCE_METHOD, UNET_METHOD)}


def get_method(name: str) -> MethodSpec:
    """
    Look up a method by name.

    Args:
        name: "source", "unet" or one of the 12 grid names (e.g. "fm_j_m")

    Returns:
        MethodSpec
    """
    key = name.strip().lower()
    if key in SUPERVISED_METHODS:
        return SUPERVISED_METHODS[key]
    if key not in METHODS:
        raise ConfigError(
            f"Unknown method: {name}. "
            f"Available: {', '.join(SUPERVISED_METHODS)}, {', '.join(METHODS)}"
        )
    return METHODS[key]


# =============================================================================
# Presets
# =============================================================================

PRESETS: Dict[str, dict] = {
    # CPU-trainable in minutes
    "desk": {
        "model": {"channels": (8, 16, 32)},
        "train": {"learning_rate": 5e-4},
        "data": {"patch_shape": (64, 64), "batch_size": 4},
        "iterations": {Strategy.SOURCE: 2000, Strategy.JOINT: 2000, Strategy.SEPARATE: 500},
        "methods": {},
    },
    # hyperparameters of the published experiments
    "full": {
        "model": {"channels": (64, 128, 256, 512)},
        "train": {"learning_rate": 1e-5},
        "data": {"patch_shape": (256, 256), "batch_size": 2},
        "iterations": {Strategy.SOURCE: 100_000, Strategy.JOINT: 100_000, Strategy.SEPARATE: 10_000},
        "methods": {
            "source": {"data": {"patch_shape": (512, 512), "batch_size": 4}},
            "unet": {"data": {"patch_shape": (512, 512), "batch_size": 4}},
            "mt_s": {"data": {"patch_shape": (512, 512)}},
            "fm_s": {"train": {"learning_rate": 1e-7}},
        },
    },
}


# =============================================================================
# Config sections
# =============================================================================

def _check_keys(section: str, data: dict, cls) -> None:
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"Unknown keys in [{section}]: {', '.join(sorted(unknown))}")


@dataclass
class ModelConfig:
    """PUNet architecture."""
    in_channels: int = 1
    num_classes: int = 1
    channels: Tuple[int, ...] = (8, 16, 32)
    latent_dim: int = 6
    comb_layers: int = 3
    batch_norm: bool = False

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.num_classes not in (1, 2):
            raise ConfigError(f"num_classes must be 1 or 2, got {self.num_classes}")
        if self.comb_layers < 1:
            raise ConfigError(f"comb_layers must be >= 1, got {self.comb_layers}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        _check_keys("model", data, cls)
        data = dict(data)
        if "channels" in data:
            data["channels"] = tuple(int(c) for c in data["channels"])
        return cls(**data)


@dataclass
class AugmentConfig:
    weak: AugmentationSpec = field(default_factory=AugmentationSpec.weak)
    strong: AugmentationSpec = field(default_factory=AugmentationSpec.strong)

    def for_strength(self, strength: Strength) -> AugmentationSpec:
        return self.strong if strength is Strength.STRONG else self.weak

    def to_dict(self) -> dict:
        return {"weak": self.weak.to_dict(), "strong": self.strong.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        _check_keys("augment", data, cls)
        weak = dict(data.get("weak", {}))
        strong = dict(data.get("strong", {}))
        weak.setdefault("strength", Strength.WEAK.value)
        strong.setdefault("strength", Strength.STRONG.value)
        return cls(weak=AugmentationSpec.from_dict(weak), strong=AugmentationSpec.from_dict(strong))


@dataclass
class DataConfig:
    """Where the training data lives and how patches are drawn."""
    root: Optional[str] = None
    source_domain: Optional[str] = None
    target_domain: Optional[str] = None
    patch_shape: Tuple[int, int] = (64, 64)
    batch_size: int = 4

    def to_dict(self) -> dict:
        data = asdict(self)
        data["patch_shape"] = list(self.patch_shape)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        _check_keys("data", data, cls)
        data = dict(data)
        if "patch_shape" in data:
            data["patch_shape"] = tuple(int(s) for s in data["patch_shape"])
        return cls(**data)


@dataclass
class TrainConfig:
    """
    Full description of one experiment.

    The method name fixes the self-training variant, strategy and filter;
    everything else are hyperparameters.
    """
    method: str = "source"
    theta: float = 0.5
    n_samples: int = 8
    alpha: float = 0.999
    beta: float = 1.0
    learning_rate: float = 5e-4
    iterations: Optional[int] = None
    val_interval: int = 50
    val_samples: int = 4
    scheduler_factor: float = 0.5
    scheduler_patience: int = 10
    pseudo_label_target: str = "first"
    seed: int = 0
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # -- derived ---------------------------------------------------------------

    @property
    def method_spec(self) -> MethodSpec:
        return get_method(self.method)

    @property
    def strategy(self) -> Strategy:
        return self.method_spec.strategy

    @property
    def filter_mode(self) -> FilterMode:
        return self.method_spec.filter_mode

    @property
    def probabilistic(self) -> bool:
        return self.method_spec.probabilistic

    @property
    def student_augmentation(self) -> AugmentationSpec:
        return self.augment.for_strength(self.method_spec.student_strength)

    @property
    def teacher_augmentation(self) -> AugmentationSpec:
        return self.augment.for_strength(self.method_spec.teacher_strength)

    @property
    def total_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return PRESETS[self.preset]["iterations"][self.strategy]

    # -- validation ------------------------------------------------------------

    def validate(self) -> "TrainConfig":
        spec = self.method_spec
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown preset: {self.preset}. Available: {', '.join(PRESETS)}")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must be in (0, 1), got {self.theta}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.val_interval < 1 or self.val_samples < 1:
            raise ConfigError("val_interval and val_samples must be >= 1")
        if self.pseudo_label_target not in ("first", "mean"):
            raise ConfigError(
                f"pseudo_label_target must be 'first' or 'mean', got {self.pseudo_label_target}"
            )
        self.model.validate()
        self.augment.weak.validate()
        self.augment.strong.validate()

        if self.data.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.data.batch_size}")
        for axis, size in zip(("height", "width"), self.data.patch_shape):
            if size < 1 or size % self.model.divisor:
                raise ConfigError(
                    f"patch {axis} {size} is not divisible by {self.model.divisor} "
                    f"(2^(depth-1) for depth {self.model.depth})"
                )

        if spec.strategy is Strategy.SEPARATE and self.data.source_domain is not None:
            raise ConfigError(
                f"{spec.name} adapts without access to the source data; "
                "remove data.source_domain from the config"
            )
        if spec.strategy in (Strategy.SOURCE, Strategy.JOINT) and self.data.source_domain is None:
            raise ConfigError(f"{spec.name} needs data.source_domain")
        if spec.strategy is Strategy.SEPARATE and self.data.target_domain is None:
            raise ConfigError(f"{spec.name} needs data.target_domain")
        return self

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        train = {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in ("model", "augment", "data", "seed", "preset")
        }
        return {
            "preset": self.preset,
            "seed": self.seed,
            "train": train,
            "model": self.model.to_dict(),
            "augment": self.augment.to_dict(),
            "data": self.data.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {"preset", "seed", "train", "model", "augment", "data"}
        if unknown:
            raise ConfigError(f"Unknown config sections: {', '.join(sorted(unknown))}")

        preset = data.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset: {preset}. Available: {', '.join(PRESETS)}")
        train = dict(data.get("train") or {})
        method = str(train.get("method", "source"))
        resolved = _apply_preset(preset, method, data)

        train_fields = {f.name for f in fields(cls)} - {"model", "augment", "data", "seed", "preset"}
        unknown = set(resolved["train"]) - train_fields
        if unknown:
            raise ConfigError(f"Unknown keys in [train]: {', '.join(sorted(unknown))}")

        return cls(
            preset=preset,
            seed=int(data.get("seed", 0)),
            model=ModelConfig.from_dict(resolved["model"]),
            augment=AugmentConfig.from_dict(resolved["augment"]),
            data=DataConfig.from_dict(resolved["data"]),
            **resolved["train"],
        )

    def resolved(self) -> "TrainConfig":
        """Copy with every default made explicit (for the run manifest)."""
        cfg = copy.deepcopy(self)
        cfg.iterations = self.total_iterations
        return cfg

    def config_hash(self) -> str:
        """Stable hash of the resolved config."""
        text = yaml.safe_dump(self.resolved().to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainConfig":
        return load_config(path)


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_preset(preset: str, method: str, data: dict) -> dict:
    """Preset values are defaults; explicit config values win."""
    values = PRESETS[preset]
    resolved = {
        "train": dict(values["train"]),
        "model": dict(values["model"]),
        "data": dict(values["data"]),
        "augment": {},
    }
    # method overrides match on the grid prefix (mt_s matches mt_s_m, mt_s_w)
    for prefix, override in values["methods"].items():
        if method == prefix or method.startswith(prefix + "_"):
            resolved = _merge(resolved, override)
    for section in ("train", "model", "data", "augment"):
        resolved[section] = _merge(resolved[section], dict(data.get(section) or {}))
    return resolved


def _set_dotted(data: dict, key: str, value: Any) -> None:
    section, _, name = key.rpartition(".")
    target = data
    for part in filter(None, section.split(".")):
        target = target.setdefault(part, {})
    target[name] = value


def _has_dotted(data: dict, key: str) -> bool:
    target: Any = data
    for part in key.split("."):
        if not isinstance(target, dict) or part not in target:
            return False
        target = target[part]
    return True


def read_config_file(path: Union[str, Path]) -> dict:
    """Raw mapping of a YAML config; a run manifest yields its "config" section."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a mapping")
    if is_manifest(data):
        data = data["config"]
    return data


def is_manifest(data: dict) -> bool:
    return "config" in data and "software_version" in data


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
    defaults: Optional[Dict[str, Any]] = None,
) -> TrainConfig:
    """
    Load a config file and apply overrides.

    Args:
        path: YAML config or run manifest (its "config" section is used); None for defaults
        overrides: Dotted keys, e.g. {"seed": 3, "train.method": "fm_j_m"}; None values ignored
        defaults: Dotted keys applied only where neither file nor overrides set a value

    Returns:
        Validated TrainConfig
    """
    data = copy.deepcopy(read_config_file(path)) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)
    for key, value in (defaults or {}).items():
        if not _has_dotted(data, key):
            _set_dotted(data, key, value)

    try:
        cfg = TrainConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(f"Invalid config: {e}") from None
    return cfg.validate()
