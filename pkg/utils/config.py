import io
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from dotenv import load_dotenv
from dotenv.parser import parse_stream

from utils.errors import ConfigError


class Variant(str, Enum):
    """Model variants of the ablation study"""

    BASELINE = "baseline"
    IIM_NO_ATTN = "iim_no_attn"
    FULL = "full"


class LossKind(str, Enum):
    BAYESIAN = "bayesian"
    MSE_ON_GAUSSIAN_GT = "mse_on_gaussian_gt"


@dataclass(frozen=True)
class AttentionConfig:
    reduction_ratio: int = 4
    spatial_kernel: int = 7

    def validate(self):
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio", "must be >= 1")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial_kernel", "must be a positive odd number")

    def bottleneck(self, channels: int) -> int:
        return max(1, channels // self.reduction_ratio)


@dataclass(frozen=True)
class PyramidConfig:
    bin_sizes: Tuple[int, ...] = (1, 2, 3, 6)

    def validate(self):
        if not self.bin_sizes:
            raise ConfigError("pyramid_bins", "at least one bin is required")
        if any(b < 1 for b in self.bin_sizes):
            raise ConfigError("pyramid_bins", "bins must be >= 1")
        if list(self.bin_sizes) != sorted(self.bin_sizes):
            raise ConfigError("pyramid_bins", "bins must be sorted ascending")

    def clamped(self, height: int, width: int) -> Tuple[int, ...]:
        """Bins limited to the feature's spatial size (count is preserved)"""
        limit = min(height, width)
        return tuple(min(b, limit) for b in self.bin_sizes)


@dataclass(frozen=True)
class TafnetConfig:
    width_multiplier: float = 0.25
    input_size: Tuple[int, int] = (64, 64)
    variant: Variant = Variant.FULL
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    gate_init: float = 0.0

    def validate(self):
        if not (self.width_multiplier > 0 and math.isfinite(self.width_multiplier)):
            raise ConfigError("width_multiplier", "must be a positive real")
        # stage 1 is the narrowest; the attention MLP needs >= 4 channels
        if round(self.width_multiplier * 64) < 4:
            raise ConfigError("width_multiplier", "stage widths must stay >= 4 channels")
        _validate_size("input_size", self.input_size)
        if not isinstance(self.variant, Variant):
            raise ConfigError("variant", f"unknown variant {self.variant!r}")
        if not math.isfinite(self.gate_init):
            raise ConfigError("gate_init", "must be finite")
        self.pyramid.validate()
        self.attention.validate()


@dataclass(frozen=True)
class SynthConfig:
    image_size: Tuple[int, int] = (64, 64)
    count_min: int = 3
    count_max: int = 30
    radius_min: float = 2.0
    radius_max: float = 4.0
    bright_fraction: float = 0.5
    rgb_contrast_bright: float = 0.6
    rgb_contrast_dark: float = 0.08
    thermal_contrast_bright: float = 0.12
    thermal_contrast_dark: float = 0.6
    noise_std: float = 0.03
    misalignment_max: float = 2.0
    train_size: int = 200
    val_size: int = 40
    test_size: int = 160
    seed: int = 0

    def validate(self):
        _validate_size("image_size", self.image_size)
        if not 0 <= self.count_min <= self.count_max:
            raise ConfigError("count_min", "need 0 <= count_min <= count_max")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError("radius_min", "need 0 < radius_min <= radius_max")
        if not 0.0 <= self.bright_fraction <= 1.0:
            raise ConfigError("bright_fraction", "must lie in [0, 1]")
        if not self.rgb_contrast_bright > self.rgb_contrast_dark >= 0:
            raise ConfigError("rgb_contrast_bright", "RGB contrast must be higher in bright scenes")
        if not self.thermal_contrast_dark > self.thermal_contrast_bright >= 0:
            raise ConfigError("thermal_contrast_dark", "thermal contrast must be higher in dark scenes")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")
        if self.misalignment_max < 0:
            raise ConfigError("misalignment_max", "must be >= 0")
        for name, size in self.split_sizes().items():
            if size < 0:
                raise ConfigError(f"{name}_size", "must be >= 0")

    def split_sizes(self) -> Dict[str, int]:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    max_epochs: int = 300
    val_start_epoch: int = 20
    batch_size: int = 4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: LossKind = LossKind.BAYESIAN
    variant: Variant = Variant.FULL
    bl_sigma: float = 8.0
    bl_background: bool = True
    bl_margin_ratio: float = 0.15
    gaussian_sigma: float = 4.0
    eval_workers: int = 1

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs", "must be >= 0")
        if self.val_start_epoch < 1:
            raise ConfigError("val_start_epoch", "must be >= 1")
        # an empty run never validates, so the bound only binds real runs
        if self.max_epochs > 0 and self.val_start_epoch > self.max_epochs:
            raise ConfigError("val_start_epoch", "must be <= max_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        for name, beta in zip(("beta1", "beta2"), self.betas):
            if not 0.0 <= beta < 1.0:
                raise ConfigError(name, "must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("adam_eps", "must be > 0")
        if not isinstance(self.loss, LossKind):
            raise ConfigError("loss", f"unknown loss {self.loss!r}")
        if not isinstance(self.variant, Variant):
            raise ConfigError("variant", f"unknown variant {self.variant!r}")
        if not self.bl_sigma > 0:
            raise ConfigError("bl_sigma", "must be > 0")
        if not self.bl_margin_ratio > 0:
            raise ConfigError("bl_margin_ratio", "must be > 0")
        if not self.gaussian_sigma > 0:
            raise ConfigError("gaussian_sigma", "must be > 0")
        if self.eval_workers < 1:
            raise ConfigError("eval_workers", "must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    model: TafnetConfig = field(default_factory=TafnetConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        self.synth.validate()
        self.train.validate()
        if self.model.input_size != self.synth.image_size:
            raise ConfigError("input_size", "model and synthesizer sizes differ")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))

    def with_variant(self, variant: Variant) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, variant=variant), train=replace(self.train, variant=variant))


def _validate_size(name, size):
    if len(size) != 2 or any(s < 32 or s % 32 for s in size):
        raise ConfigError(name, f"{size} must be two positive multiples of 32")


def _parse_size(text: str) -> Tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    return int(parts[0]), int(parts[1])


def _format_size(size) -> str:
    return f"{size[0]}x{size[1]}"


def _parse_bins(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"not a switch: {text!r}")


def _format_bool(value: bool) -> str:
    return "on" if value else "off"


def _format_float(value: float) -> str:
    return repr(float(value))


# key -> (section, path inside section, parser, formatter)
_KEYS: Dict[str, Tuple[str, str, Callable, Callable]] = {
    "width_multiplier": ("model", "width_multiplier", float, _format_float),
    "input_size": ("shared", "input_size", _parse_size, _format_size),
    "variant": ("shared", "variant", Variant, lambda v: v.value),
    "reduction_ratio": ("model", "attention.reduction_ratio", int, str),
    "spatial_kernel": ("model", "attention.spatial_kernel", int, str),
    "pyramid_bins": ("model", "pyramid.bin_sizes", _parse_bins, lambda v: ",".join(map(str, v))),
    "gate_init": ("model", "gate_init", float, _format_float),
    "count_min": ("synth", "count_min", int, str),
    "count_max": ("synth", "count_max", int, str),
    "radius_min": ("synth", "radius_min", float, _format_float),
    "radius_max": ("synth", "radius_max", float, _format_float),
    "bright_fraction": ("synth", "bright_fraction", float, _format_float),
    "rgb_contrast_bright": ("synth", "rgb_contrast_bright", float, _format_float),
    "rgb_contrast_dark": ("synth", "rgb_contrast_dark", float, _format_float),
    "thermal_contrast_bright": ("synth", "thermal_contrast_bright", float, _format_float),
    "thermal_contrast_dark": ("synth", "thermal_contrast_dark", float, _format_float),
    "noise_std": ("synth", "noise_std", float, _format_float),
    "misalignment_max": ("synth", "misalignment_max", float, _format_float),
    "train_size": ("synth", "train_size", int, str),
    "val_size": ("synth", "val_size", int, str),
    "test_size": ("synth", "test_size", int, str),
    "lr": ("train", "lr", float, _format_float),
    "weight_decay": ("train", "weight_decay", float, _format_float),
    "max_epochs": ("train", "max_epochs", int, str),
    "val_start_epoch": ("train", "val_start_epoch", int, str),
    "batch_size": ("train", "batch_size", int, str),
    "beta1": ("train", "betas.0", float, _format_float),
    "beta2": ("train", "betas.1", float, _format_float),
    "adam_eps": ("train", "eps", float, _format_float),
    "loss": ("train", "loss", LossKind, lambda v: v.value),
    "bl_sigma": ("train", "bl_sigma", float, _format_float),
    "bl_background": ("train", "bl_background", _parse_bool, _format_bool),
    "bl_margin_ratio": ("train", "bl_margin_ratio", float, _format_float),
    "gaussian_sigma": ("train", "gaussian_sigma", float, _format_float),
    "eval_workers": ("train", "eval_workers", int, str),
    "seed": ("shared", "seed", int, str),
}

MODEL_KEYS = ("width_multiplier", "input_size", "variant", "reduction_ratio",
              "spatial_kernel", "pyramid_bins", "gate_init")


def _line_of(binding) -> int:
    """Line of the first non-blank character of a parsed binding"""
    text = binding.original.string
    return binding.original.line + text[: len(text) - len(text.lstrip())].count("\n")


def parse_flat_config(text: str) -> Dict[str, str]:
    """Parse `key = value` lines.

    Rejects malformed lines, unknown or repeated keys and keys without a value;
    every error names the offending line.
    """
    parsed: Dict[str, str] = {}
    first_seen: Dict[str, int] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = _line_of(binding)
        if binding.error:
            raise ConfigError(f"line {line}", f"expected `key = value`, got {binding.original.string.strip()!r}")
        key = binding.key
        if key is None:
            continue
        if key not in _KEYS:
            raise ConfigError(key, f"unknown configuration key (line {line})")
        if key in first_seen:
            raise ConfigError(key, f"duplicate key (line {line}, first set on line {first_seen[key]})")
        if binding.value is None or binding.value == "":
            raise ConfigError(key, f"missing value (line {line})")
        first_seen[key] = line
        parsed[key] = binding.value
    return parsed


def _convert(key: str, raw: str):
    parser = _KEYS[key][2]
    try:
        return parser(raw)
    except ValueError as e:
        raise ConfigError(key, f"cannot parse {raw!r} ({e})") from e


def experiment_config_from_text(text: str) -> ExperimentConfig:
    values = {key: _convert(key, raw) for key, raw in parse_flat_config(text).items()}

    model, synth, train = {}, {}, {}
    attention, pyramid = {}, {}
    betas = list(TrainConfig().betas)
    for key, value in values.items():
        section, path = _KEYS[key][0], _KEYS[key][1]
        if section == "model":
            if path.startswith("attention."):
                attention[path.split(".", 1)[1]] = value
            elif path.startswith("pyramid."):
                pyramid[path.split(".", 1)[1]] = value
            else:
                model[path] = value
        elif section == "synth":
            synth[path] = value
        elif section == "train":
            if path.startswith("betas."):
                betas[int(path.split(".")[1])] = value
            else:
                train[path] = value

    if "input_size" in values:
        model["input_size"] = values["input_size"]
        synth["image_size"] = values["input_size"]
    if "variant" in values:
        model["variant"] = values["variant"]
        train["variant"] = values["variant"]
    if "seed" in values:
        synth["seed"] = values["seed"]
        train["seed"] = values["seed"]

    config = ExperimentConfig(
        model=TafnetConfig(attention=AttentionConfig(**attention), pyramid=PyramidConfig(**pyramid), **model),
        synth=SynthConfig(**synth),
        train=TrainConfig(betas=tuple(betas), **train),
    )
    config.validate()
    return config


def load_experiment_config(path: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Load a config file (defaults when path is None); seed overrides the file"""
    if path is None:
        config = ExperimentConfig()
    else:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError("config", f"file not found: {config_path}")
        config = experiment_config_from_text(config_path.read_text(encoding="utf-8"))
    if seed is not None:
        config = config.with_seed(seed)
    config.validate()
    return config


def _lookup(config: ExperimentConfig, key: str):
    section, path = _KEYS[key][0], _KEYS[key][1]
    if section == "shared":
        return {
            "input_size": config.model.input_size,
            "variant": config.model.variant,
            "seed": config.train.seed,
        }[key]
    node = getattr(config, section)
    for part in path.split("."):
        node = node[int(part)] if part.isdigit() else getattr(node, part)
    return node


def experiment_config_to_text(config: ExperimentConfig) -> str:
    lines = [f"{key} = {_KEYS[key][3](_lookup(config, key))}" for key in _KEYS]
    return "\n".join(lines) + "\n"


def model_config_to_text(config: TafnetConfig) -> str:
    """Canonical text form of a TafnetConfig (sorted keys)"""
    experiment = ExperimentConfig(model=config)
    lines = [f"{key} = {_KEYS[key][3](_lookup(experiment, key))}" for key in sorted(MODEL_KEYS)]
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> TafnetConfig:
    values = parse_flat_config(text)
    foreign = sorted(set(values) - set(MODEL_KEYS))
    if foreign:
        raise ConfigError(foreign[0], "not a model configuration key")
    return experiment_config_from_text(text).model


@dataclass(frozen=True)
class RuntimeSettings:
    log_level: str = "INFO"
    check_finite: bool = True
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None


def get_runtime_settings() -> RuntimeSettings:
    """Runtime settings from the environment (and a .env file if present)"""
    load_dotenv()
    check_finite = os.environ.get("TAFNET_CHECK_FINITE", "1")
    try:
        check = _parse_bool(check_finite)
    except ValueError as e:
        raise ConfigError("TAFNET_CHECK_FINITE", str(e)) from e
    return RuntimeSettings(
        log_level=os.environ.get("TAFNET_LOG_LEVEL", "INFO").upper(),
        check_finite=check,
        data_dir=os.environ.get("TAFNET_DATA_DIR"),
        checkpoint=os.environ.get("TAFNET_CHECKPOINT"),
    )


def get_dashboard_settings() -> RuntimeSettings:
    """Get dashboard paths from Streamlit secrets or environment variables"""
    import streamlit as st

    settings = get_runtime_settings()
    # Try to get from secrets first
    try:
        return replace(
            settings,
            data_dir=st.secrets["TAFNET_DATA_DIR"],
            checkpoint=st.secrets["TAFNET_CHECKPOINT"],
        )
    except (KeyError, FileNotFoundError):
        # Fall back to environment variables
        return settings
