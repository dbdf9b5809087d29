import dataclasses
import hashlib
import os
from collections.abc import Mapping
from enum import Enum
from pathlib import Path
from typing import Any

import click
from lare2_core.config import DetectorMode, TrainConfig
from lare2_core.errors import ParameterError

SEED_ENV_VAR = "LARE2_SEED"
DEFAULT_CONFIG_FILE = "lare2.conf"


class ConfigKey(Enum):
    EPOCHS = "epochs"
    BATCH_SIZE = "batch_size"
    LEARNING_RATE = "learning_rate"
    OPTIMIZER = "optimizer"
    CODEC_EPOCHS = "codec_epochs"
    CODEC_BATCH_SIZE = "codec_batch_size"
    CODEC_LEARNING_RATE = "codec_learning_rate"
    CODEC_OPTIMIZER = "codec_optimizer"
    DIFFUSION_EPOCHS = "diffusion_epochs"
    DIFFUSION_BATCH_SIZE = "diffusion_batch_size"
    DIFFUSION_LEARNING_RATE = "diffusion_learning_rate"
    DIFFUSION_OPTIMIZER = "diffusion_optimizer"
    SEED = "seed"
    T = "T"
    BETA_START = "beta_start"
    BETA_END = "beta_end"
    T_EXTRACT = "t_extract"
    E_ENSEMBLE = "e_ensemble"
    DDIM_STEPS = "ddim_steps"
    DIRE_STEPS = "dire_steps"
    HEADS = "heads"
    HEAD_DIM = "head_dim"
    FEATURE_CHANNELS = "feature_channels"
    LATENT_CHANNELS = "latent_channels"
    SPATIAL_FACTOR = "spatial_factor"
    DENOISER_CHANNELS = "denoiser_channels"
    DENOISER_BLOCKS = "denoiser_blocks"
    INPUT_SIZE = "input_size"
    IMAGE_CHANNELS = "image_channels"
    MODE = "mode"
    PRECISION = "precision"
    JOBS = "jobs"
    ARTIFACTS_DIR = "artifacts_dir"
    # Pipeline keys with no counterpart in TrainConfig.
    GENERATORS = "generators"
    PRETRAIN_COUNT = "pretrain_count"
    REAL_POOL_COUNT = "real_pool_count"
    REALS_PER_SUBSET = "reals_per_subset"
    FAKES_PER_SUBSET = "fakes_per_subset"

    @classmethod
    def parse(cls, name: str) -> "ConfigKey":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"Unknown configuration key: {name}") from None


PIPELINE_DEFAULTS: dict[ConfigKey, Any] = {
    ConfigKey.GENERATORS: "ddpm_a:a:ddpm,ddim_a:a:ddim,ddpm_b:b:ddpm",
    ConfigKey.PRETRAIN_COUNT: 2000,
    ConfigKey.REAL_POOL_COUNT: 600,
    ConfigKey.REALS_PER_SUBSET: 200,
    ConfigKey.FAKES_PER_SUBSET: 200,
}


class ConfigError(click.UsageError):
    pass


def _as_text(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, Path):
        return value.as_posix()
    return str(value)


def default_values() -> dict[str, str]:
    defaults = TrainConfig()
    values = {field.name: _as_text(getattr(defaults, field.name)) for field in dataclasses.fields(TrainConfig)}
    values.update({key.value: _as_text(value) for key, value in PIPELINE_DEFAULTS.items()})
    return values


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """`key = value` lines; `#` starts a comment, blank lines are ignored."""
    data: dict[str, str] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        if not separator or not key.strip():
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw_line.strip()!r}")
        data[ConfigKey.parse(key.strip()).value] = value.strip()
    return data


def serialize_config(data: Mapping[str, str]) -> str:
    return "".join(f"{key} = {data[key]}\n" for key in sorted(data))


def config_hash(data: Mapping[str, str]) -> str:
    return hashlib.sha256(serialize_config(data).encode("utf-8")).hexdigest()


class ConfigManager:
    def __init__(self, filename: Path | str = DEFAULT_CONFIG_FILE) -> None:
        self.file_path: Path = Path(filename)
        self.data: dict[str, str] = {}
        self._load_config()

    def _load_config(self) -> None:
        """Load values from the key = value config file, if present."""
        if self.file_path.exists():
            self.data = parse_config(self.file_path.read_text(encoding="utf-8"), str(self.file_path))

    def _save_config(self) -> None:
        self.file_path.parent.mkdir(parents=True, exist_ok=True)
        self.file_path.write_text(serialize_config(self.data), encoding="utf-8")

    def is_configured(self) -> bool:
        return self.file_path.exists()

    def get(self, key: ConfigKey, default: Any = None, required: bool = True) -> Any:
        """Differs from standard gets in that it errors on missing values by default."""
        value = self.data.get(key.value, default)
        if required and value is None:
            raise ConfigError(f"Missing required configuration key: {key.value}")
        return value

    def upsert(self, key: ConfigKey, value: Any) -> None:
        self.data[key.value] = _as_text(value)
        self._save_config()

    def delete(self, key: ConfigKey) -> None:
        if key.value in self.data:
            del self.data[key.value]
            self._save_config()

    def effective_values(self, overrides: Mapping[ConfigKey, Any] | None = None) -> dict[str, str]:
        """Defaults < config file < LARE2_SEED < explicit overrides (CLI flags)."""
        values = default_values()
        values.update(self.data)
        if seed := os.getenv(SEED_ENV_VAR):
            values[ConfigKey.SEED.value] = seed.strip()
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key.value] = _as_text(value)
        return values


def build_train_config(values: Mapping[str, str]) -> TrainConfig:
    kwargs = {}
    for field in dataclasses.fields(TrainConfig):
        text = values[field.name]
        try:
            kwargs[field.name] = field.type(text)
        except ValueError:
            raise ConfigError(f"Invalid value for {field.name}: {text!r}") from None
    try:
        return TrainConfig(**kwargs)
    except ParameterError as e:
        raise ConfigError(str(e)) from e


def pipeline_value(values: Mapping[str, str], key: ConfigKey) -> Any:
    default = PIPELINE_DEFAULTS[key]
    try:
        return type(default)(values[key.value])
    except ValueError:
        raise ConfigError(f"Invalid value for {key.value}: {values[key.value]!r}") from None


def reload_config(config: ConfigManager) -> None:
    values = config.effective_values()

    def prompt(key: ConfigKey, text: str, type: Any = str) -> None:
        config.upsert(key, click.prompt(text, type=type, default=values[key.value], show_default=True))

    prompt(ConfigKey.SEED, "Global seed", int)
    prompt(ConfigKey.ARTIFACTS_DIR, "Artifacts directory")
    prompt(ConfigKey.T, "Diffusion steps T", int)
    prompt(ConfigKey.T_EXTRACT, "LaRE extraction timestep t", int)
    prompt(ConfigKey.E_ENSEMBLE, "Noise ensemble size e", int)
    prompt(ConfigKey.DIRE_STEPS, "DDIM steps for the DIRE baseline", int)
    prompt(
        ConfigKey.MODE,
        "Detector mode",
        click.Choice([mode.value for mode in DetectorMode]),
    )
    prompt(ConfigKey.EPOCHS, "Detector epochs", int)
    prompt(ConfigKey.BATCH_SIZE, "Detector batch size", int)
    prompt(ConfigKey.LEARNING_RATE, "Detector learning rate", float)
    prompt(ConfigKey.DIFFUSION_EPOCHS, "Diffusion epochs", int)
    prompt(ConfigKey.GENERATORS, "Generators (tag:weights:sampler, comma separated)")
    prompt(ConfigKey.JOBS, "Worker threads", int)

    build_train_config(config.effective_values())
    click.echo(f"Configuration saved to {config.file_path}\n")
