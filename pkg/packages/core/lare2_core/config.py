from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch

from .errors import ParameterError


class DetectorMode(Enum):
    BASELINE = "baseline"
    ESR = "esr"
    ECR = "ecr"
    EGRE = "egre"
    CONCAT = "concat"
    LARE_ONLY = "lare_only"


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


class Precision(Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self is Precision.FLOAT64 else torch.float32


class Stage(Enum):
    CODEC = "codec"
    DIFFUSION = "diffusion"
    DETECTOR = "detector"


@dataclass(frozen=True)
class OptimSettings:
    epochs: int
    batch_size: int
    learning_rate: float
    optimizer: OptimizerKind


@dataclass(frozen=True)
class TrainConfig:
    # detector stage; lr and batch size follow the published detector setup
    epochs: int = 40
    batch_size: int = 48
    learning_rate: float = 1e-4
    optimizer: OptimizerKind = OptimizerKind.ADAM

    codec_epochs: int = 40
    codec_batch_size: int = 32
    codec_learning_rate: float = 1e-3
    codec_optimizer: OptimizerKind = OptimizerKind.ADAM

    diffusion_epochs: int = 150
    diffusion_batch_size: int = 32
    diffusion_learning_rate: float = 2e-4
    diffusion_optimizer: OptimizerKind = OptimizerKind.SGD

    seed: int = 0

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_extract: int = 200
    e_ensemble: int = 4
    ddim_steps: int = 50
    dire_steps: int = 20

    heads: int = 4
    head_dim: int = 8
    feature_channels: int = 32
    latent_channels: int = 4
    spatial_factor: int = 8
    denoiser_channels: int = 32
    denoiser_blocks: int = 3
    input_size: int = 64
    image_channels: int = 1

    mode: DetectorMode = DetectorMode.EGRE
    precision: Precision = Precision.FLOAT32
    jobs: int = 1
    artifacts_dir: Path = field(default_factory=lambda: Path("artifacts"))

    def __post_init__(self) -> None:
        for name in (
            "epochs",
            "batch_size",
            "codec_epochs",
            "codec_batch_size",
            "diffusion_epochs",
            "diffusion_batch_size",
            "T",
            "t_extract",
            "e_ensemble",
            "ddim_steps",
            "dire_steps",
            "heads",
            "head_dim",
            "feature_channels",
            "latent_channels",
            "spatial_factor",
            "denoiser_channels",
            "denoiser_blocks",
            "input_size",
            "image_channels",
            "jobs",
        ):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")

        # Zero learning rates are allowed: they are the null-update check.
        for name in ("learning_rate", "codec_learning_rate", "diffusion_learning_rate"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")

        if self.seed < 0:
            raise ParameterError("seed must be non-negative")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ParameterError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.t_extract > self.T:
            raise ParameterError(f"t_extract={self.t_extract} exceeds T={self.T}")
        if self.dire_steps > self.T or self.ddim_steps > self.T:
            raise ParameterError("DDIM step counts cannot exceed T")
        if self.input_size % self.spatial_factor:
            raise ParameterError(
                f"input_size={self.input_size} is not divisible by spatial_factor={self.spatial_factor}"
            )

    def stage(self, stage: Stage) -> OptimSettings:
        match stage:
            case Stage.CODEC:
                return OptimSettings(
                    epochs=self.codec_epochs,
                    batch_size=self.codec_batch_size,
                    learning_rate=self.codec_learning_rate,
                    optimizer=self.codec_optimizer,
                )
            case Stage.DIFFUSION:
                return OptimSettings(
                    epochs=self.diffusion_epochs,
                    batch_size=self.diffusion_batch_size,
                    learning_rate=self.diffusion_learning_rate,
                    optimizer=self.diffusion_optimizer,
                )
            case Stage.DETECTOR:
                return OptimSettings(
                    epochs=self.epochs,
                    batch_size=self.batch_size,
                    learning_rate=self.learning_rate,
                    optimizer=self.optimizer,
                )

    @property
    def dtype(self) -> torch.dtype:
        return self.precision.dtype
