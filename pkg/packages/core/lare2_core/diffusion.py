import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from itertools import pairwise
from pathlib import Path

import torch
from torch.utils.data import TensorDataset

from .codec import LatentCodec, encode_records
from .config import Stage, TrainConfig
from .denoiser import ConvDenoiser, Denoiser, save_denoiser
from .errors import InversionError, NumericError, ParameterError, SamplingError, ShapeError
from .manifest import DatasetManifest
from .seeding import make_generator
from .training import (
    TrainingRun,
    build_optimizer,
    deterministic_algorithms,
    ensure_finite_loss,
    init_module,
    seeded_loader,
)

logger = logging.getLogger(__name__)


################################################################################
# Noise schedule
################################################################################
@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Float64 schedule tensors; index k holds step k + 1."""

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def check_step(self, t: int | torch.Tensor) -> None:
        steps = torch.as_tensor(t)
        if steps.numel() and (steps.min() < 0 or steps.max() > self.T):
            raise ParameterError(f"timestep out of range [0, {self.T}]: {t}")

    def alpha_bar(self, t: int | torch.Tensor) -> torch.Tensor:
        """Cumulative signal retention, with alpha_bar(0) = 1 exactly."""
        self.check_step(t)
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars])
        return padded[torch.as_tensor(t, dtype=torch.long)]


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be at least 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def _per_sample(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    values = values.to(dtype=like.dtype)
    if values.dim() == 0:
        return values
    return values.reshape(-1, *([1] * (like.dim() - 1)))


################################################################################
# Forward process and training objective
################################################################################
def forward_diffuse(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(x0.shape)}")
    alpha_bar = _per_sample(schedule.alpha_bar(t), x0)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def diffuse_stepwise(
    x0: torch.Tensor, t: int, schedule: NoiseSchedule, generator: torch.Generator
) -> torch.Tensor:
    """Draw x_t by iterating the one-step transition t times instead of the closed form."""
    schedule.check_step(t)
    x = x0
    for step in range(1, t + 1):
        beta = float(schedule.betas[step - 1])
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * noise
    return x


def denoise_loss(
    x0: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Sum of squared differences between the drawn noise and its prediction."""
    prediction = denoiser.predict(forward_diffuse(x0, t, eps, schedule), t)
    if not torch.isfinite(prediction).all():
        raise NumericError(f"denoiser produced non-finite output at t={t}")
    return (eps - prediction).square().sum()


def train_diffusion(
    manifest: DatasetManifest,
    codec: LatentCodec,
    config: TrainConfig,
    seed: int,
    checkpoint_path: Path | None = None,
) -> TrainingRun[ConvDenoiser]:
    records = manifest.filter(split="train")
    if not len(records):
        raise ParameterError("diffusion training needs a non-empty training split")

    settings = config.stage(Stage.DIFFUSION)
    dtype = config.dtype
    schedule = make_linear_schedule(config.T, config.beta_start, config.beta_end)

    latents = encode_records(codec, records).to(dtype=dtype)

    denoiser = init_module(
        lambda: ConvDenoiser(
            latent_channels=config.latent_channels,
            channels=config.denoiser_channels,
            blocks=config.denoiser_blocks,
        ),
        seed,
        dtype,
    )
    optimizer = build_optimizer(denoiser.parameters(), settings)
    loader = seeded_loader(TensorDataset(latents), settings.batch_size, seed)
    generator = make_generator(seed + 1)

    logger.info(
        f"Training denoiser on {len(records)} latents of shape {tuple(latents.shape[1:])} "
        f"for {settings.epochs} epochs ({settings.optimizer.value}, lr={settings.learning_rate})"
    )
    epoch_losses: list[float] = []
    with deterministic_algorithms():
        for epoch in range(1, settings.epochs + 1):
            total, seen = 0.0, 0
            for (x0,) in loader:
                t = torch.randint(1, config.T + 1, (x0.shape[0],), generator=generator)
                eps = torch.randn(x0.shape, generator=generator, dtype=dtype)
                try:
                    loss = denoise_loss(x0, t, eps, denoiser, schedule) / x0.shape[0]
                except NumericError:
                    # A non-finite prediction is a diverged step.
                    loss = torch.tensor(math.nan)
                ensure_finite_loss(
                    loss,
                    stage="diffusion",
                    epoch=epoch,
                    save_state=lambda path: save_denoiser(path, denoiser),
                    checkpoint_path=checkpoint_path,
                )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * x0.shape[0]
                seen += x0.shape[0]

            epoch_losses.append(total / seen)
            logger.info(f"diffusion epoch {epoch}/{settings.epochs}: mean loss {epoch_losses[-1]:.4f}")

    denoiser.eval()
    if checkpoint_path is not None:
        save_denoiser(checkpoint_path, denoiser)
        logger.info(f"Saved denoiser to {checkpoint_path}")
    return TrainingRun(model=denoiser, epoch_losses=epoch_losses, checkpoint_path=checkpoint_path)


################################################################################
# Sampling
################################################################################
def standard_normal(
    shape: tuple[int, ...], seed: int, sample_seeds: Sequence[int] | None = None, dtype: torch.dtype = torch.float32
) -> Callable[[], torch.Tensor]:
    """
    Repeatable standard normal draws of `shape`. With `sample_seeds`, row i
    of every draw comes from its own stream seeded by `sample_seeds[i]`, so a
    sample does not depend on what else is in the batch.
    """
    if sample_seeds is None:
        generator = make_generator(seed)
        return lambda: torch.randn(shape, generator=generator, dtype=dtype)
    if len(sample_seeds) != shape[0]:
        raise ParameterError(f"{len(sample_seeds)} sample seeds for a batch of {shape[0]}")
    generators = [make_generator(sample_seed) for sample_seed in sample_seeds]
    return lambda: torch.stack([torch.randn(shape[1:], generator=generator, dtype=dtype) for generator in generators])


@torch.no_grad()
def sample_ddpm(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    seed: int,
    dtype: torch.dtype = torch.float32,
    *,
    sample_seeds: Sequence[int] | None = None,
) -> torch.Tensor:
    """Ancestral sampling with the posterior-mean update and no noise at the last step."""
    draw = standard_normal(shape, seed, sample_seeds, dtype)
    x = draw()

    for t in range(schedule.T, 0, -1):
        beta = float(schedule.betas[t - 1])
        alpha = float(schedule.alphas[t - 1])
        alpha_bar = float(schedule.alpha_bar(t))
        alpha_bar_prev = float(schedule.alpha_bar(t - 1))

        eps = denoiser.predict(x, t)
        x = (x - beta / math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha)
        if t > 1:
            variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
            x = x + math.sqrt(variance) * draw()

        if not torch.isfinite(x).all():
            raise SamplingError("non-finite DDPM intermediate", step=t)

    return x


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """[0, tau_1, ..., tau_steps] evenly subsampling 1..T, with tau_steps = T."""
    if not 0 <= steps <= T:
        raise ParameterError(f"DDIM steps must lie in [0, {T}], got {steps}")
    return [0] + [(k * T) // steps for k in range(1, steps + 1)]


def _ddim_step(
    x: torch.Tensor, eps: torch.Tensor, alpha_bar_from: float, alpha_bar_to: float
) -> torch.Tensor:
    x0_hat = (x - math.sqrt(1.0 - alpha_bar_from) * eps) / math.sqrt(alpha_bar_from)
    return math.sqrt(alpha_bar_to) * x0_hat + math.sqrt(1.0 - alpha_bar_to) * eps


@torch.no_grad()
def ddim_invert(
    x0: torch.Tensor, denoiser: Denoiser, schedule: NoiseSchedule, steps: int
) -> torch.Tensor:
    x = x0
    for prev, cur in pairwise(ddim_timesteps(schedule.T, steps)):
        eps = denoiser.predict(x, cur)
        x = _ddim_step(x, eps, float(schedule.alpha_bar(prev)), float(schedule.alpha_bar(cur)))
        if not torch.isfinite(x).all():
            raise InversionError("non-finite DDIM inversion intermediate", step=cur)
    return x


@torch.no_grad()
def ddim_generate(
    x_T: torch.Tensor, denoiser: Denoiser, schedule: NoiseSchedule, steps: int
) -> torch.Tensor:
    x = x_T
    for prev, cur in reversed(list(pairwise(ddim_timesteps(schedule.T, steps)))):
        eps = denoiser.predict(x, cur)
        x = _ddim_step(x, eps, float(schedule.alpha_bar(cur)), float(schedule.alpha_bar(prev)))
        if not torch.isfinite(x).all():
            raise SamplingError("non-finite DDIM intermediate", step=cur)
    return x
