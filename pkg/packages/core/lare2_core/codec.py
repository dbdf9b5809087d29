import logging
import math
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import TensorDataset

from .checkpoint import (
    load_module_records,
    meta_int,
    meta_records,
    module_records,
    read_checkpoint,
    write_checkpoint,
)
from .config import Stage, TrainConfig
from .errors import DataError, ParameterError, ShapeError
from .images import load_images
from .manifest import DatasetManifest
from .training import (
    TrainingRun,
    build_optimizer,
    deterministic_algorithms,
    ensure_finite_loss,
    init_module,
    seeded_loader,
)

logger = logging.getLogger(__name__)

NAMESPACE = "codec"


class LatentCodec(nn.Module):
    """
    Plain convolutional autoencoder mapping (C, H, W) images in [-1, 1] to
    whitened (latent_channels, H / f, W / f) latents.
    """

    def __init__(
        self,
        image_channels: int = 1,
        latent_channels: int = 4,
        spatial_factor: int = 8,
        hidden: int = 32,
    ):
        super().__init__()
        stages = int(math.log2(spatial_factor))
        if 2**stages != spatial_factor:
            raise ParameterError(f"spatial_factor must be a power of two, got {spatial_factor}")

        self.image_channels = image_channels
        self.latent_channels = latent_channels
        self.spatial_factor = spatial_factor
        self.hidden = hidden

        encoder: list[nn.Module] = [nn.Conv2d(image_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            encoder += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        encoder.append(nn.Conv2d(hidden, latent_channels, 1))
        self.encoder = nn.Sequential(*encoder)

        decoder: list[nn.Module] = [nn.Conv2d(latent_channels, hidden, 1), nn.SiLU()]
        for _ in range(stages):
            decoder += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        decoder.append(nn.Conv2d(hidden, image_channels, 3, padding=1))
        self.decoder = nn.Sequential(*decoder)

        # Whitening statistics, stored as top-level checkpoint records.
        self.register_buffer("latent_mean", torch.zeros(latent_channels), persistent=False)
        self.register_buffer("latent_std", torch.ones(latent_channels), persistent=False)

    def _check_image(self, images: torch.Tensor) -> None:
        channels, height, width = images.shape[-3:]
        if channels != self.image_channels:
            raise ShapeError(f"expected {self.image_channels} image channels, got {channels}")
        if height % self.spatial_factor or width % self.spatial_factor:
            raise ShapeError(
                f"image {height}x{width} is not divisible by spatial factor {self.spatial_factor}"
            )

    def _stat(self, stat: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return stat.to(like.dtype).reshape(-1, 1, 1)

    def encode_raw(self, images: torch.Tensor) -> torch.Tensor:
        self._check_image(images)
        single = images.dim() == 3
        latents = self.encoder(images.unsqueeze(0) if single else images)
        return latents.squeeze(0) if single else latents

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        raw = self.encode_raw(images)
        return (raw - self._stat(self.latent_mean, raw)) / self._stat(self.latent_std, raw)

    def decode_raw(self, raw_latents: torch.Tensor) -> torch.Tensor:
        if raw_latents.shape[-3] != self.latent_channels:
            raise ShapeError(
                f"expected {self.latent_channels} latent channels, got {raw_latents.shape[-3]}"
            )
        single = raw_latents.dim() == 3
        images = self.decoder(raw_latents.unsqueeze(0) if single else raw_latents)
        return images.squeeze(0) if single else images

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[-3] != self.latent_channels:
            raise ShapeError(
                f"expected {self.latent_channels} latent channels, got {latents.shape[-3]}"
            )
        raw = latents * self._stat(self.latent_std, latents) + self._stat(self.latent_mean, latents)
        return self.decode_raw(raw).clamp(-1.0, 1.0)

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        """Unclamped round trip used as the training target path."""
        return self.decode_raw(self.encode_raw(images))

    @torch.no_grad()
    def fit_whitening(self, images: torch.Tensor) -> None:
        raw = self.encode_raw(images)
        self.latent_mean = raw.mean(dim=(0, 2, 3))
        self.latent_std = raw.std(dim=(0, 2, 3)).clamp_min(1e-6)


def psnr(reference: torch.Tensor, estimate: torch.Tensor, value_range: float = 2.0) -> float:
    mse = F.mse_loss(estimate, reference).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(value_range**2 / mse)


@torch.no_grad()
def encode_records(codec: LatentCodec, manifest: DatasetManifest, batch_size: int = 256) -> torch.Tensor:
    """Whitened latents for every record, in manifest order."""
    dtype = next(codec.parameters()).dtype
    paths = manifest.paths()
    chunks = [
        codec.encode(load_images(paths[start : start + batch_size]).to(dtype=dtype))
        for start in range(0, len(paths), batch_size)
    ]
    if not chunks:
        raise DataError("no records to encode")
    return torch.cat(chunks)


def train_codec(
    manifest: DatasetManifest,
    config: TrainConfig,
    seed: int,
    checkpoint_path: Path | None = None,
) -> TrainingRun[LatentCodec]:
    if any(record.label != 0 for record in manifest):
        raise ParameterError("codec training takes real images only")
    train = manifest.filter(split="train")
    if not len(train):
        raise ParameterError("codec training needs a non-empty training split")

    settings = config.stage(Stage.CODEC)
    dtype = config.dtype
    images = load_images(train.paths()).to(dtype=dtype)

    codec = init_module(
        lambda: LatentCodec(
            image_channels=config.image_channels,
            latent_channels=config.latent_channels,
            spatial_factor=config.spatial_factor,
        ),
        seed,
        dtype,
    )
    optimizer = build_optimizer(codec.parameters(), settings)
    loader = seeded_loader(TensorDataset(images), settings.batch_size, seed)

    logger.info(f"Training codec on {len(train)} images for {settings.epochs} epochs")
    epoch_losses: list[float] = []
    with deterministic_algorithms():
        for epoch in range(1, settings.epochs + 1):
            total, seen = 0.0, 0
            for (batch,) in loader:
                loss = F.mse_loss(codec.reconstruct(batch), batch)
                ensure_finite_loss(
                    loss,
                    stage="codec",
                    epoch=epoch,
                    save_state=lambda path: save_codec(path, codec),
                    checkpoint_path=checkpoint_path,
                )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * batch.shape[0]
                seen += batch.shape[0]

            epoch_losses.append(total / seen)
            logger.info(f"codec epoch {epoch}/{settings.epochs}: reconstruction MSE {epoch_losses[-1]:.5f}")

    codec.fit_whitening(images)
    codec.eval()

    metrics: dict[str, float] = {}
    with torch.no_grad():
        reconstructed = codec.decode(codec.encode(images))
        metrics["train_psnr"] = psnr(images, reconstructed)
        metrics["train_mse"] = F.mse_loss(reconstructed, images).item()
        held_out = manifest.filter(split="val")
        if len(held_out):
            val_images = load_images(held_out.paths()).to(dtype=dtype)
            reconstructed = codec.decode(codec.encode(val_images))
            metrics["val_psnr"] = psnr(val_images, reconstructed)
            metrics["val_mse"] = F.mse_loss(reconstructed, val_images).item()
    logger.info(", ".join(f"{name}={value:.3f}" for name, value in metrics.items()))

    if checkpoint_path is not None:
        save_codec(checkpoint_path, codec)
        logger.info(f"Saved codec to {checkpoint_path}")
    return TrainingRun(
        model=codec, epoch_losses=epoch_losses, checkpoint_path=checkpoint_path, metrics=metrics
    )


################################################################################
# Persistence
################################################################################
def save_codec(path: Path, codec: LatentCodec) -> None:
    records = meta_records(
        NAMESPACE,
        image_channels=codec.image_channels,
        latent_channels=codec.latent_channels,
        spatial_factor=codec.spatial_factor,
        hidden=codec.hidden,
    )
    records.update(module_records(codec, NAMESPACE))
    records["latent_mean"] = codec.latent_mean
    records["latent_std"] = codec.latent_std
    write_checkpoint(path, records)


def load_codec(path: Path, dtype: torch.dtype = torch.float32) -> LatentCodec:
    records = read_checkpoint(path)
    codec = LatentCodec(
        image_channels=meta_int(records, NAMESPACE, "image_channels"),
        latent_channels=meta_int(records, NAMESPACE, "latent_channels"),
        spatial_factor=meta_int(records, NAMESPACE, "spatial_factor"),
        hidden=meta_int(records, NAMESPACE, "hidden"),
    ).to(dtype=dtype)
    load_module_records(codec, records, NAMESPACE)
    for name in ("latent_mean", "latent_std"):
        if name not in records:
            raise DataError(f"{path}: missing record {name}")
        setattr(codec, name, torch.as_tensor(records[name]).to(dtype=dtype))
    return codec.eval()
