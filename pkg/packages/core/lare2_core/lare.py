"""
Latent reconstruction error: the single-step denoising residual in latent
space, squared and averaged over an ensemble of noise draws at a fixed
timestep. Also the multi-step DDIM round-trip baseline and the real/fake
loss-gap profile.
"""

import csv
import logging
import struct
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import LatentCodec, encode_records
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, ddim_generate, ddim_invert, forward_diffuse
from .errors import DataError, NumericError, ParameterError, ShapeError
from .manifest import DatasetManifest
from .seeding import derive_seed, make_generator

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"LAREFT1"
_CACHE_HEADER = struct.Struct("<IIIII")


@dataclass(frozen=True, eq=False)
class LaREMap:
    """Nonnegative (C, H, W) error map. DIRE maps carry e=0 and t=steps."""

    values: torch.Tensor
    t: int
    e: int
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


@dataclass
class ExtractionBudget:
    denoiser_calls: int = 0
    wall_time: float = 0.0


################################################################################
# Single-step extraction
################################################################################
def check_extraction_step(t: int, schedule: NoiseSchedule) -> None:
    """Extraction steps lie in 1..T."""
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"extraction step must lie in [1, {schedule.T}], got {t}")


@torch.no_grad()
def compute_residual(
    latent: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    prediction = denoiser.predict(forward_diffuse(latent, t, eps, schedule), t)
    residual = eps - prediction
    if not torch.isfinite(residual).all():
        raise NumericError(f"non-finite denoising residual at t={t}")
    return residual


def ensemble_mean(squared: torch.Tensor) -> torch.Tensor:
    """
    Mean over the leading ensemble axis. Draws are sorted per element and
    summed in a fixed sequential order, so any permutation of the ensemble
    reduces to the same bits.
    """
    ordered = torch.sort(squared, dim=0).values
    total = ordered[0].clone()
    for draw in ordered[1:]:
        total = total + draw
    return total / squared.shape[0]


def compute_lare(
    latent: torch.Tensor,
    t: int,
    e: int,
    seed: int,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
) -> LaREMap:
    if e < 1:
        raise ParameterError(f"ensemble size must be at least 1, got {e}")
    check_extraction_step(t, schedule)

    eps = torch.randn((e, *latent.shape), generator=make_generator(seed), dtype=latent.dtype)
    squared = torch.stack(
        [compute_residual(latent, t, eps[i], denoiser, schedule).square() for i in range(e)]
    )
    return LaREMap(values=ensemble_mean(squared), t=t, e=e, seed=seed)


def dire_feature(
    latent: torch.Tensor, denoiser: Denoiser, schedule: NoiseSchedule, steps: int
) -> LaREMap:
    """Squared error of a full DDIM inversion then regeneration (2 x steps denoiser calls)."""
    if steps < 1:
        raise ParameterError(f"DIRE needs at least one step, got {steps}")
    reconstruction = ddim_generate(ddim_invert(latent, denoiser, schedule, steps), denoiser, schedule, steps)
    return LaREMap(values=(latent - reconstruction).square(), t=steps, e=0)


################################################################################
# Corpus extraction
################################################################################
def extract_corpus(
    manifest: DatasetManifest,
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    *,
    t: int,
    e: int,
    seed: int,
    jobs: int = 1,
) -> dict[str, LaREMap]:
    """LaRE for every record; per-image seeds come from (seed, image id)."""
    check_extraction_step(t, schedule)
    latents = encode_records(codec, manifest).to(dtype=next(denoiser.parameters()).dtype)
    ids = manifest.ids

    def extract(index: int) -> LaREMap:
        return compute_lare(latents[index], t, e, derive_seed(seed, ids[index]), denoiser, schedule)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        maps = list(pool.map(extract, range(len(ids))))
    logger.info(f"Extracted LaRE (t={t}, e={e}) for {len(ids)} images")
    return dict(zip(ids, maps))


def extract_dire_corpus(
    manifest: DatasetManifest,
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    *,
    steps: int,
    jobs: int = 1,
) -> dict[str, LaREMap]:
    latents = encode_records(codec, manifest).to(dtype=next(denoiser.parameters()).dtype)
    ids = manifest.ids

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        maps = list(pool.map(lambda i: dire_feature(latents[i], denoiser, schedule, steps), range(len(ids))))
    logger.info(f"Extracted DIRE ({steps} steps) for {len(ids)} images")
    return dict(zip(ids, maps))


################################################################################
# Loss-gap profile
################################################################################
@dataclass(frozen=True, eq=False)
class LossGapRow:
    t: int
    real_losses: np.ndarray
    fake_losses: np.ndarray

    @property
    def mean_real(self) -> float:
        return float(self.real_losses.mean())

    @property
    def mean_fake(self) -> float:
        return float(self.fake_losses.mean())

    @property
    def n_real(self) -> int:
        return len(self.real_losses)

    @property
    def n_fake(self) -> int:
        return len(self.fake_losses)

    @property
    def gap(self) -> float:
        return self.mean_real - self.mean_fake


@torch.no_grad()
def _population_losses(
    latents: torch.Tensor, t: int, seed: int, denoiser: Denoiser, schedule: NoiseSchedule
) -> np.ndarray:
    # One draw per image, seeded by its position so paired populations share noise.
    eps = torch.stack(
        [
            torch.randn(latents.shape[1:], generator=make_generator(derive_seed(seed, t, i)), dtype=latents.dtype)
            for i in range(latents.shape[0])
        ]
    )
    residual = compute_residual(latents, t, eps, denoiser, schedule)
    return residual.square().flatten(1).sum(dim=1).double().numpy()


def loss_gap_profile(
    real_latents: Sequence[torch.Tensor] | torch.Tensor,
    fake_latents: Sequence[torch.Tensor] | torch.Tensor,
    t_grid: Sequence[int],
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    seed: int,
) -> list[LossGapRow]:
    if not len(real_latents) or not len(fake_latents):
        raise ParameterError("loss-gap populations must be non-empty")
    reals = torch.stack(list(real_latents)) if not isinstance(real_latents, torch.Tensor) else real_latents
    fakes = torch.stack(list(fake_latents)) if not isinstance(fake_latents, torch.Tensor) else fake_latents
    if reals.shape[1:] != fakes.shape[1:]:
        raise ShapeError(f"population shapes differ: {tuple(reals.shape[1:])} vs {tuple(fakes.shape[1:])}")

    rows = []
    for t in t_grid:
        check_extraction_step(t, schedule)
        row = LossGapRow(
            t=t,
            real_losses=_population_losses(reals, t, seed, denoiser, schedule),
            fake_losses=_population_losses(fakes, t, seed, denoiser, schedule),
        )
        logger.info(f"t={t}: mean real loss {row.mean_real:.4f}, mean fake loss {row.mean_fake:.4f}")
        rows.append(row)
    return rows


def bootstrap_gap_confidence(
    real_losses: np.ndarray, fake_losses: np.ndarray, resamples: int = 1000, seed: int = 0
) -> float:
    """Fraction of bootstrap resamples in which the mean real loss exceeds the mean fake loss."""
    rng = np.random.default_rng(seed)
    real_means = real_losses[rng.integers(0, len(real_losses), size=(resamples, len(real_losses)))].mean(axis=1)
    fake_means = fake_losses[rng.integers(0, len(fake_losses), size=(resamples, len(fake_losses)))].mean(axis=1)
    return float(np.mean(real_means > fake_means))


def write_loss_gap_csv(path: Path, rows: Sequence[LossGapRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["t", "mean_real", "mean_fake", "n_real", "n_fake"])
        for row in rows:
            writer.writerow([row.t, f"{row.mean_real:.10g}", f"{row.mean_fake:.10g}", row.n_real, row.n_fake])


def write_gap_confidence_csv(
    path: Path, rows: Sequence[LossGapRow], resamples: int = 1000, seed: int = 0
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["t", "gap", "confidence"])
        for row in rows:
            confidence = bootstrap_gap_confidence(row.real_losses, row.fake_losses, resamples, seed)
            writer.writerow([row.t, f"{row.gap:.10g}", f"{confidence:.4f}"])


################################################################################
# Feature cache
################################################################################
def encode_cache(maps: Mapping[str, LaREMap]) -> bytes:
    chunks = [CACHE_MAGIC, struct.pack("<I", len(maps))]
    for image_id, lare in maps.items():
        encoded_id = image_id.encode("utf-8")
        channels, height, width = lare.shape
        chunks.append(struct.pack("<I", len(encoded_id)))
        chunks.append(encoded_id)
        chunks.append(_CACHE_HEADER.pack(height, width, channels, lare.t, lare.e))
        values = lare.values.detach().cpu().permute(1, 2, 0).numpy().astype("<f4")
        chunks.append(np.ascontiguousarray(values).tobytes())
    return b"".join(chunks)


def decode_cache(payload: bytes, source: str = "<bytes>") -> dict[str, LaREMap]:
    if not payload.startswith(CACHE_MAGIC):
        raise DataError(f"{source}: not a LaRE cache (bad magic)")
    offset = len(CACHE_MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise DataError(f"{source}: truncated cache at byte {offset}")
        chunk = payload[offset : offset + size]
        offset += size
        return chunk

    (count,) = struct.unpack("<I", take(4))
    maps: dict[str, LaREMap] = {}
    for _ in range(count):
        (id_length,) = struct.unpack("<I", take(4))
        image_id = take(id_length).decode("utf-8")
        height, width, channels, t, e = _CACHE_HEADER.unpack(take(_CACHE_HEADER.size))
        values = np.frombuffer(take(4 * height * width * channels), dtype="<f4")
        maps[image_id] = LaREMap(
            values=torch.from_numpy(values.reshape(height, width, channels).copy()).permute(2, 0, 1).contiguous(),
            t=t,
            e=e,
        )
    if offset != len(payload):
        raise DataError(f"{source}: {len(payload) - offset} trailing bytes after last record")
    return maps


def write_lare_cache(path: Path, maps: Mapping[str, LaREMap]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_cache(maps))
    logger.info(f"Wrote {len(maps)} feature records to {path}")


def read_lare_cache(path: Path) -> dict[str, LaREMap]:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read feature cache {path}: {e}") from e
    return decode_cache(payload, source=str(path))


def gather_maps(maps: Mapping[str, LaREMap], manifest: DatasetManifest) -> torch.Tensor:
    """Stack cached maps in manifest order, naming the first missing id."""
    missing = [image_id for image_id in manifest.ids if image_id not in maps]
    if missing:
        raise DataError(f"no cached error map for image id {missing[0]} ({len(missing)} missing)")
    return torch.stack([maps[image_id].values for image_id in manifest.ids])
