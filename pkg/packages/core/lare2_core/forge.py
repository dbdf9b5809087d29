import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .codec import LatentCodec
from .denoiser import load_denoiser
from .diffusion import NoiseSchedule, ddim_generate, sample_ddpm, standard_normal
from .errors import DataError, ParameterError
from .images import export_pnm, read_image, write_image
from .manifest import REAL_TAG, SPLITS, DatasetManifest, ManifestRecord
from .seeding import derive_seed

logger = logging.getLogger(__name__)


################################################################################
# Procedural "real" corpus
################################################################################
def _band_limited_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Gaussian random field with a random radial pass band and power-law slope."""
    freqs = np.fft.fftfreq(size)
    radius = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
    low = rng.uniform(0.0, 0.02)
    high = rng.uniform(0.15, 0.5)
    slope = rng.uniform(2.5, 3.5)

    amplitude = np.where((radius >= low) & (radius <= high), np.maximum(radius, 1.0 / size) ** -slope, 0.0)
    spectrum = np.fft.fft2(rng.standard_normal((size, size))) * amplitude
    field = np.real(np.fft.ifft2(spectrum))
    return (field - field.mean()) / (field.std() + 1e-8)


def _shape_coverage(rng: np.random.Generator, size: int) -> np.ndarray:
    """Anti-aliased disc or rectangle coverage in [0, 1] with an edge ramp of 2 to 4 pixels."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    extent = rng.uniform(0.08 * size, 0.3 * size)
    softness = rng.uniform(2.0, 4.0)

    if rng.random() < 0.5:
        distance = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2) - extent
    else:
        aspect = rng.uniform(0.5, 2.0)
        distance = np.maximum(np.abs(ys - cy) - extent, np.abs(xs - cx) - extent * aspect)
    return np.clip(0.5 - distance / softness, 0.0, 1.0)


def synth_image(rng: np.random.Generator, size: int = 64, channels: int = 1) -> np.ndarray:
    base = rng.uniform(0.4, 1.0) * _band_limited_field(rng, size)
    ys, xs = np.mgrid[0:size, 0:size]

    for _ in range(rng.integers(1, 4)):
        coverage = _shape_coverage(rng, size)
        fill = np.full((size, size), rng.uniform(-1.0, 1.0))
        if rng.random() < 0.5:
            # Striped interior supplies high-frequency regions next to flat ones.
            frequency = rng.uniform(0.08, 0.2)
            angle = rng.uniform(0.0, np.pi)
            phase = 2 * np.pi * frequency * (xs * np.cos(angle) + ys * np.sin(angle))
            fill = fill + rng.uniform(0.1, 0.25) * np.sin(phase)
        base = base * (1.0 - coverage) + fill * coverage

    tints = rng.uniform(0.7, 1.3, size=channels) if channels > 1 else np.ones(1)
    image = np.tanh(0.8 * base[None, :, :] * tints[:, None, None])
    return image.astype(np.float32)


def synth_real(
    count: int, seed: int, *, size: int = 64, channels: int = 1, prefix: str = REAL_TAG
) -> list[tuple[str, torch.Tensor]]:
    """`count` procedural images with ids `<prefix>/<index>`; identical per seed."""
    if count < 1:
        raise ParameterError(f"count must be at least 1, got {count}")
    return [
        (
            f"{prefix}/{index:05d}",
            torch.from_numpy(synth_image(np.random.default_rng(derive_seed(seed, index)), size, channels)),
        )
        for index in range(count)
    ]


def write_corpus(
    items: Sequence[tuple[str, torch.Tensor]],
    root: Path,
    *,
    label: int,
    generator: str,
    split_seed: int,
    split_fractions: tuple[float, float] = (0.8, 0.1),
    export_previews: bool = False,
) -> DatasetManifest:
    root = Path(root)
    splits = assign_splits([item_id for item_id, _ in items], split_seed, split_fractions)
    records = []
    for item_id, image in items:
        relative = Path("images") / f"{item_id}.limg"
        write_image(root / relative, image)
        if export_previews:
            export_pnm(root / "previews" / item_id, image)
        records.append(
            ManifestRecord(
                id=item_id,
                path=relative.as_posix(),
                label=label,
                generator=generator,
                split=splits[item_id],
            )
        )
    logger.info(f"Wrote {len(records)} images under {root / 'images'}")
    return DatasetManifest(records=tuple(records), root=root)


def assign_splits(
    ids: Sequence[str], seed: int, fractions: tuple[float, float] = (0.8, 0.1)
) -> dict[str, str]:
    """Seeded train/val/test assignment; the remainder after train and val goes to test."""
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    result = {}
    for rank, index in enumerate(order):
        split = SPLITS[0] if rank < n_train else SPLITS[1] if rank < n_train + n_val else SPLITS[2]
        result[ids[index]] = split
    return result


################################################################################
# Fake subsets
################################################################################
class Sampler(Enum):
    DDPM = "ddpm"
    DDIM = "ddim"


@dataclass(frozen=True)
class GeneratorSpec:
    tag: str
    checkpoint: Path
    sampler: Sampler

    @classmethod
    def parse(cls, text: str, checkpoint_for: Callable[[str], Path]) -> "GeneratorSpec":
        """`tag:weights:sampler`, e.g. `ddim_a:a:ddim`."""
        try:
            tag, weights, sampler = (part.strip() for part in text.split(":"))
            return cls(tag=tag, checkpoint=checkpoint_for(weights), sampler=Sampler(sampler))
        except ValueError as e:
            raise ParameterError(f"Invalid generator spec '{text}', expected tag:weights:sampler") from e


@torch.no_grad()
def generate_latents(
    spec: GeneratorSpec,
    schedule: NoiseSchedule,
    count: int,
    latent_shape: tuple[int, int, int],
    seed: int,
    ddim_steps: int,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    try:
        denoiser = load_denoiser(spec.checkpoint, dtype=dtype)
    except DataError as e:
        raise DataError(f"generator {spec.tag}: {e}") from e

    shape = (count, *latent_shape)
    # Image k draws only from derive_seed(seed, k).
    sample_seeds = [derive_seed(seed, index) for index in range(count)]
    match spec.sampler:
        case Sampler.DDPM:
            return sample_ddpm(denoiser, schedule, shape, seed, dtype=dtype, sample_seeds=sample_seeds)
        case Sampler.DDIM:
            x_T = standard_normal(shape, seed, sample_seeds, dtype)()
            return ddim_generate(x_T, denoiser, schedule, ddim_steps)


def build_subsets(
    generators: Sequence[GeneratorSpec],
    codec: LatentCodec,
    schedule: NoiseSchedule,
    real_pool: DatasetManifest,
    reals_per_subset: int,
    fakes_per_subset: int,
    seed: int,
    *,
    root: Path,
    ddim_steps: int = 50,
    export_previews: bool = False,
) -> DatasetManifest:
    """
    One subset per generator: `fakes_per_subset` decoded samples from that
    generator alone, paired with `reals_per_subset` reals not used by any
    other subset. Splits are 80/10/10 within each (subset, label) group.
    """
    if len(generators) < 2:
        raise ParameterError("need at least two generator identities")
    tags = [spec.tag for spec in generators]
    if len(set(tags)) != len(tags) or REAL_TAG in tags:
        raise ParameterError(f"generator tags must be unique and not '{REAL_TAG}': {tags}")
    needed = reals_per_subset * len(generators)
    if needed > len(real_pool):
        raise ParameterError(f"need {needed} reals, pool has {len(real_pool)}")

    root = Path(root)
    pool = real_pool.records
    order = np.random.default_rng(derive_seed(seed, "real-pool")).permutation(len(pool))
    dtype = next(codec.parameters()).dtype
    _, height, width = read_image(real_pool.resolve(pool[0])).shape
    latent_shape = (codec.latent_channels, height // codec.spatial_factor, width // codec.spatial_factor)

    records: list[ManifestRecord] = []
    for position, spec in enumerate(generators):
        reals = [pool[i] for i in order[position * reals_per_subset : (position + 1) * reals_per_subset]]
        real_ids = [f"{spec.tag}/real_{k:05d}" for k in range(len(reals))]
        fake_ids = [f"{spec.tag}/fake_{k:05d}" for k in range(fakes_per_subset)]

        latents = generate_latents(
            spec, schedule, fakes_per_subset, latent_shape, derive_seed(seed, spec.tag), ddim_steps, dtype
        )
        with torch.no_grad():
            fakes = codec.decode(latents)
        logger.info(f"Generated {fakes_per_subset} fakes for {spec.tag} with {spec.sampler.value}")

        real_splits = assign_splits(real_ids, derive_seed(seed, spec.tag, "real"))
        fake_splits = assign_splits(fake_ids, derive_seed(seed, spec.tag, "fake"))

        for new_id, source in zip(real_ids, reals):
            source_path = real_pool.resolve(source)
            records.append(
                ManifestRecord(
                    id=new_id,
                    path=_relative_to(source_path, root),
                    label=0,
                    generator=REAL_TAG,
                    split=real_splits[new_id],
                )
            )
        for new_id, image in zip(fake_ids, fakes):
            relative = Path("fakes") / f"{new_id}.limg"
            write_image(root / relative, image)
            if export_previews:
                export_pnm(root / "previews" / new_id, image)
            records.append(
                ManifestRecord(
                    id=new_id,
                    path=relative.as_posix(),
                    label=1,
                    generator=spec.tag,
                    split=fake_splits[new_id],
                )
            )

    return DatasetManifest(records=tuple(records), root=root)


def _relative_to(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.resolve().as_posix()
