from dataclasses import dataclass, field
from pathlib import Path

from lare2_core.codec import LatentCodec, train_codec
from lare2_core.config import TrainConfig
from lare2_core.denoiser import ConvDenoiser
from lare2_core.diffusion import NoiseSchedule, make_linear_schedule, train_diffusion
from lare2_core.forge import GeneratorSpec, build_subsets, synth_real, write_corpus
from lare2_core.lare import LaREMap, extract_corpus
from lare2_core.manifest import DatasetManifest
from lare2_core.seeding import derive_seed

GENERATORS = ("ddpm_a:a:ddpm", "ddim_a:a:ddim", "ddpm_b:b:ddpm")


@dataclass
class Pipeline:
    config: TrainConfig
    schedule: NoiseSchedule
    codec: LatentCodec
    codec_metrics: dict[str, float]
    pretrain: DatasetManifest
    denoisers: dict[str, ConvDenoiser]
    subsets: DatasetManifest
    maps: dict[str, LaREMap] = field(repr=False)

    @property
    def denoiser(self) -> ConvDenoiser:
        """The weights LaRE is extracted with."""
        return self.denoisers["a"]


def run_pipeline(root: Path, config: TrainConfig, seed: int) -> Pipeline:
    """Forge, both codec and diffusion stages, three generator subsets and their LaRE maps."""
    schedule = make_linear_schedule(config.T, config.beta_start, config.beta_end)
    pretrain = write_corpus(
        synth_real(2000, derive_seed(seed, "pretrain"), prefix="pretrain"),
        root / "pretrain",
        label=0,
        generator="real",
        split_seed=seed,
    )
    codec_run = train_codec(pretrain, config, seed, checkpoint_path=root / "codec.ck")

    checkpoints = {}
    denoisers = {}
    for weights in ("a", "b"):
        checkpoints[weights] = root / f"diffusion_{weights}.ck"
        denoisers[weights] = train_diffusion(
            pretrain, codec_run.model, config, derive_seed(seed, "diffusion", weights), checkpoints[weights]
        ).model

    pool = write_corpus(
        synth_real(600, derive_seed(seed, "pool"), prefix="real"), root / "pool", label=0, generator="real", split_seed=seed
    )
    subsets = build_subsets(
        [GeneratorSpec.parse(text, checkpoints.__getitem__) for text in GENERATORS],
        codec_run.model,
        schedule,
        pool,
        reals_per_subset=200,
        fakes_per_subset=200,
        seed=seed,
        root=root,
        ddim_steps=config.ddim_steps,
    )
    maps = extract_corpus(
        subsets, codec_run.model, denoisers["a"], schedule, t=config.t_extract, e=config.e_ensemble, seed=seed
    )
    return Pipeline(
        config=config,
        schedule=schedule,
        codec=codec_run.model,
        codec_metrics=codec_run.metrics,
        pretrain=pretrain,
        denoisers=denoisers,
        subsets=subsets,
        maps=maps,
    )
