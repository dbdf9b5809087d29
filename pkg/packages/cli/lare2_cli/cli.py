#!/usr/bin python

import functools
import json
import logging
import os
import sys
from dataclasses import dataclass
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import click
import torch
from lare2_core.bench import (
    SweepParam,
    bench_extraction,
    cross_matrix,
    evaluate,
    sweep,
    write_bench_csv,
    write_sweep_csv,
)
from lare2_core.codec import encode_records, load_codec, train_codec
from lare2_core.config import DetectorMode, TrainConfig
from lare2_core.denoiser import load_denoiser
from lare2_core.diffusion import make_linear_schedule, train_diffusion
from lare2_core.egre import load_detector, train_detector
from lare2_core.errors import Lare2Error, ParameterError
from lare2_core.forge import GeneratorSpec, build_subsets, synth_real, write_corpus
from lare2_core.images import read_image
from lare2_core.lare import (
    extract_corpus,
    extract_dire_corpus,
    loss_gap_profile,
    read_lare_cache,
    write_gap_confidence_csv,
    write_lare_cache,
    write_loss_gap_csv,
)
from lare2_core.manifest import REAL_TAG, DatasetManifest
from lare2_core.plots import plot_loss_gap, render_overlay
from lare2_core.seeding import derive_seed

from lare2_cli.config import (
    DEFAULT_CONFIG_FILE,
    ConfigKey,
    ConfigManager,
    build_train_config,
    config_hash,
    pipeline_value,
    reload_config,
)

logger = logging.getLogger(__name__)


################################################################################
# Run context
################################################################################
@dataclass(frozen=True)
class Artifacts:
    root: Path

    @property
    def pretrain(self) -> Path:
        return self.root / "pretrain.jsonl"

    @property
    def reals(self) -> Path:
        return self.root / "reals.jsonl"

    @property
    def subsets(self) -> Path:
        return self.root / "subsets.jsonl"

    @property
    def codec(self) -> Path:
        return self.root / "codec.ck"

    def diffusion(self, weights: str) -> Path:
        return self.root / f"diffusion_{weights}.ck"

    @property
    def lare_cache(self) -> Path:
        return self.root / "lare.cache"

    @property
    def dire_cache(self) -> Path:
        return self.root / "dire.cache"

    def feature_cache(self, features: str) -> Path:
        return self.dire_cache if features == "dire" else self.lare_cache

    def detector_name(self, mode: DetectorMode, cache: Path | None = None) -> str:
        # Detectors trained on a non-default feature cache are kept apart by the cache stem.
        if cache is None or cache.resolve() == self.lare_cache.resolve():
            return mode.value
        return f"{mode.value}-{cache.stem}"

    def detector(self, mode: DetectorMode, tag: str, cache: Path | None = None) -> Path:
        return self.root / "detectors" / f"{self.detector_name(mode, cache)}_{tag}.ck"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def run(self, command: str) -> Path:
        return self.root / "runs" / f"{command}.json"


@dataclass(frozen=True)
class RunContext:
    manager: ConfigManager
    values: dict[str, str]
    config: TrainConfig

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def artifacts(self) -> Artifacts:
        return Artifacts(self.config.artifacts_dir)

    def pipeline(self, key: ConfigKey) -> Any:
        return pipeline_value(self.values, key)

    def generators(self) -> list[GeneratorSpec]:
        return [
            GeneratorSpec.parse(text, self.artifacts.diffusion)
            for text in self.pipeline(ConfigKey.GENERATORS).split(",")
            if text.strip()
        ]


def _package_version(name: str) -> str:
    try:
        return version(name)
    except PackageNotFoundError:
        return "unknown"


def write_run_metadata(run: RunContext, command: str, **extra: Any) -> None:
    metadata = {
        "command": command,
        "config_hash": config_hash(run.values),
        "seed": run.seed,
        "versions": {
            "lare2-core": _package_version("lare2-core"),
            "lare2-cli": _package_version("lare2-cli"),
            "torch": torch.__version__,
            "numpy": _package_version("numpy"),
            "python": sys.version.split()[0],
        },
        "ap_tie_break": "ascending image id",
        "positive_class": "fake (label 1)",
        "loss_aggregation": "mean",
        "augmentation": "none",
        **extra,
    }
    path = run.artifacts.run(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> DatasetManifest:
    manifest = DatasetManifest.read(path)
    manifest.check_paths()
    return manifest


def handle_errors(cmd):
    """Library errors exit with 1 after naming the problem on stderr; bad parameters are usage errors."""

    @functools.wraps(cmd)
    def wrapper(*args, **kwargs):
        try:
            return cmd(*args, **kwargs)
        except ParameterError as e:
            raise click.UsageError(str(e)) from e
        except Lare2Error as e:
            click.echo(f"Error: {e}", err=True)
            click.get_current_context().exit(1)

    return wrapper


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


################################################################################
# CLI
################################################################################
COLORS = {
    "WARNING": "\033[93m",  # Yellow
    "ERROR": "\033[91m",  # Red
    "CRITICAL": "\033[95m",  # Magenta
    "DEBUG": "\033[90m",  # Gray
    "RESET": "\033[0m",  # Reset
}


class ColorFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        color = COLORS.get(record.levelname, "")
        formatted = super().format(record)
        if color:
            return f"{color}{formatted}{COLORS['RESET']}"
        return formatted


mode_option = click.option(
    "--mode",
    type=click.Choice([mode.value for mode in DetectorMode]),
    default=None,
    help="Detector ablation mode (defaults to the configured mode).",
)

features_option = click.option(
    "--features",
    type=click.Choice(["lare", "dire"]),
    default="lare",
    show_default=True,
    help="Feature cache under artifacts_dir to use; --cache overrides it.",
)


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=DEFAULT_CONFIG_FILE)
@click.option("--quiet", is_flag=True, default=False, help="Only print warnings and errors.")
@click.option("--jobs", type=int, default=None, help="Worker threads for extraction and evaluation.")
@click.option("--seed", type=int, default=None, help="Overrides the config file and LARE2_SEED.")
@click.pass_context
def cli(ctx: click.Context, config_path: Path, quiet: bool, jobs: int | None, seed: int | None):
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(ColorFormatter("%(message)s"))
    if quiet:
        level = logging.WARNING
    else:
        level = logging.DEBUG if os.getenv("DEBUG") else logging.INFO
    logging.basicConfig(level=level, handlers=[handler], force=True)

    manager = ConfigManager(config_path)
    values = manager.effective_values({ConfigKey.JOBS: jobs, ConfigKey.SEED: seed})
    ctx.obj = RunContext(manager=manager, values=values, config=build_train_config(values))


pass_run = click.make_pass_decorator(RunContext)


@cli.command()
@pass_run
def configure(run: RunContext):
    reload_config(config=run.manager)


@cli.command()
@click.option("--export-pnm", is_flag=True, default=False, help="Also write PGM/PPM previews.")
@pass_run
@handle_errors
def forge(run: RunContext, export_pnm: bool):
    """Synthesize the procedural real corpora."""
    config = run.config
    for prefix, key, path in (
        ("pretrain", ConfigKey.PRETRAIN_COUNT, run.artifacts.pretrain),
        (REAL_TAG, ConfigKey.REAL_POOL_COUNT, run.artifacts.reals),
    ):
        items = synth_real(
            run.pipeline(key),
            derive_seed(run.seed, prefix),
            size=config.input_size,
            channels=config.image_channels,
            prefix=prefix,
        )
        manifest = write_corpus(
            items,
            run.artifacts.root,
            label=0,
            generator=REAL_TAG,
            split_seed=derive_seed(run.seed, prefix, "split"),
            export_previews=export_pnm,
        )
        manifest.write(path)
    write_run_metadata(run, "forge")


@cli.command("train-codec")
@pass_run
@handle_errors
def train_codec_command(run: RunContext):
    result = train_codec(
        read_manifest(run.artifacts.pretrain),
        run.config,
        derive_seed(run.seed, "codec"),
        checkpoint_path=run.artifacts.codec,
    )
    write_run_metadata(run, "train-codec", metrics=result.metrics, epoch_losses=result.epoch_losses)


@cli.command("train-diffusion")
@click.option("--tag", type=str, default="a", show_default=True, help="Weights identity, e.g. a or b.")
@pass_run
@handle_errors
def train_diffusion_command(run: RunContext, tag: str):
    codec = load_codec(run.artifacts.codec, dtype=run.config.dtype)
    result = train_diffusion(
        read_manifest(run.artifacts.pretrain),
        codec,
        run.config,
        derive_seed(run.seed, "diffusion", tag),
        checkpoint_path=run.artifacts.diffusion(tag),
    )
    write_run_metadata(run, f"train-diffusion-{tag}", epoch_losses=result.epoch_losses)


@cli.command()
@click.option("--export-pnm", is_flag=True, default=False, help="Also write PGM/PPM previews of the fakes.")
@pass_run
@handle_errors
def gen(run: RunContext, export_pnm: bool):
    """Generate one fake subset per configured generator."""
    config = run.config
    manifest = build_subsets(
        run.generators(),
        load_codec(run.artifacts.codec, dtype=config.dtype),
        make_linear_schedule(config.T, config.beta_start, config.beta_end),
        read_manifest(run.artifacts.reals),
        run.pipeline(ConfigKey.REALS_PER_SUBSET),
        run.pipeline(ConfigKey.FAKES_PER_SUBSET),
        derive_seed(run.seed, "gen"),
        root=run.artifacts.root,
        ddim_steps=config.ddim_steps,
        export_previews=export_pnm,
    )
    manifest.write(run.artifacts.subsets)
    write_run_metadata(run, "gen", subsets=manifest.subsets())


@cli.command()
@click.option("--t", "t", type=int, default=None, help="Extraction timestep.")
@click.option("--e", "e", type=int, default=None, help="Noise ensemble size.")
@click.option("--weights", type=str, default="a", show_default=True, help="Denoiser weights to extract with.")
@click.option("--cache", type=click.Path(path_type=Path), default=None)
@pass_run
@handle_errors
def extract(run: RunContext, t: int | None, e: int | None, weights: str, cache: Path | None):
    """Write the LaRE feature cache for every image in the subsets manifest."""
    config = run.config
    t = config.t_extract if t is None else t
    e = config.e_ensemble if e is None else e
    maps = extract_corpus(
        read_manifest(run.artifacts.subsets),
        load_codec(run.artifacts.codec, dtype=config.dtype),
        load_denoiser(run.artifacts.diffusion(weights), dtype=config.dtype),
        make_linear_schedule(config.T, config.beta_start, config.beta_end),
        t=t,
        e=e,
        seed=derive_seed(run.seed, "extract"),
        jobs=config.jobs,
    )
    write_lare_cache(cache or run.artifacts.lare_cache, maps)
    write_run_metadata(run, "extract", t=t, e=e, weights=weights)


@cli.command("extract-dire")
@click.option("--steps", type=int, default=None, help="DDIM steps per direction.")
@click.option("--weights", type=str, default="a", show_default=True)
@click.option("--cache", type=click.Path(path_type=Path), default=None)
@pass_run
@handle_errors
def extract_dire(run: RunContext, steps: int | None, weights: str, cache: Path | None):
    config = run.config
    steps = config.dire_steps if steps is None else steps
    maps = extract_dire_corpus(
        read_manifest(run.artifacts.subsets),
        load_codec(run.artifacts.codec, dtype=config.dtype),
        load_denoiser(run.artifacts.diffusion(weights), dtype=config.dtype),
        make_linear_schedule(config.T, config.beta_start, config.beta_end),
        steps=steps,
        jobs=config.jobs,
    )
    write_lare_cache(cache or run.artifacts.dire_cache, maps)
    write_run_metadata(run, "extract-dire", steps=steps, weights=weights)


@cli.command("train-detector")
@mode_option
@click.option("--subset", type=str, multiple=True, help="Subset tag(s) to train on; one detector each. Defaults to all.")
@features_option
@click.option("--cache", type=click.Path(path_type=Path), default=None, help="Feature cache (LaRE or DIRE).")
@pass_run
@handle_errors
def train_detector_command(
    run: RunContext, mode: str | None, subset: tuple[str, ...], features: str, cache: Path | None
):
    config = run.config
    detector_mode = DetectorMode(mode) if mode else config.mode
    cache = cache or run.artifacts.feature_cache(features)
    name = run.artifacts.detector_name(detector_mode, cache)
    manifest = read_manifest(run.artifacts.subsets)
    maps = None if detector_mode is DetectorMode.BASELINE else read_lare_cache(cache)

    metrics = {}
    for tag in subset or manifest.subsets():
        result = train_detector(
            manifest,
            maps,
            config,
            derive_seed(run.seed, "detector", tag),
            run.artifacts.detector(detector_mode, tag, cache),
            mode=detector_mode,
            subset=tag,
        )
        metrics[tag] = result.metrics
    write_run_metadata(run, f"train-detector-{name}", metrics=metrics)


@cli.command("eval")
@mode_option
@click.option("--matrix", is_flag=True, default=False, help="Evaluate every detector on every subset.")
@features_option
@click.option("--cache", type=click.Path(path_type=Path), default=None)
@pass_run
@handle_errors
def eval_command(run: RunContext, mode: str | None, matrix: bool, features: str, cache: Path | None):
    config = run.config
    detector_mode = DetectorMode(mode) if mode else config.mode
    cache = cache or run.artifacts.feature_cache(features)
    name = run.artifacts.detector_name(detector_mode, cache)
    manifest = read_manifest(run.artifacts.subsets)
    maps = None if detector_mode is DetectorMode.BASELINE else read_lare_cache(cache)
    tags = manifest.subsets()
    detectors = [(tag, run.artifacts.detector(detector_mode, tag, cache)) for tag in tags]

    if matrix:
        result = cross_matrix(detectors, manifest, maps, jobs=config.jobs, dtype=config.dtype)
        result.write_csv(run.artifacts.report(f"matrix_{name}.csv"))
        result.write_averages_csv(run.artifacts.report(f"matrix_{name}_avg.csv"))
        for tag in tags:
            acc, ap = result.row_average(tag)
            click.echo(f"{tag}: avg ACC {acc:.3f}, avg AP {ap:.3f}")
    else:
        # In-distribution only: each detector on its own subset's test split.
        for tag, path in detectors:
            detector = load_detector(path, dtype=config.dtype)
            acc, ap = evaluate(detector, manifest.filter(subset=tag, split="test"), maps)
            click.echo(f"{tag}: ACC {acc:.3f}, AP {ap:.3f}")
    write_run_metadata(run, f"eval-{name}", matrix=matrix, threshold=0.5)


@cli.command()
@click.option("--count", type=int, default=16, show_default=True, help="Latents to time.")
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--steps", type=int, default=None, help="DIRE steps per direction.")
@click.option("--weights", type=str, default="a", show_default=True)
@pass_run
@handle_errors
def bench(run: RunContext, count: int, repeats: int, steps: int | None, weights: str):
    """Compare denoiser calls and wall time of LaRE against the DIRE round trip."""
    config = run.config
    manifest = read_manifest(run.artifacts.subsets).filter(split="test")
    latents = encode_records(load_codec(run.artifacts.codec, dtype=config.dtype), manifest)[:count]
    rows = bench_extraction(
        list(latents),
        load_denoiser(run.artifacts.diffusion(weights), dtype=config.dtype),
        make_linear_schedule(config.T, config.beta_start, config.beta_end),
        t=config.t_extract,
        e=config.e_ensemble,
        dire_steps=config.dire_steps if steps is None else steps,
        repeats=repeats,
        seed=derive_seed(run.seed, "bench"),
    )
    write_bench_csv(run.artifacts.report("bench.csv"), rows)
    for row in rows:
        click.echo(f"{row.method}: {row.calls_per_image:g} calls/image, {row.median_ms_per_image:.3f} ms/image")
    write_run_metadata(run, "bench", repeats=repeats, count=len(latents))


@cli.command("sweep")
@click.option("--param", type=click.Choice([param.value for param in SweepParam]), required=True)
@click.option("--grid", type=str, required=True, help="Comma-separated values, e.g. 1,2,4,8.")
@click.option("--weights", type=str, default="a", show_default=True)
@pass_run
@handle_errors
def sweep_command(run: RunContext, param: str, grid: str, weights: str):
    config = run.config
    rows = sweep(
        SweepParam(param),
        parse_int_list(grid),
        read_manifest(run.artifacts.subsets),
        load_codec(run.artifacts.codec, dtype=config.dtype),
        load_denoiser(run.artifacts.diffusion(weights), dtype=config.dtype),
        make_linear_schedule(config.T, config.beta_start, config.beta_end),
        config,
        derive_seed(run.seed, "extract"),
    )
    write_sweep_csv(run.artifacts.report(f"sweep_{param}.csv"), rows)
    write_run_metadata(run, f"sweep-{param}", grid=[row.value for row in rows])


@cli.command()
@click.option("--t-grid", type=str, default=None, help="Comma-separated timesteps (default 0.1T..0.5T).")
@click.option("--subset", type=str, default=None, help="Subset whose reals and fakes are compared (default: first).")
@click.option("--count", type=int, default=200, show_default=True, help="Images per population.")
@click.option("--weights", type=str, default="a", show_default=True)
@click.option("--plot", is_flag=True, default=False, help="Also write a PNG of both curves.")
@pass_run
@handle_errors
def lossgap(run: RunContext, t_grid: str | None, subset: str | None, count: int, weights: str, plot: bool):
    """Mean denoising loss of reals against fakes over a grid of timesteps."""
    config = run.config
    manifest = read_manifest(run.artifacts.subsets)
    subset = subset or manifest.subsets()[0]
    steps = parse_int_list(t_grid) if t_grid else [config.T * k // 10 for k in range(1, 6)]

    codec = load_codec(run.artifacts.codec, dtype=config.dtype)
    reals = manifest.filter(subset=subset, label=0)
    fakes = manifest.filter(subset=subset, label=1)
    rows = loss_gap_profile(
        encode_records(codec, reals)[:count],
        encode_records(codec, fakes)[:count],
        steps,
        load_denoiser(run.artifacts.diffusion(weights), dtype=config.dtype),
        make_linear_schedule(config.T, config.beta_start, config.beta_end),
        derive_seed(run.seed, "lossgap"),
    )
    write_loss_gap_csv(run.artifacts.report("lossgap.csv"), rows)
    write_gap_confidence_csv(
        run.artifacts.report("lossgap_confidence.csv"), rows, seed=derive_seed(run.seed, "bootstrap")
    )
    if plot:
        plot_loss_gap(run.artifacts.report("lossgap"), rows)
    write_run_metadata(run, "lossgap", subset=subset, t_grid=steps)


@cli.command()
@click.option("--count", type=int, default=4, show_default=True, help="Overlays per subset and label.")
@click.option("--cache", type=click.Path(path_type=Path), default=None)
@pass_run
@handle_errors
def overlay(run: RunContext, count: int, cache: Path | None):
    """Error maps over their images, for visual inspection."""
    manifest = read_manifest(run.artifacts.subsets).filter(split="test")
    maps = read_lare_cache(cache or run.artifacts.lare_cache)
    written = 0
    for tag in manifest.subsets():
        for label in (0, 1):
            for record in manifest.filter(subset=tag, label=label).records[:count]:
                if record.id not in maps:
                    logger.warning(f"No cached error map for {record.id}, skipping")
                    continue
                render_overlay(
                    run.artifacts.root / "overlays" / record.id,
                    read_image(manifest.resolve(record)),
                    maps[record.id],
                    title=f"{record.id} ({'fake' if label else 'real'})",
                )
                written += 1
    logger.info(f"Wrote {written} overlays under {run.artifacts.root / 'overlays'}")
    write_run_metadata(run, "overlay", count=written)


if __name__ == "__main__":
    cli()
