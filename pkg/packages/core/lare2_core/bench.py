"""
Evaluation harness: the cross-generator matrix, extraction-cost benchmark
and hyperparameter sweeps.
"""

import csv
import logging
import statistics
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import torch

from .codec import LatentCodec
from .config import TrainConfig
from .denoiser import CountingDenoiser, Denoiser
from .diffusion import NoiseSchedule
from .egre import Detector, load_detector, score_detector, train_detector
from .errors import DataError, ParameterError
from .lare import ExtractionBudget, LaREMap, compute_lare, dire_feature, extract_corpus
from .manifest import DatasetManifest
from .metrics import accuracy, average_precision
from .seeding import derive_seed

logger = logging.getLogger(__name__)


################################################################################
# Cross-generator matrix
################################################################################
@dataclass(frozen=True)
class EvalMatrix:
    train_tags: tuple[str, ...]
    test_tags: tuple[str, ...]
    cells: Mapping[tuple[str, str], tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        missing = [
            (train, test) for train in self.train_tags for test in self.test_tags if (train, test) not in self.cells
        ]
        if missing:
            raise DataError(f"incomplete evaluation matrix, missing {missing[0]}")

    def row_average(self, train_tag: str) -> tuple[float, float]:
        row = [self.cells[(train_tag, test)] for test in self.test_tags]
        return (
            statistics.fmean(acc for acc, _ in row),
            statistics.fmean(ap for _, ap in row),
        )

    def mean(self) -> tuple[float, float]:
        rows = [self.row_average(train) for train in self.train_tags]
        return statistics.fmean(acc for acc, _ in rows), statistics.fmean(ap for _, ap in rows)

    def write_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(["train_tag", "test_tag", "acc", "ap"])
            for train in self.train_tags:
                for test in self.test_tags:
                    acc, ap = self.cells[(train, test)]
                    writer.writerow([train, test, repr(acc), repr(ap)])

    def write_averages_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(["train_tag", "avg_acc", "avg_ap"])
            for train in self.train_tags:
                acc, ap = self.row_average(train)
                writer.writerow([train, repr(acc), repr(ap)])

    @classmethod
    def read_csv(cls, path: Path) -> "EvalMatrix":
        try:
            with Path(path).open(newline="") as file:
                rows = list(csv.DictReader(file))
        except OSError as e:
            raise DataError(f"Cannot read matrix {path}: {e}") from e
        try:
            cells = {(row["train_tag"], row["test_tag"]): (float(row["acc"]), float(row["ap"])) for row in rows}
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}: malformed matrix row") from e
        return cls(
            train_tags=tuple(dict.fromkeys(row["train_tag"] for row in rows)),
            test_tags=tuple(dict.fromkeys(row["test_tag"] for row in rows)),
            cells=cells,
        )


def evaluate(
    detector: Detector, manifest: DatasetManifest, maps: Mapping[str, LaREMap] | None
) -> tuple[float, float]:
    scored = score_detector(detector, manifest, maps)
    return accuracy(scored), average_precision(scored)


def cross_matrix(
    detectors: Sequence[tuple[str, Path | Detector]],
    manifest: DatasetManifest,
    maps: Mapping[str, LaREMap] | None,
    *,
    jobs: int = 1,
    dtype: torch.dtype = torch.float32,
) -> EvalMatrix:
    """Every detector against the test split of every subset."""
    loaded = {
        tag: source if isinstance(source, Detector) else load_detector(source, dtype=dtype)
        for tag, source in detectors
    }
    test_tags = tuple(manifest.subsets())
    test_sets = {tag: manifest.filter(subset=tag, split="test") for tag in test_tags}
    for tag, test_set in test_sets.items():
        if not len(test_set):
            raise DataError(f"subset {tag} has no test images")

    keys = [(train, test) for train in loaded for test in test_tags]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda key: evaluate(loaded[key[0]], test_sets[key[1]], maps), keys))

    for (train, test), (acc, ap) in zip(keys, results):
        logger.info(f"{train} -> {test}: ACC {acc:.3f}, AP {ap:.3f}")
    return EvalMatrix(train_tags=tuple(loaded), test_tags=test_tags, cells=dict(zip(keys, results)))


################################################################################
# Extraction cost
################################################################################
@dataclass(frozen=True)
class BenchRow:
    method: str
    calls_per_image: float
    median_ms_per_image: float


def _time_method(
    extract: Callable[[torch.Tensor], LaREMap],
    latents: Sequence[torch.Tensor],
    counter: CountingDenoiser,
    repeats: int,
) -> tuple[ExtractionBudget, list[float]]:
    for latent in latents:
        extract(latent)

    counter.reset()
    timings = []
    budget = ExtractionBudget()
    for repeat in range(repeats):
        start = time.perf_counter()
        for latent in latents:
            extract(latent)
        elapsed = time.perf_counter() - start
        timings.append(1000.0 * elapsed / len(latents))
        if repeat == 0:
            budget.denoiser_calls = counter.reset()
            budget.wall_time = elapsed
    return budget, timings


def bench_extraction(
    latents: Sequence[torch.Tensor],
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    *,
    t: int,
    e: int,
    dire_steps: int,
    repeats: int = 3,
    seed: int = 0,
) -> list[BenchRow]:
    """
    Denoiser calls and median per-image wall time for single-step LaRE
    against the DIRE round trip. One untimed warm-up pass precedes each.
    """
    if repeats < 3:
        raise ParameterError(f"need at least 3 timed repeats, got {repeats}")
    if not len(latents):
        raise ParameterError("nothing to benchmark")

    counter = CountingDenoiser(denoiser)
    methods: dict[str, Callable[[torch.Tensor], LaREMap]] = {
        "lare": lambda latent: compute_lare(latent, t, e, seed, counter, schedule),
        "dire": lambda latent: dire_feature(latent, counter, schedule, dire_steps),
    }

    rows = []
    for method, extract in methods.items():
        budget, timings = _time_method(extract, latents, counter, repeats)
        row = BenchRow(
            method=method,
            calls_per_image=budget.denoiser_calls / len(latents),
            median_ms_per_image=statistics.median(timings),
        )
        logger.info(f"{method}: {row.calls_per_image:g} calls/image, {row.median_ms_per_image:.3f} ms/image")
        rows.append(row)

    lare, dire = rows
    rows.append(
        BenchRow(
            method="ratio",
            calls_per_image=dire.calls_per_image / lare.calls_per_image,
            median_ms_per_image=dire.median_ms_per_image / lare.median_ms_per_image,
        )
    )
    return rows


def write_bench_csv(path: Path, rows: Sequence[BenchRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["method", "calls_per_image", "median_ms_per_image"])
        for row in rows:
            writer.writerow([row.method, f"{row.calls_per_image:g}", f"{row.median_ms_per_image:.4f}"])


################################################################################
# Sweeps
################################################################################
class SweepParam(Enum):
    T = "t"
    E = "e"


@dataclass(frozen=True)
class SweepRow:
    param: SweepParam
    value: int
    avg_acc: float
    avg_ap: float
    extract_s: float


def sweep(
    param: SweepParam,
    grid: Sequence[int],
    manifest: DatasetManifest,
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    config: TrainConfig,
    seed: int,
) -> list[SweepRow]:
    """
    Re-extract features at every grid point, train one detector per subset
    and report the mean of the resulting cross-generator matrix.
    """
    if not grid:
        raise ParameterError("sweep grid is empty")

    rows = []
    for value in grid:
        point = replace(config, t_extract=value) if param is SweepParam.T else replace(config, e_ensemble=value)
        start = time.perf_counter()
        maps = extract_corpus(
            manifest, codec, denoiser, schedule, t=point.t_extract, e=point.e_ensemble, seed=seed, jobs=point.jobs
        )
        extract_s = time.perf_counter() - start

        detectors = [
            (tag, train_detector(manifest, maps, point, derive_seed(seed, "detector", tag), subset=tag).model)
            for tag in manifest.subsets()
        ]
        avg_acc, avg_ap = cross_matrix(detectors, manifest, maps, jobs=point.jobs).mean()
        logger.info(f"{param.value}={value}: avg ACC {avg_acc:.3f}, avg AP {avg_ap:.3f}, extraction {extract_s:.2f}s")
        rows.append(SweepRow(param=param, value=value, avg_acc=avg_acc, avg_ap=avg_ap, extract_s=extract_s))
    return rows


def write_sweep_csv(path: Path, rows: Sequence[SweepRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["param", "value", "avg_acc", "avg_ap", "extract_s"])
        for row in rows:
            writer.writerow([row.param.value, row.value, repr(row.avg_acc), repr(row.avg_ap), f"{row.extract_s:.3f}"])
