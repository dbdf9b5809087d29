import contextlib
import logging
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Generic, TypeVar

import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from .config import OptimizerKind, OptimSettings
from .errors import TrainingError

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=nn.Module)


@dataclass
class TrainingRun(Generic[M]):
    model: M
    epoch_losses: list[float]
    checkpoint_path: Path | None = None
    metrics: dict[str, float] = field(default_factory=dict)


def build_optimizer(
    parameters: Iterable[nn.Parameter], settings: OptimSettings
) -> torch.optim.Optimizer:
    match settings.optimizer:
        case OptimizerKind.SGD:
            return torch.optim.SGD(parameters, lr=settings.learning_rate, momentum=0.0)
        case OptimizerKind.ADAM:
            return torch.optim.Adam(parameters, lr=settings.learning_rate)


def seeded_loader(dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True) -> DataLoader:
    # Single process loading keeps the batch order a pure function of the seed.
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=torch.Generator().manual_seed(seed),
        num_workers=0,
    )


def init_module(factory: Callable[[], M], seed: int, dtype: torch.dtype) -> M:
    """Build a module with weights drawn from `seed` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory()
    return module.to(dtype=dtype)


@contextlib.contextmanager
def deterministic_algorithms() -> Iterator[None]:
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def ensure_finite_loss(
    loss: torch.Tensor,
    *,
    stage: str,
    epoch: int,
    save_state: Callable[[Path], None] | None = None,
    checkpoint_path: Path | None = None,
) -> None:
    if torch.isfinite(loss).all():
        return

    saved_to = None
    if save_state is not None and checkpoint_path is not None:
        saved_to = Path(checkpoint_path).with_suffix(".last-finite.ck")
        save_state(saved_to)
    logger.error(f"{stage} loss diverged in epoch {epoch}")
    raise TrainingError(f"{stage} training diverged (non-finite loss) in epoch {epoch}", saved_to)
