import math
import threading
from abc import ABC, abstractmethod
from pathlib import Path
try:
    from typing import override
except ImportError:  # Python < 3.12
    from typing_extensions import override

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import (
    load_module_records,
    meta_int,
    meta_records,
    module_records,
    read_checkpoint,
    write_checkpoint,
)
from .errors import ShapeError

NAMESPACE = "denoiser"


def as_step_tensor(t: int | torch.Tensor, batch: int) -> torch.Tensor:
    steps = torch.as_tensor(t, dtype=torch.long)
    if steps.dim() == 0:
        steps = steps.expand(batch)
    if steps.shape != (batch,):
        raise ShapeError(f"expected {batch} timesteps, got shape {tuple(steps.shape)}")
    return steps


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Denoiser(nn.Module, ABC):
    """
    Noise predictor eps_theta(x_t, t). Subclasses implement `forward` on
    batched (N, C, H, W) inputs; `predict` also accepts a single (C, H, W)
    latent and a scalar step.
    """

    @abstractmethod
    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        pass

    def predict(self, x_t: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        single = x_t.dim() == 3
        batch = x_t.unsqueeze(0) if single else x_t
        eps = self(batch, as_step_tensor(t, batch.shape[0]))
        if eps.shape != batch.shape:
            raise ShapeError(
                f"denoiser returned shape {tuple(eps.shape)} for input {tuple(batch.shape)}"
            )
        return eps.squeeze(0) if single else eps


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.time_proj = nn.Linear(embed_dim, channels)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(x)) + self.time_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return x + h


class ConvDenoiser(Denoiser):
    """Small residual conv net with a sinusoidal timestep embedding added in every block."""

    def __init__(self, latent_channels: int = 4, channels: int = 32, blocks: int = 3):
        super().__init__()
        self.latent_channels = latent_channels
        self.channels = channels
        self.embed_dim = channels
        self.time_mlp = nn.Sequential(
            nn.Linear(self.embed_dim, self.embed_dim),
            nn.SiLU(),
            nn.Linear(self.embed_dim, self.embed_dim),
        )
        self.conv_in = nn.Conv2d(latent_channels, channels, kernel_size=3, padding=1)
        self.blocks = nn.ModuleList(
            [_ResidualBlock(channels, self.embed_dim) for _ in range(blocks)]
        )
        self.conv_out = nn.Conv2d(channels, latent_channels, kernel_size=3, padding=1)

    @override
    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x_t.shape[1] != self.latent_channels:
            raise ShapeError(
                f"expected {self.latent_channels} latent channels, got {x_t.shape[1]}"
            )
        emb = self.time_mlp(timestep_embedding(t, self.embed_dim, x_t.dtype))
        h = self.conv_in(x_t)
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(F.silu(h))


class CountingDenoiser(Denoiser):
    """
    Instrumentation wrapper: counts per-sample evaluations of the wrapped
    denoiser. A forward pass on a batch of N latents counts N calls.
    """

    def __init__(self, inner: Denoiser):
        super().__init__()
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    @override
    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        with self._lock:
            self.calls += x_t.shape[0]
        return self.inner(x_t, t)

    def reset(self) -> int:
        with self._lock:
            calls, self.calls = self.calls, 0
        return calls


################################################################################
# Persistence
################################################################################
def save_denoiser(path: Path, denoiser: ConvDenoiser) -> None:
    records = meta_records(
        NAMESPACE,
        latent_channels=denoiser.latent_channels,
        channels=denoiser.channels,
        blocks=len(denoiser.blocks),
    )
    records.update(module_records(denoiser, NAMESPACE))
    write_checkpoint(path, records)


def load_denoiser(path: Path, dtype: torch.dtype = torch.float32) -> ConvDenoiser:
    records = read_checkpoint(path)
    denoiser = ConvDenoiser(
        latent_channels=meta_int(records, NAMESPACE, "latent_channels"),
        channels=meta_int(records, NAMESPACE, "channels"),
        blocks=meta_int(records, NAMESPACE, "blocks"),
    ).to(dtype=dtype)
    load_module_records(denoiser, records, NAMESPACE)
    return denoiser.eval()
