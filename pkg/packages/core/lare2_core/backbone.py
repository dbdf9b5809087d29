from dataclasses import dataclass
try:
    from typing import override
except ImportError:  # Python < 3.12
    from typing_extensions import override

import torch
from torch import nn

from .errors import ParameterError, ShapeError

# Combined stride of the three blocks.
TOTAL_STRIDE = 16


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """Last-block feature map, flattened for attention plus its spatial mean."""

    spatial: torch.Tensor  # (N, h*w, C1)
    global_feat: torch.Tensor  # (N, C1)
    grid: torch.Tensor  # (N, C1, h, w)

    @property
    def positions(self) -> int:
        return self.spatial.shape[1]


class Backbone(nn.Module):
    """
    Three strided conv blocks with circular padding, so a shift of the input
    by a multiple of the total stride rolls the output map by whole cells.
    """

    def __init__(self, in_channels: int = 1, channels: int = 32, input_size: int = 64):
        super().__init__()
        if input_size % TOTAL_STRIDE:
            raise ParameterError(f"input_size must be divisible by {TOTAL_STRIDE}, got {input_size}")
        self.in_channels = in_channels
        self.channels = channels
        self.input_size = input_size

        hidden = max(channels // 2, 1)
        self.blocks = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 5, stride=4, padding=2, padding_mode="circular"),
            nn.SiLU(),
            nn.Conv2d(hidden, channels, 3, stride=2, padding=1, padding_mode="circular"),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1, padding_mode="circular"),
            nn.SiLU(),
        )

    @property
    def grid_size(self) -> int:
        return self.input_size // TOTAL_STRIDE

    @override
    def forward(self, images: torch.Tensor) -> FeatureBundle:
        if images.dim() != 4 or images.shape[1:] != (self.in_channels, self.input_size, self.input_size):
            raise ShapeError(
                f"expected (N, {self.in_channels}, {self.input_size}, {self.input_size}) input, "
                f"got {tuple(images.shape)}"
            )
        grid = self.blocks(images)
        spatial = grid.flatten(2).transpose(1, 2)
        return FeatureBundle(spatial=spatial, global_feat=spatial.mean(dim=1), grid=grid)


def features(images: torch.Tensor, backbone: Backbone) -> FeatureBundle:
    return backbone(images)
