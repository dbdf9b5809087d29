import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from .images import to_uint8  # noqa: E402
from .lare import LaREMap, LossGapRow  # noqa: E402

logger = logging.getLogger(__name__)


def plot_loss_gap(path: Path, rows: Sequence[LossGapRow]) -> Path:
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [row.t for row in rows]
    ax.plot(steps, [row.mean_real for row in rows], marker="o", label="real")
    ax.plot(steps, [row.mean_fake for row in rows], marker="s", label="generated")
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mean denoising loss")
    ax.legend()
    fig.tight_layout()
    # Fixed metadata keeps reruns byte-identical.
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    logger.info(f"Wrote loss-gap plot to {path}")
    return path


def render_overlay(path: Path, image: torch.Tensor, lare: LaREMap, title: str = "") -> Path:
    """Decoded image with the channel-mean error map, nearest-upsampled, on top."""
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)

    height, width = image.shape[-2:]
    heat = F.interpolate(lare.values.mean(dim=0)[None, None].float(), size=(height, width), mode="nearest")[0, 0]

    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    pixels = to_uint8(image)
    axes[0].imshow(pixels, cmap="gray" if pixels.ndim == 2 else None)
    axes[0].set_title("image")
    axes[1].imshow(pixels, cmap="gray" if pixels.ndim == 2 else None)
    axes[1].imshow(heat.numpy(), cmap="inferno", alpha=0.6)
    axes[1].set_title(f"error map (t={lare.t}, e={lare.e})")
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
