"""
Portable image grids: magic ``LIMG1``, u32 H, W, C, then H x W x C
little-endian float32 values in [-1, 1]. Tensors are channels-first in
memory and converted at this boundary.
"""

import struct
from collections.abc import Iterable
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

IMAGE_MAGIC = b"LIMG1"
_HEADER = struct.Struct("<III")


def write_image(path: Path, image: torch.Tensor) -> None:
    if image.dim() != 3:
        raise DataError(f"{path}: expected a (C, H, W) image, got shape {tuple(image.shape)}")
    channels, height, width = image.shape
    payload = np.ascontiguousarray(
        image.detach().cpu().permute(1, 2, 0).numpy().astype("<f4")
    ).tobytes()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(IMAGE_MAGIC + _HEADER.pack(height, width, channels) + payload)


def read_image(path: Path) -> torch.Tensor:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e

    if not payload.startswith(IMAGE_MAGIC):
        raise DataError(f"{path}: not an LIMG1 image (bad magic)")
    header_end = len(IMAGE_MAGIC) + _HEADER.size
    height, width, channels = _HEADER.unpack(payload[len(IMAGE_MAGIC) : header_end])
    expected = height * width * channels * 4
    if len(payload) - header_end != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(payload) - header_end}")

    values = np.frombuffer(payload[header_end:], dtype="<f4").reshape(height, width, channels)
    return torch.from_numpy(values.copy()).permute(2, 0, 1).contiguous()


def load_images(paths: Iterable[Path]) -> torch.Tensor:
    images = [read_image(path) for path in paths]
    if not images:
        raise DataError("no images to load")
    return torch.stack(images)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W) or (H, W, C) uint8."""
    pixels = ((image.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    pixels = pixels.permute(1, 2, 0).numpy()
    return pixels[:, :, 0] if pixels.shape[2] == 1 else pixels


def export_pnm(path: Path, image: torch.Tensor) -> Path:
    """Write a PGM (1 channel) or PPM (3 channel) copy for human inspection."""
    suffix = ".pgm" if image.shape[0] == 1 else ".ppm"
    path = Path(path).with_suffix(suffix)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    return path
