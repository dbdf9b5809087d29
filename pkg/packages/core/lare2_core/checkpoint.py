"""
Shared binary checkpoint format.

Layout: magic ``LARE2CK1``, u32 record count, then per record a u32 name
length, the UTF-8 name, u32 rank, rank x u32 dims and the values as
little-endian float32 in row-major order.
"""

import logging
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LARE2CK1"

Records = dict[str, np.ndarray]


def _as_array(value: np.ndarray | torch.Tensor | float | int) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    # copy keeps 0-d scalars at rank 0, unlike np.ascontiguousarray
    return np.asarray(value, dtype="<f4").copy(order="C")


def encode_checkpoint(records: Mapping[str, np.ndarray | torch.Tensor | float]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(records))]
    for name, value in records.items():
        array = _as_array(value)
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Records:
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{source}: not a checkpoint (bad magic)")

    offset = len(CHECKPOINT_MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise DataError(f"{source}: truncated checkpoint at byte {offset}")
        chunk = payload[offset : offset + size]
        offset += size
        return chunk

    (count,) = struct.unpack("<I", take(4))
    records: Records = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<I", take(4))
        name = take(name_length).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        records[name] = values.copy()

    if offset != len(payload):
        raise DataError(f"{source}: {len(payload) - offset} trailing bytes after last record")
    return records


def write_checkpoint(path: Path, records: Mapping[str, np.ndarray | torch.Tensor | float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(records))
    logger.debug(f"Wrote {len(records)} records to {path}")


def read_checkpoint(path: Path) -> Records:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(payload, source=str(path))


################################################################################
# Module helpers
################################################################################
def module_records(module: nn.Module, namespace: str) -> Records:
    return {
        f"{namespace}.{name}": _as_array(tensor)
        for name, tensor in module.state_dict().items()
    }


def load_module_records(module: nn.Module, records: Mapping[str, np.ndarray], namespace: str) -> None:
    prefix = f"{namespace}."
    state = module.state_dict()
    missing = [name for name in state if f"{prefix}{name}" not in records]
    if missing:
        raise DataError(f"Checkpoint lacks records for {namespace}: {', '.join(missing)}")

    module.load_state_dict(
        {
            name: torch.as_tensor(records[f"{prefix}{name}"]).to(dtype=tensor.dtype).reshape(tensor.shape)
            for name, tensor in state.items()
        }
    )


def meta_records(namespace: str, **values: float | int) -> Records:
    return {f"{namespace}.meta.{key}": _as_array(value) for key, value in values.items()}


def meta_value(records: Mapping[str, np.ndarray], namespace: str, key: str) -> float:
    name = f"{namespace}.meta.{key}"
    if name not in records:
        raise DataError(f"Checkpoint lacks metadata record {name}")
    return float(np.asarray(records[name]).item())


def meta_int(records: Mapping[str, np.ndarray], namespace: str, key: str) -> int:
    return int(round(meta_value(records, namespace, key)))
