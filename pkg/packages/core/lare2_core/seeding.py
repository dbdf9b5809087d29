import hashlib

import torch


def derive_seed(seed: int, *keys: str | int) -> int:
    """
    Derive a child seed from a global seed and any number of keys (image ids,
    timesteps, generator tags). Independent of call order, so corpus-level
    work can be split across threads without changing results.
    """
    material = ":".join([str(seed), *(str(key) for key in keys)])
    digest = hashlib.blake2b(material.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
