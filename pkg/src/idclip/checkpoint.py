"""Model checkpoints: named parameter blobs with frozen/trainable flags.

Round-trips are bit-exact; loading rejects unknown format versions.
"""

from __future__ import annotations

import numpy as np

from .blobs import deserialize_arrays, serialize_arrays
from .errors import DataError
from .model import IdClipModel

CHECKPOINT_MAGIC = b"IDCLIPCK"
CHECKPOINT_VERSION = 1

FLAG_TRAINABLE = 1


def save_checkpoint_bytes(model: IdClipModel, config_hash: str = "") -> bytes:
    named = model.named_params()
    arrays = {n: t.data for n, t in named.items()}
    flags = {n: (FLAG_TRAINABLE if t.requires_grad else 0) for n, t in named.items()}
    return serialize_arrays(
        arrays, flags, magic=CHECKPOINT_MAGIC, version=CHECKPOINT_VERSION,
        extra=config_hash.encode("utf-8"),
    )


def load_checkpoint_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, int], str]:
    arrays, flags, extra = deserialize_arrays(
        blob, magic=CHECKPOINT_MAGIC, expected_version=CHECKPOINT_VERSION
    )
    return arrays, flags, extra.decode("utf-8")


def restore_model(model: IdClipModel, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into the live parameter tensors, in place."""
    named = model.named_params()
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise DataError(f"checkpoint is missing parameters: {missing[:5]}")
    for name, tensor in named.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise DataError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data[...] = arr


def save_checkpoint_file(path, model: IdClipModel, config_hash: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint_bytes(model, config_hash))


def load_checkpoint_file(path) -> tuple[dict[str, np.ndarray], dict[str, int], str]:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
