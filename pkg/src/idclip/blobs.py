"""Length-prefixed, checksummed binary store for named float64 arrays.

One format backs both dataset tensor sidecars and model checkpoints:
little-endian throughout, sections ordered as written, CRC32 per section
payload. Serialization is bit-exact by construction, so equal arrays
produce equal bytes and round-trips are lossless.
"""

from __future__ import annotations

import struct
import zlib
from typing import Optional

import numpy as np

from .errors import DataError, VersionError

_HEADER = struct.Struct("<8sII")          # magic, version, section count
_SEC_HEAD = struct.Struct("<IBB")         # name length, flags, ndim

BLOB_MAGIC = b"IDCLBLB1"
BLOB_VERSION = 1


def serialize_arrays(
    named: dict[str, np.ndarray],
    flags: Optional[dict[str, int]] = None,
    magic: bytes = BLOB_MAGIC,
    version: int = BLOB_VERSION,
    extra: bytes = b"",
) -> bytes:
    """Encode named arrays; ``extra`` is an opaque prefixed payload."""
    out = [_HEADER.pack(magic, version, len(named))]
    out.append(struct.pack("<I", len(extra)))
    out.append(extra)
    for name, arr in named.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        flag = (flags or {}).get(name, 0)
        out.append(_SEC_HEAD.pack(len(name_b), flag, data.ndim))
        out.append(name_b)
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        payload = data.tobytes()
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


def deserialize_arrays(
    blob: bytes,
    magic: bytes = BLOB_MAGIC,
    expected_version: int = BLOB_VERSION,
) -> tuple[dict[str, np.ndarray], dict[str, int], bytes]:
    """Decode a blob; returns (arrays, flags, extra). Order is preserved."""
    if len(blob) < _HEADER.size:
        raise DataError("blob truncated before header")
    got_magic, version, count = _HEADER.unpack_from(blob, 0)
    if got_magic != magic:
        raise DataError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != expected_version:
        raise VersionError(f"unsupported format version {version}, expected {expected_version}")
    off = _HEADER.size
    (extra_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    extra = blob[off : off + extra_len]
    off += extra_len

    arrays: dict[str, np.ndarray] = {}
    flags: dict[str, int] = {}
    for _ in range(count):
        name_len, flag, ndim = _SEC_HEAD.unpack_from(blob, off)
        off += _SEC_HEAD.size
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        (payload_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        payload = blob[off : off + payload_len]
        off += payload_len
        (crc,) = struct.unpack_from("<I", blob, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise DataError(f"checksum mismatch in section {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        flags[name] = flag
    if off != len(blob):
        raise DataError(f"{len(blob) - off} trailing bytes after last section")
    return arrays, flags, extra


def write_blob_file(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_arrays(named))


def read_blob_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        arrays, _, _ = deserialize_arrays(fh.read())
    return arrays
