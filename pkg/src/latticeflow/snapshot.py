"""Binary "LBLT" container for lattice grids and boundary masks.

Layout, all little-endian:

    bytes 0..3   magic b"LBLT"
    bytes 4..5   u16 format version (currently 1)
    bytes 6..7   u16 rank
    then         rank u32 dimensions (x, y, channels)
    then         prod(dims) IEEE-754 float32 values, row-major
                 (x outermost, channel innermost)

Solver states are float64 in memory and narrowed to float32 on save.
Masks use the same container with channels = 1 and values in {0.0, 1.0}.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, VersionError
from .lbm import BoundaryMask

MAGIC = b"LBLT"
VERSION = 1


def save_snapshot(path: str | Path, values: np.ndarray) -> None:
    """Write an array to an LBLT file, narrowing to float32."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("refusing to save non-finite values")
    dims = values.shape
    header = struct.pack("<4sHH", MAGIC, VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_snapshot(path: str | Path) -> np.ndarray:
    """Read an LBLT file back as a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("file too short for LBLT header", offset=len(raw))
    magic, version, rank = struct.unpack_from("<4sHH", raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise VersionError(found=version, expected=VERSION)
    offset = 8
    dims_size = 4 * rank
    if len(raw) < offset + dims_size:
        raise FormatError("file truncated inside dimension list", offset=len(raw))
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += dims_size
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 4 * count
    if len(raw) < expected:
        raise FormatError(
            f"file truncated: expected {expected} bytes, found {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return values.reshape(dims).astype(np.float32)


def save_mask(path: str | Path, mask: BoundaryMask) -> None:
    save_snapshot(path, mask.solid)


def load_mask(path: str | Path) -> BoundaryMask:
    values = load_snapshot(path)
    if values.ndim != 3 or values.shape[2] != 1:
        raise FormatError(f"mask file must have channels = 1, got shape {values.shape}")
    return BoundaryMask(values.astype(np.float64))
