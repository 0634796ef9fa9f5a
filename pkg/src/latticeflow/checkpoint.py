"""Binary "LNCK" checkpoint files for surrogate parameters and Adam state.

Layout, all little-endian:

    bytes 0..3   magic b"LNCK"
    bytes 4..5   u16 format version (currently 1)
    then         u32 config byte length, UTF-8 key=value lines
                 (model architecture keys plus train_step)
    then         u32 parameter count
    per param    u16 name length, UTF-8 name,
                 u16 rank, rank u32 dims,
                 prod(dims) float32 values,
                 prod(dims) float32 Adam first moment m,
                 prod(dims) float32 Adam second moment v,
                 u64 step count t

Values are stored as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError
from .surrogate import ModelConfig, Surrogate

MAGIC = b"LNCK"
VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: Surrogate,
    train_step: int = 0,
    extra: dict[str, str] | None = None,
) -> None:
    kv = model.config.to_kv()
    kv["train_step"] = str(train_step)
    if extra:
        kv.update(extra)
    config_bytes = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")
    params = model.parameters()
    chunks = [
        struct.pack("<4sH", MAGIC, VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(params)),
    ]
    for p in params:
        name = p.name.encode("utf-8")
        dims = p.data.shape
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<H", len(dims)))
        chunks.append(struct.pack(f"<{len(dims)}I", *dims))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(p.m, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(p.v, dtype="<f4").tobytes())
        chunks.append(struct.pack("<Q", p.t))
    tmp = Path(str(path) + ".partial")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.raw):
            raise FormatError(f"file truncated reading {what}", offset=len(self.raw))
        out = self.raw[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> tuple[dict[str, str], list[dict]]:
    """Read config keys and raw parameter records (name, values, m, v, t)."""
    r = _Reader(Path(path).read_bytes())
    magic, version = r.unpack("<4sH", "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise VersionError(found=version, expected=VERSION)
    (config_len,) = r.unpack("<I", "config length")
    kv: dict[str, str] = {}
    for line in r.take(config_len, "config block").decode("utf-8").splitlines():
        if line and "=" in line:
            key, value = line.split("=", 1)
            kv[key] = value
    (count,) = r.unpack("<I", "parameter count")
    records = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = r.unpack("<H", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * n, f"{name} values"), dtype="<f4").reshape(dims)
        m = np.frombuffer(r.take(4 * n, f"{name} m"), dtype="<f4").reshape(dims)
        v = np.frombuffer(r.take(4 * n, f"{name} v"), dtype="<f4").reshape(dims)
        (t,) = r.unpack("<Q", f"{name} step count")
        records.append({"name": name, "values": values, "m": m, "v": v, "t": t})
    if r.offset != len(r.raw):
        raise FormatError("trailing bytes after last parameter", offset=r.offset)
    return kv, records


def load_model(path: str | Path) -> tuple[Surrogate, int]:
    """Rebuild a Surrogate from a checkpoint; returns (model, train_step)."""
    kv, records = load_checkpoint(path)
    try:
        config = ModelConfig.from_kv(kv)
        train_step = int(kv.get("train_step", "0"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint config block incomplete: {exc}") from exc
    model = Surrogate(config, seed=0)
    params = {p.name: p for p in model.parameters()}
    if len(records) != len(params):
        raise FormatError(
            f"checkpoint has {len(records)} parameters, model expects {len(params)}"
        )
    for rec in records:
        if rec["name"] not in params:
            raise FormatError(f"checkpoint parameter {rec['name']!r} unknown to model")
        params[rec["name"]].load(rec["values"], rec["m"], rec["v"], rec["t"])
    return model, train_step
