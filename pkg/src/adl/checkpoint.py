"""Binary checkpoint container for trained models.

Little-endian layout: magic "ADCK", format version u16, then the config
digest (u16 length + utf-8), the flat config snapshot (u32 length + utf-8),
the epoch counter u32, a flat metrics block (u32 length + utf-8), a tensor
count u32, a name table (u16 length + utf-8 per entry, sorted), and the
tensors in table order as u32 rank, u32 dims, float32 payload. The stored
digest must match a digest recomputed from the snapshot, so a checkpoint
cannot silently drift from the config that produced it.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import digest as config_digest
from .config import format_flat, parse_flat
from .errors import CorruptionError, FormatError, InputError

MAGIC = b"ADCK"
VERSION = 1
_MAX_RANK = 8


@dataclass
class Checkpoint:
    """Named float32 arrays plus the run provenance that produced them."""

    arrays: dict
    config: dict = field(default_factory=dict)
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def digest(self):
        return config_digest(self.config)


def _pack_text(text, width):
    blob = text.encode("utf-8")
    return struct.pack(f"<{width}", len(blob)) + blob


def save_checkpoint(ckpt, path):
    for name, arr in ckpt.arrays.items():
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float32:
            raise InputError(f"checkpoint tensor {name!r} must be float32, "
                             f"got {getattr(arr, 'dtype', type(arr).__name__)}")
        if arr.ndim > _MAX_RANK:
            raise InputError(f"checkpoint tensor {name!r} has rank {arr.ndim} > {_MAX_RANK}")
    names = sorted(ckpt.arrays)
    metrics = {k: repr(float(v)) for k, v in ckpt.metrics.items()}
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(_pack_text(ckpt.digest, "H"))
    parts.append(_pack_text(format_flat(ckpt.config), "I"))
    parts.append(struct.pack("<I", int(ckpt.epoch)))
    parts.append(_pack_text(format_flat(metrics), "I"))
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        blob = name.encode("utf-8")
        parts.append(struct.pack("<H", len(blob)) + blob)
    for name in names:
        arr = ckpt.arrays[name]
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _take(blob, offset, size, what):
    if offset + size > len(blob):
        raise CorruptionError(f"checkpoint truncated reading {what} "
                              f"(need {size} bytes at {offset}, have {len(blob) - offset})")
    return blob[offset:offset + size], offset + size


def _take_text(blob, offset, width, what):
    size = struct.calcsize(f"<{width}")
    raw, offset = _take(blob, offset, size, f"{what} length")
    n, = struct.unpack(f"<{width}", raw)
    raw, offset = _take(blob, offset, n, what)
    return raw.decode("utf-8"), offset


def load_checkpoint(path):
    if not os.path.exists(path):
        raise InputError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    head, off = _take(blob, 0, 6, "header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic: expected {MAGIC!r}, got {head[:4]!r}")
    version, = struct.unpack("<H", head[4:6])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {VERSION}")

    stored_digest, off = _take_text(blob, off, "H", "config digest")
    config_text, off = _take_text(blob, off, "I", "config snapshot")
    config = parse_flat(config_text)
    if config_digest(config) != stored_digest:
        raise CorruptionError("checkpoint config digest mismatch: "
                              f"stored {stored_digest}, recomputed {config_digest(config)}")
    raw, off = _take(blob, off, 4, "epoch")
    epoch, = struct.unpack("<I", raw)
    metrics_text, off = _take_text(blob, off, "I", "metrics")
    metrics = {k: float(v) for k, v in parse_flat(metrics_text).items()}

    raw, off = _take(blob, off, 4, "tensor count")
    count, = struct.unpack("<I", raw)
    if count > 100_000:
        raise CorruptionError(f"implausible checkpoint tensor count {count}")
    names = []
    for i in range(count):
        name, off = _take_text(blob, off, "H", f"tensor name {i}")
        names.append(name)
    if names != sorted(names) or len(set(names)) != len(names):
        raise CorruptionError("checkpoint name table is not sorted and unique")

    arrays = {}
    for name in names:
        raw, off = _take(blob, off, 4, f"rank of {name}")
        rank, = struct.unpack("<I", raw)
        if rank > _MAX_RANK:
            raise CorruptionError(f"tensor {name!r} has implausible rank {rank}")
        raw, off = _take(blob, off, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw) if rank else ()
        total = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if total * 4 > len(blob) - off:
            raise CorruptionError(f"tensor {name!r} payload exceeds file size")
        raw, off = _take(blob, off, total * 4, f"payload of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if off != len(blob):
        raise CorruptionError(f"{len(blob) - off} trailing bytes after last tensor")
    return Checkpoint(arrays=arrays, config=config, epoch=epoch, metrics=metrics)
