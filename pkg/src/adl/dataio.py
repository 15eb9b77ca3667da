"""Binary dataset container and plain-text manifest.

Little-endian layout: magic "ADVD", format version u16, record count u32;
then per record a label u16, a (frames x 4) u16 box table, an rgb tensor as
4 u32 dims plus float32 payload, and a flow tensor in the same encoding.
A sidecar manifest (path + ".manifest") lists split, seed, config digest and
the clip geometry; the reader prefers it and falls back to scanning for a
self-consistent frame count.
"""

import os
import struct

import numpy as np

from .config import format_flat, parse_flat
from .datagen import Dataset
from .errors import CorruptionError, FormatError, InputError

MAGIC = b"ADVD"
VERSION = 1


def manifest_path(path):
    return str(path) + ".manifest"


def write_manifest(path, entries):
    with open(path, "w") as fh:
        fh.write(format_flat(entries))


def read_manifest(path):
    with open(path) as fh:
        return parse_flat(fh.read())


def write_dataset(path, dataset, split="train", seed=0, config_digest=""):
    """Serialize a Dataset; writes the sidecar manifest alongside."""
    n = len(dataset)
    frames, h, w = dataset.rgb.shape[1:4]
    if dataset.boxes.min() < 0 or dataset.boxes.max() > 0xFFFF:
        raise InputError("box coordinates do not fit u16")
    if dataset.labels.min() < 0 or dataset.labels.max() > 0xFFFF:
        raise InputError("labels do not fit u16")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, n))
        for i in range(n):
            fh.write(struct.pack("<H", int(dataset.labels[i])))
            fh.write(dataset.boxes[i].astype("<u2").tobytes())
            _write_tensor(fh, dataset.rgb[i])
            _write_tensor(fh, dataset.flow[i])
    write_manifest(manifest_path(path), {
        "format": "advd",
        "version": VERSION,
        "split": split,
        "seed": seed,
        "config_digest": config_digest,
        "records": n,
        "frames": frames,
        "height": h,
        "width": w,
    })


def _write_tensor(fh, arr):
    if arr.ndim != 4:
        raise InputError(f"container tensors are rank 4, got {arr.shape}")
    fh.write(struct.pack("<4I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise CorruptionError(f"file truncated while reading {what}")
    return buf


def _read_tensor(fh, what):
    dims = struct.unpack("<4I", _read_exact(fh, 16, f"{what} dims"))
    size = int(np.prod(dims))
    if size == 0 or size > 1 << 28:
        raise CorruptionError(f"implausible {what} dims {dims}")
    payload = _read_exact(fh, size * 4, f"{what} payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _infer_frames(blob):
    """Find T such that the u32 after the box table equals T with 3 channels."""
    candidates = []
    for t in range(1, 1025):
        off = 2 + 8 * t
        if off + 16 > len(blob):
            break
        dims = struct.unpack_from("<4I", blob, off)
        if dims[0] == t and dims[3] == 3:
            candidates.append(t)
    if len(candidates) != 1:
        raise CorruptionError(
            f"cannot infer clip length without a manifest (candidates {candidates})")
    return candidates[0]


def read_dataset(path):
    """Load a container; returns a Dataset with manifest entries in .meta."""
    if not os.path.exists(path):
        raise InputError(f"no such dataset file: {path}")
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        if count == 0:
            raise InputError(f"dataset {path} holds no records")
        meta = {}
        mpath = manifest_path(path)
        if os.path.exists(mpath):
            meta = read_manifest(mpath)
            frames = int(meta["frames"])
        else:
            head = fh.read(2 + 8 * 1024 + 16)
            frames = _infer_frames(head)
            fh.seek(10)
        rgb, flow, labels, boxes = [], [], [], []
        for i in range(count):
            label, = struct.unpack("<H", _read_exact(fh, 2, f"record {i} label"))
            raw = _read_exact(fh, frames * 8, f"record {i} boxes")
            box = np.frombuffer(raw, dtype="<u2").reshape(frames, 4).astype(np.int64)
            r = _read_tensor(fh, f"record {i} rgb")
            f = _read_tensor(fh, f"record {i} flow")
            if r.shape[0] != frames or f.shape[:3] != r.shape[:3] or f.shape[3] != 2:
                raise CorruptionError(
                    f"record {i} geometry mismatch: rgb {r.shape}, flow {f.shape}")
            labels.append(label)
            boxes.append(box)
            rgb.append(r)
            flow.append(f)
        trailing = fh.read(1)
        if trailing:
            raise CorruptionError("trailing bytes after the last record")
    return Dataset(rgb=np.stack(rgb), flow=np.stack(flow),
                   labels=np.array(labels, dtype=np.int64),
                   boxes=np.stack(boxes), meta=meta)
