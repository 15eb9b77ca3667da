"""Flat key=value config text, digests, and seeded stream splitting.

One text syntax serves config files, dataset manifests, and the config
snapshot embedded in checkpoints: `key = value` lines, `#` comments, utf-8.
All randomness in a run flows from one integer seed, split into independent
streams by hashing a component name into the seed sequence.
"""

import hashlib
import zlib

import numpy as np

from .errors import FormatError


def format_flat(entries):
    """Render a mapping as sorted `key = value` lines (trailing newline)."""
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    return "\n".join(lines) + "\n" if lines else ""


def parse_flat(text):
    entries = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line without '=': {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise FormatError(f"config line with empty key: {raw!r}")
        entries[k] = v.strip()
    return entries


def digest(entries):
    """Short stable content digest of a flat mapping."""
    return hashlib.sha256(format_flat(entries).encode("utf-8")).hexdigest()[:16]


def stream_rng(seed, name, *extra):
    """Independent generator for the named component of a seeded run.

    Streams with different names (or extra indices) never collide; the same
    arguments always reproduce the same stream.
    """
    ent = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    ent.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(ent))
