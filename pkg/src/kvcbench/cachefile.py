"""Binary container for compressed caches.

Layout (little-endian): magic ``KVCC``, version u32, then the three 32-byte
fingerprints (model, guidance, corpus), n_context u64, k u32, s u32,
schedule code u8, n_layers u32, n_kept u64, hidden u32, and per layer the
kept original positions as u32 followed by the K and V rows as row-major
f32. Loading validates structure always and fingerprint compatibility when
a model is supplied, so a cache can never be silently replayed against the
wrong model.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ._binio import Reader
from .compress import CacheMeta, CompressedCache
from .errors import FormatError, MissingArtifactError, StaleCacheError
from .modelcore import Model

MAGIC = b"KVCC"
VERSION = 1

SCHEDULE_CODES = {
    "proportional": 0,
    "flat": 1,
    "oracle": 2,
    "streaming": 3,
    "snapkv": 4,
    "expattn": 5,
}
_CODE_SCHEDULES = {v: k for k, v in SCHEDULE_CODES.items()}


def save_cache(compressed: CompressedCache, path) -> None:
    meta = compressed.meta
    if meta.schedule not in SCHEDULE_CODES:
        raise FormatError(f"unknown schedule {meta.schedule!r}")
    n_layers = len(compressed.keys)
    n_kept = compressed.n_kept
    hidden = compressed.keys[0].shape[1]
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        meta.model_fingerprint,
        meta.guidance_fingerprint,
        meta.corpus_fingerprint,
        struct.pack(
            "<QIIBIQI",
            meta.n_context,
            meta.k,
            meta.s,
            SCHEDULE_CODES[meta.schedule],
            n_layers,
            n_kept,
            hidden,
        ),
    ]
    for layer in range(n_layers):
        parts.append(np.ascontiguousarray(compressed.kept_positions[layer], dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(compressed.keys[layer], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(compressed.values[layer], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_cache(path, model: Model | None = None) -> CompressedCache:
    """Read a KVCC container. When `model` is given, a fingerprint mismatch
    raises StaleCacheError; structural damage raises FormatError."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"cache container not found: {p}")
    r = Reader(p.read_bytes(), p)
    if r.take(4) != MAGIC:
        raise FormatError(f"{p}: not a KVCC container")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{p}: unsupported KVCC version {version} (expected {VERSION})")
    model_fp = r.take(32)
    guidance_fp = r.take(32)
    corpus_fp = r.take(32)
    n_context = r.u64()
    k = r.u32()
    s = r.u32()
    code = r.u8()
    if code not in _CODE_SCHEDULES:
        raise FormatError(f"{p}: unknown schedule code {code}")
    n_layers = r.u32()
    n_kept = r.u64()
    hidden = r.u32()
    if n_layers < 1 or hidden < 1:
        raise FormatError(f"{p}: implausible geometry ({n_layers} layers, hidden {hidden})")

    keys, values, kept = [], [], []
    for _ in range(n_layers):
        pos = r.array("<u4", n_kept).astype(np.int64)
        if n_kept and (np.any(np.diff(pos) <= 0) or pos[-1] >= n_context):
            raise FormatError(f"{p}: kept positions not strictly increasing within context")
        kept.append(pos)
        keys.append(r.array("<f4", n_kept * hidden).reshape(n_kept, hidden))
        values.append(r.array("<f4", n_kept * hidden).reshape(n_kept, hidden))
    r.expect_end()

    meta = CacheMeta(
        model_fingerprint=model_fp,
        guidance_fingerprint=guidance_fp,
        corpus_fingerprint=corpus_fp,
        n_context=n_context,
        k=k,
        s=s,
        schedule=_CODE_SCHEDULES[code],
    )
    loaded = CompressedCache(keys, values, kept, meta)
    if model is not None and model.fingerprint != model_fp:
        raise StaleCacheError(f"{p}: cache was built by a different model than the one supplied")
    return loaded
