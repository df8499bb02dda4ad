"""Task-agnostic KV-cache compression baselines.

Three reference policies that never see guidance text:

* StreamingLLM keeps the first `sink` positions plus a recency tail.
* SnapKV (query-agnostic variant) scores earlier context by the attention
  of the last `window` context tokens, smooths scores with a max pool, and
  keeps the window itself unconditionally.
* Expected Attention fits a per-layer, per-head Gaussian (mean and diagonal
  covariance) to recent rotated query vectors and scores each key by the
  closed-form log of its expected attention weight,
  mu.kappa/sqrt(d_k) + 0.5 * kappa^T Sigma kappa / d_k.

All three return the same CompressedCache shape as the task-aware
compressor; the guidance fingerprint is all zeros since none is used.
"""

from __future__ import annotations

import numpy as np

from .compress import CacheMeta, CompressedCache, _count_call, select_top
from .errors import UsageError
from .modelcore import KvCache, Model, prefill, rotate
from .vocab import fingerprint_ids

ZERO_GUIDANCE_FP = b"\x00" * 32

DEFAULT_SINK = 4
DEFAULT_WINDOW = 64
DEFAULT_POOL_WIDTH = 7
DEFAULT_SAMPLE_SIZE = 256


def _context_ids(context) -> np.ndarray:
    ids = np.asarray(getattr(context, "ids", context), dtype=np.int64)
    if ids.size == 0:
        raise UsageError("context must be nonempty")
    return ids


def _build(model: Model, ctx: np.ndarray, cache: KvCache, keeps, k: int, schedule: str) -> CompressedCache:
    meta = CacheMeta(
        model_fingerprint=model.fingerprint,
        guidance_fingerprint=ZERO_GUIDANCE_FP,
        corpus_fingerprint=fingerprint_ids(ctx),
        n_context=int(ctx.shape[0]),
        k=k,
        s=1,
        schedule=schedule,
    )
    keys = [cache.keys[l][keeps[l]] for l in range(model.config.n_layers)]
    values = [cache.values[l][keeps[l]] for l in range(model.config.n_layers)]
    kept = [keeps[l].astype(np.int64) for l in range(model.config.n_layers)]
    return CompressedCache(keys, values, kept, meta)


def compress_streaming_llm(model: Model, context, k: int, sink: int = DEFAULT_SINK) -> CompressedCache:
    """Keep the first `sink` positions and the last k - sink positions."""
    _count_call()
    if k < 1:
        raise UsageError("budget k must be >= 1")
    if sink < 0:
        raise UsageError("sink count must be >= 0")
    ctx = _context_ids(context)
    n = int(ctx.shape[0])
    cache = KvCache.empty(model.config)
    prefill(model, cache, ctx)
    n_keep = min(k, n)
    n_sink = min(sink, n_keep)
    keep = np.concatenate(
        [
            np.arange(n_sink, dtype=np.int64),
            np.arange(n - (n_keep - n_sink), n, dtype=np.int64),
        ]
    )
    keeps = [keep for _ in range(model.config.n_layers)]
    return _build(model, ctx, cache, keeps, k, "streaming")


def _max_pool(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or x.size == 0:
        return x
    half = width // 2
    pad = np.full(half, -np.inf, dtype=x.dtype)
    padded = np.concatenate([pad, x, pad])
    return np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1).max(axis=1)


def compress_snapkv_agnostic(
    model: Model,
    context,
    k: int,
    window: int = DEFAULT_WINDOW,
    pool_width: int = DEFAULT_POOL_WIDTH,
) -> CompressedCache:
    """Keep the last `window` context tokens plus the top k - window earlier
    tokens by window attention, max-pooled so neighbors of hot tokens
    survive together."""
    _count_call()
    if k < 1:
        raise UsageError("budget k must be >= 1")
    if window < 1:
        raise UsageError("window must be >= 1")
    if pool_width < 1:
        raise UsageError("pool_width must be >= 1")
    ctx = _context_ids(context)
    n = int(ctx.shape[0])
    n_keep = min(k, n)
    w_eff = min(window, n_keep)

    cache = KvCache.empty(model.config)
    capture = prefill(model, cache, ctx, observer_span=(n - w_eff, n))
    n_cand = n - w_eff
    window_rows = np.arange(n_cand, n, dtype=np.int64)
    keeps = []
    for layer in range(model.config.n_layers):
        if n_cand == 0:
            keeps.append(window_rows)
            continue
        scores = capture.layers[layer][:, :, :n_cand].mean(axis=(0, 1))
        pooled = _max_pool(scores, pool_width)
        chosen = select_top(pooled, n_keep - w_eff)
        keeps.append(np.concatenate([chosen.astype(np.int64), window_rows]))
    return _build(model, ctx, cache, keeps, k, "snapkv")


def compress_expected_attention(
    model: Model,
    context,
    k: int,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
) -> CompressedCache:
    """Score every key by its expected attention logit under a Gaussian fit
    to the last `sample_size` rotated query vectors. With fewer than two
    samples the covariance term drops and ranking is mean-query only."""
    _count_call()
    if k < 1:
        raise UsageError("budget k must be >= 1")
    if sample_size < 1:
        raise UsageError("sample_size must be >= 1")
    ctx = _context_ids(context)
    n = int(ctx.shape[0])
    m = min(sample_size, n)
    cfg = model.config
    H, dk = cfg.n_heads, cfg.head_dim

    cache = KvCache.empty(cfg)
    capture = prefill(model, cache, ctx, query_span=(n - m, n))
    r = min(k, n)
    keeps = []
    for layer in range(cfg.n_layers):
        queries = capture.queries[layer].astype(np.float64)
        k_rot = rotate(cache.keys[layer], cache.positions[layer], cfg).astype(np.float64)
        scores = np.zeros(n)
        for h in range(H):
            cols = slice(h * dk, (h + 1) * dk)
            q_h = queries[:, cols]
            mu = q_h.mean(axis=0)
            var = q_h.var(axis=0) if m >= 2 else np.zeros(dk)
            k_h = k_rot[:, cols]
            scores += k_h @ mu / np.sqrt(dk) + 0.5 * np.square(k_h) @ var / dk
        keeps.append(select_top(scores / H, r))
    return _build(model, ctx, cache, keeps, k, "expattn")
