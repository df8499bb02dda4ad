"""Task-aware KV-cache compression driven by guidance-token attention.

The compressor prefills the context together with a short guidance prompt
(task description, optionally few-shot examples and the live query),
captures how the guidance rows attend over context columns, and keeps the
top-scoring rows per layer. Long contexts are processed in ``s`` segments:
each iteration prefills [compressed survivors, next segment, guidance],
re-scores everything visible, and keeps a growing budget, so earlier
survivors compete with fresh tokens every round. With ``s = 1`` the
iterative path degenerates to the one-shot oracle. With ``k >= n`` nothing
is ever dropped and the survivor cache is bit-identical to a plain prefill
of the context.

Survivors are renumbered to contiguous positions after every selection;
because the cache stores unrotated keys, renumbering is exact rather than
approximate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import StaleCacheError, UsageError
from .modelcore import GenerationParams, KvCache, Model, generate_greedy, prefill
from .vocab import TokenSequence, Vocabulary, fingerprint_ids, tokenize

GUIDANCE_KINDS = ("zs", "fs", "fsq")

# incremented by every compression entry point; the eval harness asserts
# reuse by checking this does not move on warm runs
COMPRESSION_CALLS = 0


def _count_call() -> None:
    global COMPRESSION_CALLS
    COMPRESSION_CALLS += 1


@dataclass(frozen=True)
class GuidancePrompt:
    """Guidance in one of three strengths: zero-shot task description,
    few-shot with worked examples, or few-shot plus the live query."""

    kind: str
    description: str
    examples: tuple[tuple[str, str], ...] = ()
    query: str | None = None

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise UsageError(f"guidance kind must be one of {GUIDANCE_KINDS}, got {self.kind!r}")
        if not self.description.strip():
            raise UsageError("guidance description must be nonempty")
        if self.kind == "zs" and self.examples:
            raise UsageError("zero-shot guidance takes no examples")
        if self.kind in ("fs", "fsq") and not self.examples:
            raise UsageError(f"{self.kind} guidance requires at least one example")
        if self.kind == "fsq" and not (self.query and self.query.strip()):
            raise UsageError("fsq guidance requires a query")
        if self.kind != "fsq" and self.query is not None:
            raise UsageError(f"{self.kind} guidance takes no query")

    def token_stream(self, vocab: Vocabulary) -> TokenSequence:
        """Flatten to guidance tokens: description, then per example the cue
        words ``example question ... answer ...``, then ``question <query>``."""
        parts = [self.description]
        for q, a in self.examples:
            parts.append(f"example question {q} answer {a}")
        if self.query is not None:
            parts.append(f"question {self.query}")
        return tokenize(" ".join(parts), vocab)


def guidance_fingerprint(guidance: GuidancePrompt, vocab: Vocabulary) -> bytes:
    h = hashlib.sha256()
    h.update(guidance.kind.encode())
    h.update(fingerprint_ids(guidance.token_stream(vocab).ids))
    return h.digest()


@dataclass(frozen=True)
class CompressionBudget:
    """Per-layer survivor count ``k`` and how it ramps across segments.

    ``proportional`` grows the kept count with the fraction of context seen,
    ceil(k * seen / total), reaching exactly k on the last segment. ``flat``
    holds every intermediate cache at k.
    """

    k: int
    schedule: str = "proportional"

    def __post_init__(self):
        if self.k < 1:
            raise UsageError("budget k must be >= 1")
        if self.schedule not in ("proportional", "flat"):
            raise UsageError(f"unknown schedule {self.schedule!r}")

    def target_rows(self, tokens_seen: int, total_tokens: int) -> int:
        if self.schedule == "flat":
            return self.k
        return (self.k * tokens_seen + total_tokens - 1) // total_tokens


@dataclass(frozen=True)
class SelectionPolicy:
    """Survivor selection rule; score ties break toward the lower original
    position so reruns are bit-stable."""

    tie_break: str = "lower_position"

    def __post_init__(self):
        if self.tie_break != "lower_position":
            raise UsageError(f"unknown tie break {self.tie_break!r}")


def plan_chunks(n_tokens: int, n_segments: int) -> list[tuple[int, int]]:
    """Split [0, n_tokens) into up to n_segments contiguous spans of equal
    ceiling width; the last span absorbs the remainder (possibly shorter)."""
    if n_tokens < 1:
        raise UsageError("cannot plan chunks over an empty context")
    if n_segments < 1:
        raise UsageError("need at least one segment")
    width = -(-n_tokens // n_segments)
    spans = []
    for start in range(0, n_tokens, width):
        spans.append((start, min(start + width, n_tokens)))
    return spans


def score_tokens(capture, n_candidates: int) -> list[np.ndarray]:
    """Per-layer candidate scores: mean over heads and observer rows of the
    captured attention mass on the first n_candidates columns."""
    if n_candidates < 1 or n_candidates > capture.total_tokens:
        raise UsageError(f"candidate count {n_candidates} outside capture width")
    return [layer[:, :, :n_candidates].mean(axis=(0, 1)) for layer in capture.layers]


def select_top(scores: np.ndarray, k: int, policy: SelectionPolicy = SelectionPolicy()) -> np.ndarray:
    """Indices of the k best-scoring candidates, ascending; ties keep the
    lower index."""
    if k < 0 or k > scores.shape[0]:
        raise UsageError(f"cannot keep {k} of {scores.shape[0]} candidates")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


@dataclass(frozen=True)
class CacheMeta:
    model_fingerprint: bytes
    guidance_fingerprint: bytes
    corpus_fingerprint: bytes
    n_context: int
    k: int
    s: int
    schedule: str


@dataclass
class CompressedCache:
    """Survivor K/V rows per layer plus the original context position of
    every survivor. Keys are unrotated; assigned positions are the row
    indices 0..r-1."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    kept_positions: list[np.ndarray]
    meta: CacheMeta

    @property
    def n_kept(self) -> int:
        return self.keys[0].shape[0]

    def to_kv_cache(self) -> KvCache:
        r = self.n_kept
        return KvCache(
            [k.copy() for k in self.keys],
            [v.copy() for v in self.values],
            [np.arange(r, dtype=np.int64) for _ in self.keys],
        )


def _context_ids(context) -> np.ndarray:
    ids = np.asarray(getattr(context, "ids", context), dtype=np.int64)
    if ids.size == 0:
        raise UsageError("context must be nonempty")
    return ids


def _guidance_ids(guidance: GuidancePrompt, vocab: Vocabulary) -> np.ndarray:
    gids = np.asarray(guidance.token_stream(vocab).ids, dtype=np.int64)
    if gids.size == 0:
        raise UsageError("guidance token stream is empty")
    return gids


def compress_iterative(
    model: Model,
    context,
    guidance: GuidancePrompt,
    vocab: Vocabulary,
    budget: CompressionBudget,
    s: int = 2,
    policy: SelectionPolicy = SelectionPolicy(),
) -> CompressedCache:
    """Compress a context to at most ``budget.k`` rows per layer in ``s``
    segment passes. Guidance rows observe but are never kept."""
    _count_call()
    if s < 1:
        raise UsageError("segment count s must be >= 1")
    ctx = _context_ids(context)
    gids = _guidance_ids(guidance, vocab)
    n = int(ctx.shape[0])
    n_layers = model.config.n_layers

    cache = KvCache.empty(model.config)
    kept = [np.empty(0, np.int64) for _ in range(n_layers)]
    for start, end in plan_chunks(n, s):
        seg_len = end - start
        r_prev = cache.length
        seq = np.concatenate([ctx[start:end], gids])
        capture = prefill(
            model, cache, seq, observer_span=(seg_len, seg_len + gids.shape[0])
        )
        n_cand = r_prev + seg_len
        r_i = min(budget.target_rows(end, n), n_cand)
        scores = score_tokens(capture, n_cand)
        new_keys, new_values, new_positions, new_kept = [], [], [], []
        for layer in range(n_layers):
            keep = select_top(scores[layer], r_i, policy)
            originals = np.concatenate([kept[layer], np.arange(start, end, dtype=np.int64)])
            new_keys.append(cache.keys[layer][keep])
            new_values.append(cache.values[layer][keep])
            new_positions.append(np.arange(r_i, dtype=np.int64))
            new_kept.append(originals[keep])
        cache = KvCache(new_keys, new_values, new_positions)
        kept = new_kept

    meta = CacheMeta(
        model_fingerprint=model.fingerprint,
        guidance_fingerprint=guidance_fingerprint(guidance, vocab),
        corpus_fingerprint=fingerprint_ids(ctx),
        n_context=n,
        k=budget.k,
        s=s,
        schedule=budget.schedule,
    )
    return CompressedCache(cache.keys, cache.values, kept, meta)


def compress_oracle(
    model: Model,
    context,
    guidance: GuidancePrompt,
    vocab: Vocabulary,
    k: int,
    policy: SelectionPolicy = SelectionPolicy(),
) -> CompressedCache:
    """One-shot reference: prefill the whole context with guidance appended
    and keep the global top-k per layer. Equals compress_iterative(s=1)."""
    _count_call()
    if k < 1:
        raise UsageError("budget k must be >= 1")
    ctx = _context_ids(context)
    gids = _guidance_ids(guidance, vocab)
    n = int(ctx.shape[0])

    cache = KvCache.empty(model.config)
    seq = np.concatenate([ctx, gids])
    capture = prefill(model, cache, seq, observer_span=(n, n + gids.shape[0]))
    scores = score_tokens(capture, n)
    r = min(k, n)
    keys, values, kept = [], [], []
    for layer in range(model.config.n_layers):
        keep = select_top(scores[layer], r, policy)
        keys.append(cache.keys[layer][keep])
        values.append(cache.values[layer][keep])
        kept.append(keep.astype(np.int64))

    meta = CacheMeta(
        model_fingerprint=model.fingerprint,
        guidance_fingerprint=guidance_fingerprint(guidance, vocab),
        corpus_fingerprint=fingerprint_ids(ctx),
        n_context=n,
        k=k,
        s=1,
        schedule="oracle",
    )
    return CompressedCache(keys, values, kept, meta)


def answer_with_cache(
    model: Model,
    compressed: CompressedCache,
    prompt,
    params: GenerationParams = GenerationParams(),
) -> TokenSequence:
    """Greedy-decode an answer on a fork of the compressed cache. The stored
    cache is never mutated, so repeated questions see identical state."""
    if model.fingerprint != compressed.meta.model_fingerprint:
        raise StaleCacheError("compressed cache was built by a different model")
    cache = compressed.to_kv_cache()
    return generate_greedy(model, cache, prompt, params)


def retention(compressed: CompressedCache, positions) -> float:
    """Fraction of the given original context positions that survived,
    averaged over layers."""
    want = np.unique(np.asarray(positions, dtype=np.int64))
    if want.size == 0:
        raise UsageError("no positions to check retention for")
    fractions = [float(np.isin(want, kp).mean()) for kp in compressed.kept_positions]
    return float(np.mean(fractions))
