"""Minimal deterministic decoder-only transformer with an explicit KV cache.

The runtime is CPU-only float32 numpy. Architecture: token embedding,
pre-norm blocks (RMSNorm, multi-head attention with optional rotary
positions, GELU MLP), final RMSNorm, linear head.

Two properties of the cache design matter to everything downstream:

* Keys are stored **unrotated**. Rotation is applied at attention time from
  each row's assigned position, so survivors of a compression pass can be
  renumbered to contiguous positions and re-rotated exactly.
* ``prefill`` never produces logits; the first answer token always comes
  from a ``decode_step``. This lets prefill skip the last layer's full
  attention (nothing consumes it), which roughly halves prefill cost on a
  two-layer model.

Attention weights for a designated observer span (guidance tokens) can be
captured per layer and head during prefill; compression ranks context
tokens with those rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PositionOverflowError, UsageError
from .vocab import SEP, TokenSequence, Vocabulary

F32 = np.float32

ATTENTION_BLOCK = 512

# init_diagnostic_model needs room for one sink channel plus near-orthogonal
# random codes; below this width the code construction cannot separate tokens.
DIAGNOSTIC_MIN_WIDTH = 64
_DIAGNOSTIC_SEED = 0xD1A6
_DIAGNOSTIC_GAIN = 24.0
_DIAGNOSTIC_SINK_DOT = 0.5
_DIAGNOSTIC_CROSS_LIMIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    hidden_size: int
    head_dim: int
    vocab_size: int
    max_position: int
    rotary_enabled: bool = True
    rotary_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_size != self.n_heads * self.head_dim:
            raise UsageError(
                f"hidden_size {self.hidden_size} != n_heads {self.n_heads} x head_dim {self.head_dim}"
            )
        if self.n_layers < 1:
            raise UsageError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise UsageError("vocab_size must be >= 2")
        if self.max_position < 1:
            raise UsageError("max_position must be >= 1")
        if self.rotary_enabled and self.head_dim % 2 != 0:
            raise UsageError("head_dim must be even when rotary positions are enabled")


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 24
    stop_tokens: tuple[int, ...] = (SEP,)

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise UsageError("max_new_tokens must be >= 1")


class KvCache:
    """Per-layer key/value rows plus the position assigned to each row.

    Keys are unrotated. Positions are strictly increasing within a layer and
    every layer holds the same number of rows. A cache is owned by exactly
    one in-flight inference; callers that must not disturb a cache fork it.
    """

    __slots__ = ("keys", "values", "positions")

    def __init__(self, keys, values, positions):
        self.keys: list[np.ndarray] = keys
        self.values: list[np.ndarray] = values
        self.positions: list[np.ndarray] = positions

    @classmethod
    def empty(cls, config: ModelConfig) -> "KvCache":
        d = config.hidden_size
        return cls(
            [np.empty((0, d), F32) for _ in range(config.n_layers)],
            [np.empty((0, d), F32) for _ in range(config.n_layers)],
            [np.empty((0,), np.int64) for _ in range(config.n_layers)],
        )

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def length(self) -> int:
        return self.keys[0].shape[0]

    @property
    def next_position(self) -> int:
        pos = self.positions[0]
        return int(pos[-1]) + 1 if pos.size else 0

    def fork(self) -> "KvCache":
        return KvCache(
            [k.copy() for k in self.keys],
            [v.copy() for v in self.values],
            [p.copy() for p in self.positions],
        )

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, positions: np.ndarray) -> None:
        self.keys[layer] = np.concatenate([self.keys[layer], k])
        self.values[layer] = np.concatenate([self.values[layer], v])
        self.positions[layer] = np.concatenate([self.positions[layer], positions])


@dataclass
class AttentionCapture:
    """Per-layer tensors recorded during one prefill.

    ``layers[l]`` holds post-softmax attention of the observer span, shape
    (n_heads, n_observers, total_tokens) where total_tokens counts all
    cached plus current tokens after the prefill. Columns a row could not
    causally see are zero; visible columns sum to 1. Empty list when no
    observer span was requested.

    ``queries[l]`` holds the rotated query rows of the query span, shape
    (span_len, hidden_size); None when no query span was requested.
    """

    layers: list[np.ndarray]
    queries: list[np.ndarray] | None = None

    @property
    def n_observers(self) -> int:
        return self.layers[0].shape[1]

    @property
    def total_tokens(self) -> int:
        return self.layers[0].shape[2]


@dataclass
class Model:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    fingerprint: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = fingerprint_weights(self.config, self.weights)


def tensor_names(config: ModelConfig) -> list[str]:
    """Canonical tensor set of the flat weight container, in storage order."""
    names = ["embedding"]
    for i in range(config.n_layers):
        names += [
            f"layers.{i}.attn_norm",
            f"layers.{i}.q_proj",
            f"layers.{i}.k_proj",
            f"layers.{i}.v_proj",
            f"layers.{i}.o_proj",
            f"layers.{i}.mlp_norm",
            f"layers.{i}.mlp_fc1",
            f"layers.{i}.mlp_fc2",
        ]
    names += ["final_norm", "lm_head"]
    return names


def tensor_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    d, v = config.hidden_size, config.vocab_size
    if name == "embedding":
        return (v, d)
    if name == "lm_head":
        return (d, v)
    if name.endswith("_norm"):
        return (d,)
    if name.endswith("mlp_fc1"):
        return (d, 4 * d)
    if name.endswith("mlp_fc2"):
        return (4 * d, d)
    return (d, d)


def fingerprint_weights(config: ModelConfig, weights: dict[str, np.ndarray]) -> bytes:
    h = hashlib.sha256()
    h.update(repr(config).encode())
    for name in tensor_names(config):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name]).tobytes())
    return h.digest()


def init_random_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic random model: projections uniform in [-1/sqrt(d), 1/sqrt(d)],
    norm gains fixed at 1."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(config.hidden_size)
    weights = {}
    for name in tensor_names(config):
        shape = tensor_shape(name, config)
        if name.endswith("_norm"):
            weights[name] = np.ones(shape, F32)
        else:
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(F32)
    return Model(config, weights)


def init_diagnostic_model(config: ModelConfig, vocab: Vocabulary) -> Model:
    """Attention oracle: near-orthogonal token codes and identity-scaled q/k.

    Construction (all deterministic, independent of `config` randomness):

    * every token code is unit-norm ``[a, b * r]`` with ``a = 0.5`` and ``r``
      random signs on the remaining dims, rejection-sampled so any two codes'
      random parts correlate at most 0.25;
    * the separator token is the pure sink direction ``[1, 0, ...]``.

    Dot products are then 1.0 for an id match, 0.5 against the sink, and at
    most 0.4375 between distinct ids, so attention from a token strictly
    peaks on same-id columns and falls back to the sink when no match
    exists. v is identity, o and the MLP are zero (hidden states stay equal
    to the embeddings at every layer), the head is zero (all logits tie).
    Rotary is disabled so equal ids score equally regardless of distance.
    """
    d = config.hidden_size
    if d < DIAGNOSTIC_MIN_WIDTH:
        raise UsageError(f"diagnostic model needs hidden_size >= {DIAGNOSTIC_MIN_WIDTH}, got {d}")
    if config.vocab_size < len(vocab):
        raise UsageError(
            f"config.vocab_size {config.vocab_size} smaller than vocabulary {len(vocab)}"
        )
    cfg = replace(config, rotary_enabled=False)

    rng = np.random.default_rng(_DIAGNOSTIC_SEED)
    a = _DIAGNOSTIC_SINK_DOT
    b = float(np.sqrt(1.0 - a * a))
    emb = np.zeros((cfg.vocab_size, d), F32)
    codes = np.zeros((cfg.vocab_size, d - 1))
    for t in range(cfg.vocab_size):
        if t == SEP:
            emb[t, 0] = 1.0
            continue
        while True:
            r = (rng.integers(0, 2, size=d - 1) * 2 - 1) / np.sqrt(d - 1)
            if t == 0 or np.abs(codes[:t] @ r).max() <= _DIAGNOSTIC_CROSS_LIMIT:
                break
        codes[t] = r
        emb[t, 0] = a
        emb[t, 1:] = b * r

    d_k = cfg.head_dim
    gamma = _DIAGNOSTIC_GAIN * np.sqrt(d_k) / d
    weights = {}
    for name in tensor_names(cfg):
        shape = tensor_shape(name, cfg)
        if name == "embedding":
            weights[name] = emb
        elif name.endswith("_norm"):
            weights[name] = np.ones(shape, F32)
        elif name.endswith("q_proj"):
            weights[name] = (gamma * np.eye(d)).astype(F32)
        elif name.endswith(("k_proj", "v_proj")):
            weights[name] = np.eye(d, dtype=F32)
        else:
            weights[name] = np.zeros(shape, F32)
    return Model(cfg, weights)


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + F32(1e-6))
    return (x * inv * gain).astype(F32, copy=False)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; exactness is irrelevant, determinism is not
    c = F32(np.sqrt(2.0 / np.pi))
    return F32(0.5) * x * (F32(1.0) + np.tanh(c * (x + F32(0.044715) * x * x * x)))


def rotate(mat: np.ndarray, positions: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Rotary-rotate per-head key/query rows at the given positions.

    Angles are accumulated in float64 so large positions stay well
    conditioned; the result is float32. Identity when rotary is disabled.
    """
    if not config.rotary_enabled or mat.shape[0] == 0:
        return mat
    n, d = mat.shape
    dk = config.head_dim
    half = dk // 2
    inv_freq = config.rotary_base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(F32)[:, None, :]
    sin = np.sin(angles).astype(F32)[:, None, :]
    x = mat.reshape(n, config.n_heads, dk)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out.reshape(n, d)


def _check_new_positions(cache: KvCache, positions: np.ndarray, config: ModelConfig) -> None:
    if positions.size == 0:
        return
    if np.any(np.diff(positions) <= 0):
        raise UsageError("positions must be strictly increasing")
    if cache.length and positions[0] <= cache.positions[0][-1]:
        raise UsageError(
            f"position {int(positions[0])} collides with cached positions "
            f"(last is {int(cache.positions[0][-1])})"
        )
    if positions[-1] >= config.max_position:
        raise PositionOverflowError(
            f"position {int(positions[-1])} exceeds max_position {config.max_position}"
        )


def prefill(model, cache: KvCache, ids, positions=None, observer_span=None, query_span=None):
    """Run the prompt-processing phase over `ids`, growing `cache` in place.

    positions: assigned position per token; defaults to the next contiguous
        range after the cache.
    observer_span: optional (start, end) local index range into `ids`; when
        nonempty, the capture holds those rows' attention at every layer.
    query_span: optional (start, end) local range; when nonempty, the
        capture holds those rows' rotated query vectors at every layer.

    Returns an AttentionCapture when either span was requested, else None.
    Logits are never computed here; follow with decode_step.
    """
    cfg = model.config
    token_ids = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
    S = token_ids.shape[0]
    if S == 0:
        return None
    if np.any(token_ids >= cfg.vocab_size) or np.any(token_ids < 0):
        raise UsageError("token id outside model vocabulary")
    if positions is None:
        start = cache.next_position
        positions = np.arange(start, start + S, dtype=np.int64)
    else:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape[0] != S:
            raise UsageError("positions length must match sequence length")
    _check_new_positions(cache, positions, cfg)

    want_capture = observer_span is not None and observer_span[1] > observer_span[0]
    if want_capture:
        obs_lo, obs_hi = observer_span
        if not (0 <= obs_lo < obs_hi <= S):
            raise UsageError(f"observer span {observer_span} outside sequence of length {S}")
    want_queries = query_span is not None and query_span[1] > query_span[0]
    if want_queries:
        q_lo, q_hi = query_span
        if not (0 <= q_lo < q_hi <= S):
            raise UsageError(f"query span {query_span} outside sequence of length {S}")

    base = cache.length
    total = base + S
    H, dk, d = cfg.n_heads, cfg.head_dim, cfg.hidden_size
    scale = F32(1.0 / np.sqrt(dk))
    w = model.weights
    x = w["embedding"][token_ids]
    captures = (
        [np.zeros((H, obs_hi - obs_lo, total), F32) for _ in range(cfg.n_layers)]
        if want_capture
        else []
    )
    query_rows: list[np.ndarray] = []

    for layer in range(cfg.n_layers):
        hn = _rmsnorm(x, w[f"layers.{layer}.attn_norm"])
        q = hn @ w[f"layers.{layer}.q_proj"]
        k = hn @ w[f"layers.{layer}.k_proj"]
        v = hn @ w[f"layers.{layer}.v_proj"]
        cache.append(layer, k, v, positions)

        need_out = layer < cfg.n_layers - 1
        if not need_out and not want_capture and not want_queries:
            continue
        q_rot = rotate(q, positions, cfg)
        if want_queries:
            query_rows.append(q_rot[q_lo:q_hi].copy())
        if not need_out and not want_capture:
            continue
        k_rot = rotate(cache.keys[layer], cache.positions[layer], cfg)
        v_all = cache.values[layer]
        out = np.empty((S, d), F32) if need_out else None

        for s0 in range(0, S, ATTENTION_BLOCK):
            s1 = min(s0 + ATTENTION_BLOCK, S)
            end = base + s1
            # row at local index i sees columns [0, base+i]
            future = (
                np.arange(end, dtype=np.int64)[None, :]
                > (base + np.arange(s0, s1, dtype=np.int64))[:, None]
            )
            cap_rows = None
            if want_capture:
                lo, hi = max(obs_lo, s0), min(obs_hi, s1)
                if lo < hi:
                    cap_rows = (lo, hi)
            if not need_out and cap_rows is None:
                continue
            rows = slice(s0, s1) if need_out else slice(cap_rows[0], cap_rows[1])
            fut = future if need_out else future[cap_rows[0] - s0 : cap_rows[1] - s0]
            for h in range(H):
                cols = slice(h * dk, (h + 1) * dk)
                scores = (q_rot[rows, cols] @ k_rot[:end, cols].T) * scale
                scores[fut] = -np.inf
                scores -= scores.max(axis=1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=1, keepdims=True)
                if need_out:
                    out[rows, cols] = scores @ v_all[:end, cols]
                if cap_rows is not None:
                    lo, hi = cap_rows
                    src = scores[lo - s0 : hi - s0] if need_out else scores
                    captures[layer][h, lo - obs_lo : hi - obs_lo, :end] = src

        if need_out:
            x = x + out @ w[f"layers.{layer}.o_proj"]
            mn = _rmsnorm(x, w[f"layers.{layer}.mlp_norm"])
            x = x + _gelu(mn @ w[f"layers.{layer}.mlp_fc1"]) @ w[f"layers.{layer}.mlp_fc2"]

    if want_capture or want_queries:
        return AttentionCapture(captures, query_rows if want_queries else None)
    return None


def decode_step(model, cache: KvCache, token_id: int):
    """Process one token, append its K/V to every layer, return the logits."""
    cfg = model.config
    if not (0 <= token_id < cfg.vocab_size):
        raise UsageError(f"token id {token_id} outside model vocabulary")
    pos = np.array([cache.next_position], dtype=np.int64)
    _check_new_positions(cache, pos, cfg)

    H, dk = cfg.n_heads, cfg.head_dim
    scale = F32(1.0 / np.sqrt(dk))
    w = model.weights
    x = w["embedding"][np.array([token_id])]
    for layer in range(cfg.n_layers):
        hn = _rmsnorm(x, w[f"layers.{layer}.attn_norm"])
        q = hn @ w[f"layers.{layer}.q_proj"]
        k = hn @ w[f"layers.{layer}.k_proj"]
        v = hn @ w[f"layers.{layer}.v_proj"]
        cache.append(layer, k, v, pos)
        k_rot = rotate(cache.keys[layer], cache.positions[layer], cfg)
        q_rot = rotate(q, pos, cfg)
        out = np.empty_like(q)
        for h in range(H):
            cols = slice(h * dk, (h + 1) * dk)
            scores = (q_rot[:, cols] @ k_rot[:, cols].T) * scale
            scores -= scores.max(axis=1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=1, keepdims=True)
            out[:, cols] = scores @ cache.values[layer][:, cols]
        x = x + out @ w[f"layers.{layer}.o_proj"]
        mn = _rmsnorm(x, w[f"layers.{layer}.mlp_norm"])
        x = x + _gelu(mn @ w[f"layers.{layer}.mlp_fc1"]) @ w[f"layers.{layer}.mlp_fc2"]

    logits = _rmsnorm(x, w["final_norm"]) @ w["lm_head"]
    return logits[0], cache


def generate_greedy(model, cache: KvCache, prompt, params: GenerationParams):
    """Greedy decode after prefilling the prompt; mutates `cache`.

    Argmax ties resolve to the lowest token id. Stops on a stop token
    (excluded from the output) or after max_new_tokens.
    """
    ids = list(getattr(prompt, "ids", prompt))
    if not ids:
        raise UsageError("prompt must be nonempty")
    if len(ids) > 1:
        prefill(model, cache, ids[:-1])
    current = ids[-1]
    out: list[int] = []
    for _ in range(params.max_new_tokens):
        logits, _ = decode_step(model, cache, current)
        nxt = int(np.argmax(logits))
        if nxt in params.stop_tokens:
            break
        out.append(nxt)
        current = nxt
    return TokenSequence(ids=out)
