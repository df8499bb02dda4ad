"""Evaluation protocol: answer scoring, suite runs, latency, and reports.

Scoring is set recall of normalized words (lowercase, punctuation stripped)
against the question's gold answers, so answer order and filler words do
not matter. A suite run walks methods x budgets x questions, appends one
JSON line per completed cell so an interrupted run resumes where it
stopped, and keeps every compressed cache in an in-process registry keyed
by (corpus, guidance, budget, segments) so a cache is built once and reused
across questions. Few-shot guidance examples are drawn from the generated
questions and reserved out of the eval set for every method, task-aware or
not. A failing cell is recorded with its error text and the suite moves on.

Each record decomposes wall time into compress (cache build, charged to the
record that triggered it), retrieve, prefill, and first decoded token.

Time-to-first-token follows the query-time accounting: compression is
offline work and stays outside the timed region (it is logged instead),
while retrieval, cache forking, question prefill, and the first decode step
are inside. An infeasible full-context scenario is reported as NaN, never
raised.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import random
import statistics
import string
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import (
    compress_expected_attention,
    compress_snapkv_agnostic,
    compress_streaming_llm,
)
from .compress import (
    CompressionBudget,
    GuidancePrompt,
    compress_iterative,
    compress_oracle,
    guidance_fingerprint,
    retention,
)
from .corpusgen import DEFAULT_TASK_DESCRIPTION, CorpusBundle, Question
from .errors import StaleCacheError, UsageError
from .modelcore import (
    GenerationParams,
    KvCache,
    Model,
    ModelConfig,
    decode_step,
    generate_greedy,
    prefill,
)
from .retrieval import assemble_context, evidence_recall, index_chunks, retrieve
from .vocab import TokenSequence, Vocabulary, detokenize, tokenize

log = logging.getLogger(__name__)

METHODS = ("full", "rag", "kvc_zs", "kvc_fs", "kvc_fsq", "streaming", "snapkv", "expattn", "oracle")
RUNS_SCHEMA_VERSION = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def default_eval_config(vocab_size: int) -> ModelConfig:
    """Small random model sized so the full benchmark corpus plus guidance
    and a question fit in positions."""
    return ModelConfig(
        n_layers=2, n_heads=2, hidden_size=32, head_dim=16,
        vocab_size=vocab_size, max_position=40960,
    )


def ttft_reference_config(vocab_size: int) -> ModelConfig:
    """Latency reference model with position room for long-context sweeps."""
    return ModelConfig(
        n_layers=2, n_heads=1, hidden_size=32, head_dim=32,
        vocab_size=vocab_size, max_position=131072,
    )


def normalize(text: str) -> list[str]:
    """Lowercase, strip all punctuation characters, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def word_overlap(prediction: str, gold_words) -> float:
    """Set recall: fraction of normalized gold words present in the
    normalized prediction."""
    gold = set()
    for w in gold_words:
        gold.update(normalize(w))
    if not gold:
        raise UsageError("gold word set is empty after normalization")
    pred = set(normalize(prediction))
    return len(gold & pred) / len(gold)


def question_prompt(text: str, vocab: Vocabulary) -> TokenSequence:
    """Query-time prompt: the question bracketed by the same cue words the
    guidance stream uses."""
    return tokenize(f"question {text} answer", vocab)


def select_fewshot(bundle: CorpusBundle, n: int, seed: int = 0) -> list[Question]:
    """Deterministically reserve n questions as guidance examples."""
    if n == 0:
        return []
    if n >= len(bundle.questions):
        raise UsageError(f"cannot reserve {n} few-shot examples from {len(bundle.questions)} questions")
    rng = random.Random((seed << 16) ^ int.from_bytes(bundle.corpus_fingerprint()[:4], "little"))
    return rng.sample(bundle.questions, n)


def make_guidance(kind: str, examples: list[Question], query: str | None = None) -> GuidancePrompt:
    pairs = tuple((q.text, " ".join(q.answers)) for q in examples)
    if kind == "zs":
        return GuidancePrompt("zs", DEFAULT_TASK_DESCRIPTION)
    if kind == "fs":
        return GuidancePrompt("fs", DEFAULT_TASK_DESCRIPTION, pairs)
    if kind == "fsq":
        return GuidancePrompt("fsq", DEFAULT_TASK_DESCRIPTION, pairs, query=query)
    raise UsageError(f"unknown guidance kind {kind!r}")


@dataclass(frozen=True)
class RunRecord:
    qid: str
    kind: str
    method: str
    budget: int
    connectivity: int
    corpus_fp: str
    answer: str
    overlap: float
    retention: float | None
    evidence_recall: float | None
    compress_s: float
    retrieve_s: float
    prefill_s: float
    first_token_s: float
    elapsed_s: float
    error: str = ""
    schema_version: int = RUNS_SCHEMA_VERSION


def load_records(path) -> list[RunRecord]:
    p = Path(path)
    if not p.exists():
        return []
    records = []
    for line in p.read_text().splitlines():
        if line.strip():
            records.append(RunRecord(**json.loads(line)))
    return records


def _record_key(rec: RunRecord) -> tuple:
    return (rec.qid, rec.method, rec.budget)


def run_suite(
    model: Model,
    bundle: CorpusBundle,
    methods,
    budgets,
    out_path,
    questions=None,
    s: int = 2,
    n_fewshot: int = 3,
    params: GenerationParams = GenerationParams(max_new_tokens=12),
    registry: dict | None = None,
) -> list[RunRecord]:
    """Evaluate every (method, budget, question) cell, appending finished
    cells to `out_path` as JSON lines. Existing cells are skipped, so
    rerunning after an interruption (or on a warm registry) does no
    compression work twice. A cell that raises is recorded with its error
    and the suite continues."""
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r} (choose from {METHODS})")
    if registry is None:
        registry = {}
    vocab = bundle.vocab
    corpus = bundle.corpus_tokens()
    corpus_fp = bundle.corpus_fingerprint().hex()
    conn = bundle.spec.connectivity

    examples = select_fewshot(bundle, n_fewshot)
    reserved = {q.qid for q in examples}
    if questions is None:
        questions = [q for q in bundle.questions if q.qid not in reserved]
    else:
        clash = [q.qid for q in questions if q.qid in reserved]
        if clash:
            raise UsageError(f"questions {clash} are reserved as few-shot examples")

    done = {_record_key(r): r for r in load_records(out_path)}
    records: list[RunRecord] = []
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "a") as fh:
        for method in methods:
            for budget in [0] if method == "full" else list(budgets):
                for q in questions:
                    key = (q.qid, method, budget)
                    if key in done:
                        records.append(done[key])
                        continue
                    rec = _run_cell(
                        model, bundle, corpus, corpus_fp, conn, method, budget,
                        q, examples, s, params, registry, vocab,
                    )
                    if rec.error:
                        log.warning("cell %s failed: %s", key, rec.error)
                    fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")
                    fh.flush()
                    done[key] = rec
                    records.append(rec)
    return records


def _get_entry(registry: dict, key: tuple, build):
    """Build-once registry entry that remembers its build time until a
    record claims it."""
    if key not in registry:
        t0 = time.perf_counter()
        value = build()
        registry[key] = {"value": value, "build_s": time.perf_counter() - t0, "charged": False}
    return registry[key]


def _charge(entry) -> tuple:
    """Return (value, build seconds) charging the build to the first caller."""
    if entry["charged"]:
        return entry["value"], 0.0
    entry["charged"] = True
    return entry["value"], entry["build_s"]


def _timed_answer(model, cache, prompt, params) -> tuple[TokenSequence, float, float]:
    """Greedy answer with (prefill seconds, first-token seconds) split out.

    Runs the same decode trace as generate_greedy: prompt body prefilled,
    first token decoded and timed, remaining tokens decoded greedily.
    """
    ids = list(getattr(prompt, "ids", prompt))
    if not ids:
        raise UsageError("prompt must be nonempty")
    t0 = time.perf_counter()
    if len(ids) > 1:
        prefill(model, cache, ids[:-1])
    t1 = time.perf_counter()
    logits, _ = decode_step(model, cache, ids[-1])
    first_s = time.perf_counter() - t1
    tok0 = int(np.argmax(logits))
    if tok0 in params.stop_tokens:
        return TokenSequence(ids=[]), t1 - t0, first_s
    out = [tok0]
    if params.max_new_tokens > 1:
        rest = generate_greedy(
            model, cache, [tok0],
            dataclasses.replace(params, max_new_tokens=params.max_new_tokens - 1),
        )
        out.extend(rest.ids)
    return TokenSequence(ids=out), t1 - t0, first_s


def _guidance_for(method: str, q: Question, examples) -> GuidancePrompt:
    if method in ("oracle", "kvc_fs"):
        return make_guidance("fs", examples)
    if method == "kvc_fsq":
        return make_guidance("fsq", examples, query=q.text)
    return make_guidance("zs", examples)


def _rag_retention(q: Question, selected_ids, chunk_tokens: int) -> float:
    if not q.gold_positions:
        return 0.0
    sel = set(selected_ids)
    inside = sum(1 for p in q.gold_positions if p // chunk_tokens in sel)
    return inside / len(q.gold_positions)


def _run_cell(model, bundle, corpus, corpus_fp, conn, method, budget, q, examples, s, params, registry, vocab):
    prompt = question_prompt(q.text, vocab)
    recall = None
    ret = None
    compress_s = retrieve_s = prefill_s = first_s = 0.0
    text = ""
    overlap = 0.0
    error = ""
    t_start = time.perf_counter()

    try:
        if method == "full":
            def build_full():
                base = KvCache.empty(model.config)
                prefill(model, base, corpus)
                return base
            base, build_s = _charge(_get_entry(registry, ("full", corpus_fp), build_full))
            answer, prefill_s, first_s = _timed_answer(model, base.fork(), prompt, params)
            prefill_s += build_s
            ret = 1.0
        elif method == "rag":
            index, build_s = _charge(
                _get_entry(registry, ("rag_index", corpus_fp), lambda: index_chunks(bundle))
            )
            width = bundle.spec.chunk_tokens
            t0 = time.perf_counter()
            result = retrieve(index, tokenize(q.text, vocab), len(bundle.chunks))
            ctx = assemble_context(bundle, result, budget)
            retrieve_s = time.perf_counter() - t0 + build_s
            recall = evidence_recall(result, budget, width, q.evidence)
            ret = _rag_retention(q, result.ranking[: budget // width], width)
            cache = KvCache.empty(model.config)
            t0 = time.perf_counter()
            prefill(model, cache, ctx)
            ctx_prefill = time.perf_counter() - t0
            answer, prefill_s, first_s = _timed_answer(model, cache, prompt, params)
            prefill_s += ctx_prefill
        else:
            if method in ("kvc_zs", "kvc_fs", "kvc_fsq", "oracle"):
                guidance = _guidance_for(method, q, examples)
                gfp = guidance_fingerprint(guidance, vocab).hex()
                if method == "oracle":
                    key = ("oracle", corpus_fp, gfp, budget)
                    def build():
                        return compress_oracle(model, corpus, guidance, vocab, budget)
                else:
                    key = ("kvc", corpus_fp, gfp, budget, s)
                    def build():
                        return compress_iterative(
                            model, corpus, guidance, vocab, CompressionBudget(budget), s=s
                        )
            else:
                builders = {
                    "streaming": compress_streaming_llm,
                    "snapkv": compress_snapkv_agnostic,
                    "expattn": compress_expected_attention,
                }
                key = (method, corpus_fp, budget)
                def build(fn=builders[method]):
                    return fn(model, corpus, budget)
            compressed, compress_s = _charge(_get_entry(registry, key, build))
            if model.fingerprint != compressed.meta.model_fingerprint:
                raise StaleCacheError("compressed cache was built by a different model")
            ret = retention(compressed, q.gold_positions) if q.gold_positions else None
            answer, prefill_s, first_s = _timed_answer(model, compressed.to_kv_cache(), prompt, params)

        text = detokenize(answer, vocab)
        overlap = word_overlap(text, q.answers)
    except Exception as exc:  # per-question failures must not abort the suite
        error = f"{type(exc).__name__}: {exc}"

    return RunRecord(
        qid=q.qid,
        kind=q.kind,
        method=method,
        budget=budget,
        connectivity=conn,
        corpus_fp=corpus_fp,
        answer=text,
        overlap=overlap,
        retention=ret,
        evidence_recall=recall,
        compress_s=compress_s,
        retrieve_s=retrieve_s,
        prefill_s=prefill_s,
        first_token_s=first_s,
        elapsed_s=time.perf_counter() - t_start,
        error=error,
    )


def answer_with_context(model: Model, context, prompt, params: GenerationParams = GenerationParams()) -> TokenSequence:
    """Prefill a fresh cache with `context` and greedy-decode from `prompt`."""
    cache = KvCache.empty(model.config)
    prefill(model, cache, context)
    return generate_greedy(model, cache, prompt, params)


def answer_perplexity(model: Model, base_cache: KvCache, prompt, gold_ids) -> float:
    """Teacher-forced perplexity of the gold ids after the prompt, computed
    on a fork so the supplied cache is untouched."""
    gold = list(getattr(gold_ids, "ids", gold_ids))
    if not gold:
        raise UsageError("gold sequence is empty")
    ids = list(getattr(prompt, "ids", prompt))
    if not ids:
        raise UsageError("prompt must be nonempty")
    cache = base_cache.fork()
    if len(ids) > 1:
        prefill(model, cache, ids[:-1])
    current = ids[-1]
    log_probs = []
    for g in gold:
        logits, _ = decode_step(model, cache, current)
        shifted = logits.astype(np.float64) - logits.max()
        log_probs.append(shifted[g] - np.log(np.exp(shifted).sum()))
        current = g
    return float(np.exp(-np.mean(log_probs)))


@dataclass(frozen=True)
class AttentionProfile:
    """Plot-ready guidance attention over context positions, with optional
    gold-answer perplexity under the same model and context."""

    mass: np.ndarray
    perplexity: float | None


def attention_profile(
    model: Model,
    context,
    guidance: GuidancePrompt,
    vocab: Vocabulary,
    gold_answer=None,
    prompt=None,
) -> AttentionProfile:
    """Mean guidance-row attention mass per context token, averaged over
    layers, heads, and guidance rows. When a gold answer is given, its
    teacher-forced perplexity over the plain context is computed too; the
    prompt defaults to the fsq guidance query."""
    ctx = np.asarray(getattr(context, "ids", context), dtype=np.int64)
    gids = np.asarray(guidance.token_stream(vocab).ids, dtype=np.int64)
    if ctx.size == 0 or gids.size == 0:
        raise UsageError("context and guidance must be nonempty")
    cache = KvCache.empty(model.config)
    seq = np.concatenate([ctx, gids])
    capture = prefill(model, cache, seq, observer_span=(ctx.size, ctx.size + gids.size))
    per_layer = [layer[:, :, : ctx.size].mean(axis=(0, 1)) for layer in capture.layers]
    mass = np.mean(per_layer, axis=0)

    ppl = None
    if gold_answer is not None:
        if prompt is None:
            if guidance.query is None:
                raise UsageError("perplexity needs a prompt or fsq guidance with a query")
            prompt = question_prompt(guidance.query, vocab)
        base = KvCache.empty(model.config)
        prefill(model, base, ctx)
        ppl = answer_perplexity(model, base, prompt, gold_answer)
    return AttentionProfile(mass=mass, perplexity=ppl)


PROFILE_CSV_COLUMNS = ("position", "token_id", "mass")


def write_profile_csv(profile: AttentionProfile, context, path) -> None:
    ids = list(getattr(context, "ids", context))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_CSV_COLUMNS)
        for pos, (tid, m) in enumerate(zip(ids, profile.mass)):
            writer.writerow([pos, tid, float(m)])


@dataclass(frozen=True)
class TimingRecord:
    scenario: str
    corpus_tokens: int
    budget: int
    question_tokens: int
    median_s: float
    min_s: float
    reps: int
    feasible: bool


def measure_ttft(
    model: Model,
    scenario: str,
    question,
    corpus=None,
    bundle: CorpusBundle | None = None,
    index=None,
    compressed=None,
    budget: int = 0,
    reps: int = 5,
    offline_s: float | None = None,
) -> TimingRecord:
    """Wall-clock time to the first generated token for one scenario.

    full: prefill corpus + question, one decode step.
    rag:  retrieve + assemble + prefill selection + question, one decode.
    kvc:  fork the compressed cache + prefill question, one decode.

    One warm-up repetition is discarded; `reps` timed repetitions follow and
    the record keeps their median and min. A corpus too long for the model's
    positions yields feasible=False with NaN times instead of an error.
    Offline compression time is excluded by construction; pass `offline_s`
    to have it logged alongside the measurement.
    """
    if reps < 1:
        raise UsageError("reps must be >= 1")
    q_ids = np.asarray(getattr(question, "ids", question), dtype=np.int64)
    if q_ids.size == 0:
        raise UsageError("question must be nonempty")

    if scenario == "full":
        if corpus is None:
            raise UsageError("full scenario needs the corpus tokens")
        ctx = np.asarray(getattr(corpus, "ids", corpus), dtype=np.int64)
        corpus_tokens = int(ctx.size)
        full_ids = np.concatenate([ctx, q_ids])

        def once():
            cache = KvCache.empty(model.config)
            prefill(model, cache, full_ids[:-1])
            decode_step(model, cache, int(full_ids[-1]))

        feasible = full_ids.size <= model.config.max_position
    elif scenario == "rag":
        if bundle is None or index is None:
            raise UsageError("rag scenario needs a bundle and an index")
        corpus_tokens = bundle.spec.n_tokens

        def once():
            result = retrieve(index, q_ids, len(bundle.chunks))
            ctx = assemble_context(bundle, result, budget)
            cache = KvCache.empty(model.config)
            prefill(model, cache, ctx)
            if q_ids.size > 1:
                prefill(model, cache, q_ids[:-1])
            decode_step(model, cache, int(q_ids[-1]))

        feasible = budget + q_ids.size <= model.config.max_position
    elif scenario == "kvc":
        if compressed is None:
            raise UsageError("kvc scenario needs a compressed cache")
        corpus_tokens = compressed.meta.n_context

        def once():
            cache = compressed.to_kv_cache()
            if q_ids.size > 1:
                prefill(model, cache, q_ids[:-1])
            decode_step(model, cache, int(q_ids[-1]))

        feasible = compressed.n_kept + q_ids.size <= model.config.max_position
    else:
        raise UsageError(f"unknown scenario {scenario!r} (full, rag, kvc)")

    if offline_s is not None:
        log.info("scenario=%s budget=%d offline compression excluded from timing: %.3fs", scenario, budget, offline_s)

    if not feasible:
        log.warning("scenario=%s infeasible at %d corpus tokens for max_position=%d",
                    scenario, corpus_tokens, model.config.max_position)
        return TimingRecord(scenario, corpus_tokens, budget, int(q_ids.size),
                            float("nan"), float("nan"), reps, False)

    once()  # warm-up, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        once()
        times.append(time.perf_counter() - t0)
    return TimingRecord(
        scenario, corpus_tokens, budget, int(q_ids.size),
        float(statistics.median(times)), float(min(times)), reps, True,
    )


TTFT_CSV_COLUMNS = ("scenario", "corpus_tokens", "budget", "question_tokens", "median_s", "min_s")


def write_ttft_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TTFT_CSV_COLUMNS)
        for r in records:
            writer.writerow([r.scenario, r.corpus_tokens, r.budget, r.question_tokens, r.median_s, r.min_s])


REPORT_CSV_COLUMNS = ("method", "budget", "connectivity", "n", "mean_overlap", "mean_retention", "mean_evidence_recall", "schema_version")


def emit_report(records, out_path, chunk_tokens: int = 256) -> list[dict]:
    """Aggregate run records into per (method, budget, connectivity) means.

    For every (budget, connectivity) that has retrieval rows, one extra
    ``rag_bound`` row carries the evidence-coverage ceiling for join
    questions, min(1, retrievable_chunks / (1 + connectivity)); a perfect
    ranking attains it exactly. Records that share a connectivity but come
    from different corpora are refused. Failed cells count toward n but
    score zero overlap, so partial runs stay visible.
    """
    records = list(records)
    if not records:
        raise UsageError("no records to report on")
    fps: dict[int, set[str]] = {}
    for r in records:
        fps.setdefault(r.connectivity, set()).add(r.corpus_fp)
    for conn, seen in sorted(fps.items()):
        if len(seen) > 1:
            raise UsageError(
                f"records at connectivity {conn} mix {len(seen)} different corpus fingerprints"
            )

    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.budget, r.connectivity), []).append(r)

    rows = []
    for (method, budget, conn), group in sorted(groups.items()):
        recalls = [g.evidence_recall for g in group if g.evidence_recall is not None]
        retentions = [g.retention for g in group if g.retention is not None]
        rows.append(
            {
                "method": method,
                "budget": budget,
                "connectivity": conn,
                "n": len(group),
                "mean_overlap": float(np.mean([g.overlap for g in group])),
                "mean_retention": float(np.mean(retentions)) if retentions else "",
                "mean_evidence_recall": float(np.mean(recalls)) if recalls else "",
                "schema_version": RUNS_SCHEMA_VERSION,
            }
        )
        if method == "rag":
            n_join = sum(1 for g in group if g.kind == "join")
            if n_join:
                bound = min(1.0, (budget // chunk_tokens) / (1 + conn))
                rows.append(
                    {
                        "method": "rag_bound",
                        "budget": budget,
                        "connectivity": conn,
                        "n": n_join,
                        "mean_overlap": "",
                        "mean_retention": "",
                        "mean_evidence_recall": bound,
                        "schema_version": RUNS_SCHEMA_VERSION,
                    }
                )

    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows
