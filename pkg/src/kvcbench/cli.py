"""Command-line entry point wiring the workbench into reproducible runs.

Seven subcommands cover the full loop: ``corpusgen`` writes a bundle,
``compress`` builds a reusable cache, ``ask`` answers from it, ``rag``
retrieves (and optionally answers), ``eval`` drives the method x budget x
connectivity grid from an INI config, ``ttft`` sweeps first-token latency,
and ``report`` aggregates run records.

Paths are resolved against ``--out`` where a command has one, and every
relative path is anchored at the ``KVC_OUT`` environment variable when set
(current directory otherwise). Exit codes: 0 success, 2 usage or config
error, 3 missing artifact, 4 stale or structurally incompatible artifact.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cachefile import load_cache, save_cache
from .compress import (
    CompressionBudget,
    answer_with_cache,
    compress_iterative,
)
from .corpusgen import (
    MAX_CONNECTIVITY,
    CorpusSpec,
    generate_corpus,
    load_bundle,
    save_bundle,
)
from .errors import (
    FormatError,
    KvcError,
    MalformedSequenceError,
    MissingArtifactError,
    PositionOverflowError,
    StaleCacheError,
    UsageError,
)
from .evalharness import (
    METHODS,
    GenerationParams,
    default_eval_config,
    emit_report,
    load_records,
    make_guidance,
    measure_ttft,
    question_prompt,
    run_suite,
    select_fewshot,
    ttft_reference_config,
    write_ttft_csv,
)
from .modelcore import Model, ModelConfig, init_random_model
from .retrieval import (
    assemble_context,
    index_chunks,
    load_index,
    retrieve,
    save_index,
    vocab_hash,
)
from .vocab import detokenize, tokenize
from .weights import load_weights

log = logging.getLogger(__name__)

TTFT_DEFAULT_SIZES = "16384,32768,65536,131072"


def _out_root() -> Path:
    return Path(os.environ.get("KVC_OUT", "."))


def _resolve(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _out_root() / p


def _csv_ints(text: str, flag: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag} must not be empty")
    return values


def _load_model_from_weights(weights_path: Path) -> Model:
    """KVCW weights with a JSON config sidecar at <weights>.json."""
    sidecar = weights_path.with_suffix(weights_path.suffix + ".json")
    if not weights_path.exists():
        raise MissingArtifactError(f"weight container not found: {weights_path}")
    if not sidecar.exists():
        raise MissingArtifactError(f"model config sidecar not found: {sidecar}")
    try:
        config = ModelConfig(**json.loads(sidecar.read_text()))
    except TypeError as exc:
        raise FormatError(f"bad model config in {sidecar}: {exc}") from None
    return load_weights(weights_path, config)


def _resolve_model(args, vocab_size: int) -> Model:
    if getattr(args, "weights", None):
        return _load_model_from_weights(_resolve(args.weights))
    return init_random_model(default_eval_config(vocab_size), args.model_seed)


def _add_model_args(sub) -> None:
    sub.add_argument("--model-seed", type=int, default=0,
                     help="seed for the deterministic random model (default %(default)s)")
    sub.add_argument("--weights", default=None,
                     help="KVCW weight file with a <file>.json config sidecar (overrides --model-seed)")


# --- corpusgen ----------------------------------------------------------------

def cmd_corpusgen(args) -> int:
    spec = CorpusSpec(
        seed=args.seed,
        connectivity=args.connectivity,
        n_people=args.people,
        n_projects=args.projects,
        n_filler=args.filler,
        chunk_tokens=args.chunk_tokens,
        questions_per_kind=args.questions_per_kind,
        name_style=args.name_style,
    )
    bundle = generate_corpus(spec)
    out = _resolve(args.out)
    save_bundle(bundle, out)
    direct = sum(1 for q in bundle.questions if q.kind == "direct")
    join = len(bundle.questions) - direct
    print(f"wrote {spec.n_chunks} chunks x {spec.chunk_tokens} tokens = {spec.n_tokens} tokens")
    print(f"questions: {direct} direct + {join} join (connectivity {spec.connectivity})")
    print(f"bundle: {out}")
    return 0


# --- compress -----------------------------------------------------------------

def _guidance_from_args(bundle, mode: str, n_examples: int, query: str | None) -> GuidancePrompt:
    if mode == "zs":
        return make_guidance("zs", [])
    examples = select_fewshot(bundle, n_examples)
    if mode == "fs":
        return make_guidance("fs", examples)
    if not (query and query.strip()):
        raise UsageError("--mode fsq requires --query")
    return make_guidance("fsq", examples, query=query)


def cmd_compress(args) -> int:
    bundle = load_bundle(_resolve(args.bundle))
    model = _resolve_model(args, len(bundle.vocab.id_to_token))
    guidance = _guidance_from_args(bundle, args.mode, args.examples, args.query)
    corpus = bundle.corpus_tokens()
    t0 = time.perf_counter()
    compressed = compress_iterative(
        model, corpus, guidance, bundle.vocab,
        CompressionBudget(args.budget, args.schedule), s=args.segments,
    )
    dt = time.perf_counter() - t0
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(compressed, out)
    n = compressed.meta.n_context
    print(f"compressed {n} -> {compressed.n_kept} rows/layer "
          f"({n / compressed.n_kept:.1f}x) in {dt:.2f}s ({args.mode}, s={args.segments})")
    print(f"cache: {out}")
    return 0


# --- ask ----------------------------------------------------------------------

def cmd_ask(args) -> int:
    if not args.question.strip():
        raise UsageError("question must be nonempty")
    bundle = load_bundle(_resolve(args.bundle))
    model = _resolve_model(args, len(bundle.vocab.id_to_token))
    compressed = load_cache(_resolve(args.cache), model=model)
    prompt = question_prompt(args.question, bundle.vocab)
    t0 = time.perf_counter()
    answer = answer_with_cache(
        model, compressed, prompt, GenerationParams(max_new_tokens=args.max_new)
    )
    dt = time.perf_counter() - t0
    print(f"answer: {detokenize(answer, bundle.vocab)}")
    print(f"timing: compress 0.000s (cache loaded), answer {dt:.3f}s")
    return 0


# --- rag ----------------------------------------------------------------------

def cmd_rag(args) -> int:
    if not args.question.strip():
        raise UsageError("question must be nonempty")
    bundle = load_bundle(_resolve(args.bundle))
    if args.index:
        index_path = _resolve(args.index)
        if index_path.exists():
            index = load_index(index_path)
            if index.vocab_sha != vocab_hash(bundle.vocab):
                raise StaleCacheError(f"index {index_path} was built for a different vocabulary")
        else:
            index = index_chunks(bundle)
            save_index(index, index_path)
    else:
        index = index_chunks(bundle)

    query = tokenize(args.question, bundle.vocab)
    result = retrieve(index, query, top_b=len(bundle.chunks))
    if result.no_known_terms:
        print("note: query shares no terms with the corpus; ranking is chunk-id order")
    width = bundle.spec.chunk_tokens
    n_fit = min(args.budget // width, len(result.ranking))
    for rank, cid in enumerate(result.ranking[: max(args.top, n_fit)]):
        marker = "*" if rank < n_fit else " "
        print(f"{marker} rank {rank:2d}  chunk {cid:4d}  score {result.scores[rank]:.4f}  {bundle.chunks[cid].kind}")
    if args.answer:
        model = _resolve_model(args, len(bundle.vocab.id_to_token))
        context = assemble_context(bundle, result, args.budget)
        from .evalharness import answer_with_context

        answer = answer_with_context(
            model, context, question_prompt(args.question, bundle.vocab),
            GenerationParams(max_new_tokens=args.max_new),
        )
        print(f"answer: {detokenize(answer, bundle.vocab)}")
    return 0


# --- eval ---------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    model_seed: int
    weights: str | None
    corpus_seeds: tuple[int, ...]
    connectivity: tuple[int, ...]
    n_people: int
    n_projects: int
    n_filler: int
    chunk_tokens: int
    questions_per_kind: int
    name_style: str
    methods: tuple[str, ...]
    budgets: tuple[int, ...]
    fewshot: int
    segments: int
    max_new: int
    out_dir: str


_CONFIG_SCHEMA = {
    "model": {"seed", "weights"},
    "corpus": {
        "seeds", "connectivity", "people", "projects", "filler",
        "chunk_tokens", "questions_per_kind", "name_style",
    },
    "eval": {"methods", "budgets", "fewshot", "segments", "max_new"},
    "out": {"dir"},
}


def parse_eval_config(path: Path) -> RunConfig:
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None

    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise UsageError(f"{path}: unknown config section [{section}]")
        for key in parser[section]:
            if key not in _CONFIG_SCHEMA[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback) if parser.has_section(section) else fallback

    try:
        methods = tuple(m.strip() for m in get("eval", "methods", "rag,kvc_fs").split(",") if m.strip())
        for m in methods:
            if m not in METHODS:
                raise UsageError(f"{path}: unknown method {m!r} (choose from {METHODS})")
        config = RunConfig(
            model_seed=int(get("model", "seed", "0")),
            weights=get("model", "weights"),
            corpus_seeds=tuple(_csv_ints(get("corpus", "seeds", "1"), "corpus.seeds")),
            connectivity=tuple(_csv_ints(get("corpus", "connectivity", "2"), "corpus.connectivity")),
            n_people=int(get("corpus", "people", "32")),
            n_projects=int(get("corpus", "projects", "32")),
            n_filler=int(get("corpus", "filler", "32")),
            chunk_tokens=int(get("corpus", "chunk_tokens", "256")),
            questions_per_kind=int(get("corpus", "questions_per_kind", "25")),
            name_style=get("corpus", "name_style", "distinct"),
            methods=methods,
            budgets=tuple(_csv_ints(get("eval", "budgets", "512,1024,2048,4096"), "eval.budgets")),
            fewshot=int(get("eval", "fewshot", "3")),
            segments=int(get("eval", "segments", "2")),
            max_new=int(get("eval", "max_new", "12")),
            out_dir=get("out", "dir", "results"),
        )
    except ValueError as exc:
        raise UsageError(f"{path}: bad value: {exc}") from None
    if config.weights and not _resolve(config.weights).exists():
        raise MissingArtifactError(f"config references missing weights: {config.weights}")
    return config


def cmd_eval(args) -> int:
    config = parse_eval_config(_resolve(args.config))
    out_dir = _resolve(config.out_dir)
    runs_dir = out_dir / "runs"
    report_dir = out_dir / "report"
    runs_dir.mkdir(parents=True, exist_ok=True)
    report_dir.mkdir(parents=True, exist_ok=True)

    n_failed = 0
    for seed in config.corpus_seeds:
        seed_records = []
        for conn in config.connectivity:
            spec = CorpusSpec(
                seed=seed,
                connectivity=conn,
                n_people=config.n_people,
                n_projects=config.n_projects,
                n_filler=config.n_filler,
                chunk_tokens=config.chunk_tokens,
                questions_per_kind=config.questions_per_kind,
                name_style=config.name_style,
            )
            bundle = generate_corpus(spec)
            if config.weights:
                model = _load_model_from_weights(_resolve(config.weights))
            else:
                model = init_random_model(
                    default_eval_config(len(bundle.vocab.id_to_token)), config.model_seed
                )
            runs_path = runs_dir / f"s{seed}c{conn}.jsonl"
            if not args.resume and runs_path.exists():
                runs_path.unlink()
            records = run_suite(
                model, bundle,
                methods=config.methods,
                budgets=config.budgets,
                out_path=runs_path,
                s=config.segments,
                n_fewshot=config.fewshot,
                params=GenerationParams(max_new_tokens=config.max_new),
            )
            n_failed += sum(1 for r in records if r.error)
            seed_records.extend(records)
            print(f"seed {seed} connectivity {conn}: {len(records)} records -> {runs_path}")
        report_path = report_dir / f"report-s{seed}.csv"
        emit_report(seed_records, report_path, chunk_tokens=config.chunk_tokens)
        print(f"report: {report_path}")
    if n_failed:
        print(f"warning: {n_failed} cells failed (recorded with error text)", file=sys.stderr)
    return 0


# --- ttft ---------------------------------------------------------------------

def _ttft_bundle(n_tokens: int, seed: int):
    """A real bundle sized to exactly n_tokens by scaling people and filler."""
    n_chunks, rem = divmod(n_tokens, 256)
    if rem:
        raise UsageError(f"corpus size {n_tokens} is not a multiple of 256")
    n_people = min(32, n_chunks // 4)
    n_projects = min(32, n_chunks // 4)
    n_filler = n_chunks - 2 * n_people - n_projects
    if n_people < 1 or n_filler < 0:
        raise UsageError(f"corpus size {n_tokens} too small for a bundle")
    spec = CorpusSpec(
        seed=seed, connectivity=2, n_people=n_people, n_projects=n_projects,
        n_filler=n_filler, questions_per_kind=min(25, n_people),
    )
    return generate_corpus(spec)


def cmd_ttft(args) -> int:
    sizes = _csv_ints(args.sizes, "--sizes")
    records = []
    for size in sizes:
        bundle = _ttft_bundle(size, args.seed)
        vocab_size = len(bundle.vocab.id_to_token)
        if args.weights:
            model = _load_model_from_weights(_resolve(args.weights))
        else:
            model = init_random_model(ttft_reference_config(vocab_size), args.model_seed)
        corpus = bundle.corpus_tokens()
        rng = np.random.default_rng(args.seed)
        question = rng.integers(4, vocab_size, size=args.question_tokens).tolist()

        index = index_chunks(bundle)
        guidance = make_guidance("zs", [])
        t0 = time.perf_counter()
        compressed = compress_iterative(
            model, corpus, guidance, bundle.vocab, CompressionBudget(args.budget), s=2
        )
        offline_s = time.perf_counter() - t0

        records.append(measure_ttft(model, "full", question, corpus=corpus, reps=args.reps))
        records.append(measure_ttft(
            model, "rag", question, bundle=bundle, index=index,
            budget=args.budget, reps=args.reps,
        ))
        records.append(measure_ttft(
            model, "kvc", question, compressed=compressed,
            budget=args.budget, reps=args.reps, offline_s=offline_s,
        ))
        for rec in records[-3:]:
            status = f"{rec.median_s:.4f}s median" if rec.feasible else "infeasible"
            print(f"corpus {size:7d}  {rec.scenario:4s}  {status}")
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ttft_csv(records, out)
    print(f"ttft table: {out}")
    return 0


# --- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    records = []
    for path in args.runs:
        p = _resolve(path)
        if not p.exists():
            raise MissingArtifactError(f"runs file not found: {p}")
        records.extend(load_records(p))
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = emit_report(records, out, chunk_tokens=args.chunk_tokens)
    print(f"{len(rows)} report rows from {len(records)} records -> {out}")
    return 0


# --- parser / dispatch ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvc",
        description="Task-aware KV-cache compression workbench: corpus generation, "
                    "compression, retrieval, evaluation, and latency measurement.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    subs = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = subs.add_parser("corpusgen", help="generate a synthetic corpus bundle")
    p.add_argument("--connectivity", type=int, required=True,
                   help=f"projects per person, 1..{MAX_CONNECTIVITY}")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default %(default)s)")
    p.add_argument("--out", required=True, help="bundle directory to write")
    p.add_argument("--people", type=int, default=32, help="number of people (default %(default)s)")
    p.add_argument("--projects", type=int, default=32, help="number of projects (default %(default)s)")
    p.add_argument("--filler", type=int, default=32, help="number of filler chunks (default %(default)s)")
    p.add_argument("--chunk-tokens", type=int, default=256, help="tokens per chunk (default %(default)s)")
    p.add_argument("--questions-per-kind", type=int, default=25,
                   help="direct and join questions each (default %(default)s)")
    p.add_argument("--name-style", choices=("distinct", "similar"), default="distinct",
                   help="person name style (default %(default)s)")
    p.set_defaults(func=cmd_corpusgen)

    p = subs.add_parser("compress", help="compress a bundle's corpus into a reusable cache")
    p.add_argument("--bundle", required=True, help="bundle directory from corpusgen")
    p.add_argument("--budget", type=int, required=True, help="kept rows per layer (k)")
    p.add_argument("--mode", choices=("zs", "fs", "fsq"), default="fs",
                   help="guidance strength (default %(default)s)")
    p.add_argument("--examples", type=int, default=3,
                   help="few-shot examples for fs/fsq; ignored by zs (default %(default)s)")
    p.add_argument("--query", default=None, help="live query text (fsq mode only)")
    p.add_argument("--segments", type=int, default=2,
                   help="iterative segment count s (default %(default)s)")
    p.add_argument("--schedule", choices=("proportional", "flat"), default="proportional",
                   help="budget ramp across segments (default %(default)s)")
    p.add_argument("--out", required=True, help="cache file to write (KVCC)")
    _add_model_args(p)
    p.set_defaults(func=cmd_compress)

    p = subs.add_parser("ask", help="answer a question from a compressed cache")
    p.add_argument("--cache", required=True, help="KVCC cache file from compress")
    p.add_argument("--bundle", required=True, help="bundle directory (vocabulary source)")
    p.add_argument("--question", required=True, help="question text")
    p.add_argument("--max-new", type=int, default=12,
                   help="maximum generated tokens (default %(default)s)")
    _add_model_args(p)
    p.set_defaults(func=cmd_ask)

    p = subs.add_parser("rag", help="retrieve chunks for a question, optionally answer")
    p.add_argument("--bundle", required=True, help="bundle directory from corpusgen")
    p.add_argument("--question", required=True, help="query text")
    p.add_argument("--budget", type=int, default=1024,
                   help="context token budget (default %(default)s)")
    p.add_argument("--top", type=int, default=8, help="ranks to display (default %(default)s)")
    p.add_argument("--index", default=None, help="KVCI index file to reuse (built when absent)")
    p.add_argument("--answer", action="store_true", help="also answer over the retrieved context")
    p.add_argument("--max-new", type=int, default=12,
                   help="maximum generated tokens (default %(default)s)")
    _add_model_args(p)
    p.set_defaults(func=cmd_rag)

    p = subs.add_parser("eval", help="run the method x budget x connectivity grid from a config")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--resume", action="store_true",
                   help="keep existing run records and fill in missing cells")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ttft", help="sweep time-to-first-token across corpus sizes")
    p.add_argument("--sizes", default=TTFT_DEFAULT_SIZES,
                   help="comma-separated corpus sizes (default %(default)s)")
    p.add_argument("--budget", type=int, default=8192,
                   help="rag/kvc context budget (default %(default)s)")
    p.add_argument("--question-tokens", type=int, default=512,
                   help="question length (default %(default)s)")
    p.add_argument("--reps", type=int, default=5,
                   help="timed repetitions after one warm-up (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="corpus/question seed (default %(default)s)")
    p.add_argument("--out", default="ttft.csv", help="output CSV (default %(default)s)")
    _add_model_args(p)
    p.set_defaults(func=cmd_ttft)

    p = subs.add_parser("report", help="aggregate run records into a summary CSV")
    p.add_argument("--runs", nargs="+", required=True, help="run JSONL files")
    p.add_argument("--out", default="report.csv", help="output CSV (default %(default)s)")
    p.add_argument("--chunk-tokens", type=int, default=256,
                   help="chunk width for the coverage bound (default %(default)s)")
    p.set_defaults(func=cmd_report)

    return parser


def _exit_code(exc: KvcError) -> int:
    if isinstance(exc, (UsageError, MalformedSequenceError, PositionOverflowError)):
        return 2
    if isinstance(exc, MissingArtifactError):
        return 3
    if isinstance(exc, (FormatError, StaleCacheError)):
        return 4
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except KvcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
