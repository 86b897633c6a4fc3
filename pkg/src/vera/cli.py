"""``vera`` command line: ingest, ask, eval, report, cassette."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import yaml

from .errors import IndexConfigMismatchError, VeraError
from .gateway import Cassette
from .metrics import fmt_cell
from .pipeline import QueryCase, Vera
from .prompts import TemplateSet
from .retriever import VectorIndex, load_corpus
from .runner import RunConfig, dump_json, make_embedder, make_gateway, open_index, rerender_report, run_eval

logger = logging.getLogger("vera")


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = dict(args.set or [])
    for flag in ("chunk_size", "overlap", "top_k", "mode", "worker_count", "seed", "sample_size",
                 "cassette_path", "cassette_mode", "template_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return RunConfig.load(args.config, overrides)


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _load_config(args)
    index_path = Path(args.index)
    embedder = make_embedder(config.embedder)
    if index_path.exists():
        # raises IndexConfigMismatchError when the existing index was built differently
        VectorIndex.load(index_path, embedder, config.chunk_size, config.overlap)
    docs = load_corpus(args.corpus)
    index = VectorIndex(embedder, config.chunk_size, config.overlap)
    n_chunks = index.add_documents(docs)
    index.save(index_path)
    print(f"documents: {len(docs)}")
    print(f"chunks: {n_chunks}")
    print(f"index: {index_path} (config {index.config.fingerprint()})")
    return 0


def cmd_ask(args: argparse.Namespace) -> int:
    config = _load_config(args)
    index = open_index(args.index, config) if args.index else None
    templates = TemplateSet.load(config.template_dir)
    gateway = make_gateway(config)
    vera = Vera(gateway, config.generator_profile, config.evaluator_profile, templates, index, config.top_k, audit=config.audit)
    mode = "without_vera" if config.mode == "without_vera" else "with_vera"
    try:
        result = vera.run_pipeline(QueryCase(args.query_id, args.question), mode)
    finally:
        if config.cassette_mode == "record":
            gateway.cassette.save(config.cassette_path)
    m = result.metrics
    print(f"retrieval: {'used' if result.retrieval_used else 'skipped'}")
    print(f"context_relevance: {fmt_cell(m.context_relevance)}")
    print(f"response_relevance: {fmt_cell(m.response_relevance)}")
    print(f"response_adherence: {fmt_cell(m.response_adherence)}")
    if result.halted:
        print(f"halted: {result.halt_reason}")
    print(f"final_response: {result.final_response}")
    if args.trace_out:
        Path(args.trace_out).write_text(dump_json(result.to_dict()), encoding="utf-8")
    if result.failed:
        print(f"error: stage {result.error_stage} failed", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    outcome = run_eval(config, args.dataset, args.kind, args.out)
    for mode, row in outcome.report.rows.items():
        cells = ", ".join(f"{k}={fmt_cell(v, row.counts[k])}" for k, v in row.means.items())
        print(f"{mode}: {row.queries} queries, {row.failed} failed; {cells}")
    print(f"reused traces: {outcome.reused}")
    for p in outcome.written:
        print(f"wrote {p}")
    return outcome.exit_code


def cmd_report(args: argparse.Namespace) -> int:
    report = rerender_report(args.out, args.formats)
    print(f"re-rendered report for {report.dataset_name} / {report.model_name} in {args.out}")
    return 0


def cmd_cassette(args: argparse.Namespace) -> int:
    cassette = Cassette.load(args.path)
    counts = Counter(e.fingerprint for e in cassette.entries)
    if args.action == "inspect":
        print(f"entries: {len(cassette)}")
        print(f"distinct fingerprints: {len(counts)}")
        for fp, n in counts.most_common():
            first = next(e for e in cassette.entries if e.fingerprint == fp)
            preview = first.exchange.request[-1][1].replace("\n", " ")[:60]
            print(f"{fp[:16]}  x{n}  {preview}")
        return 0
    seen: Counter = Counter()
    kept = []
    for e in cassette.entries:
        seen[e.fingerprint] += 1
        if seen[e.fingerprint] <= args.max_duplicates:
            kept.append(e)
    out = args.output or args.path
    Cassette(kept).save(out)
    print(f"kept {len(kept)} of {len(cassette)} entries -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vera", description="Validate and enhance RAG context and responses.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config (YAML or JSON)")
        p.add_argument("--set", action="append", type=_parse_override, metavar="KEY=VALUE",
                       help="override a config key (dotted keys allowed), repeatable")
        p.add_argument("--chunk-size", dest="chunk_size", type=int, help="tokens per chunk (default 512)")
        p.add_argument("--overlap", type=int, help="chunk overlap in tokens (default 25)")
        p.add_argument("--top-k", dest="top_k", type=int, help="chunks retrieved per query (default 4)")
        p.add_argument("--cassette", dest="cassette_path", help="cassette file (JSON lines)")
        p.add_argument("--cassette-mode", dest="cassette_mode", choices=["off", "record", "replay"])
        p.add_argument("--template-dir", dest="template_dir", help="directory of <stage>.yaml templates")

    p = sub.add_parser("ingest", help="chunk, embed and persist a corpus")
    add_config(p)
    p.add_argument("--corpus", required=True, help=".jsonl of {doc_id, title, body} or a plain-text file")
    p.add_argument("--index", required=True, help="index file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("ask", help="answer one question and print scores")
    add_config(p)
    p.add_argument("question")
    p.add_argument("--index", help="index built by `vera ingest`")
    p.add_argument("--query-id", default="q0")
    p.add_argument("--mode", choices=["with_vera", "without_vera"])
    p.add_argument("--trace-out", help="write the full result JSON here")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("eval", help="evaluate a dataset and write report files")
    add_config(p)
    p.add_argument("dataset")
    p.add_argument("--kind", required=True, choices=["squad2", "drop", "doc_qa"])
    p.add_argument("--out", required=True, help="output directory (report.*, traces/)")
    p.add_argument("--mode", choices=["with_vera", "without_vera", "both"])
    p.add_argument("--workers", dest="worker_count", type=int)
    p.add_argument("--sample", dest="sample_size", type=int, help="seeded subsample size")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-render report files from recorded traces")
    p.add_argument("--out", required=True)
    p.add_argument("--formats", nargs="+", default=["json", "markdown", "csv"])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cassette", help="inspect or trim a cassette file")
    p.add_argument("action", choices=["inspect", "trim"])
    p.add_argument("path")
    p.add_argument("--max-duplicates", type=int, default=1, help="trim: entries kept per fingerprint")
    p.add_argument("--output", help="trim: write here instead of in place")
    p.set_defaults(func=cmd_cassette)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IndexConfigMismatchError as exc:
        print(f"error: refusing to reuse index: {exc}", file=sys.stderr)
        return 2
    except (VeraError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
