"""Command-line entry point: ``qtree ask|eval|sweep|index``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .core import ConfigError, EngineConfig, load_config, to_dot
from .engine import Engine
from .evaluation import (
    CSV_FIELDS,
    EvalRecord,
    MetricsReport,
    QAExample,
    aggregate,
    load_dataset,
    report_csv_row,
)
from .llm import LLM, BackendUnavailable, CompletionsClient, ScriptedLLM
from .retrieval import Corpus, RemoteRetriever, Retriever, ingest

log = logging.getLogger("qtree")


class CLIError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    corpus: str | None
    backend: dict[str, Any]
    dataset: str | None = None
    out_dir: str | None = None
    deterministic: bool = True
    extra: dict[str, Any] = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(
            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON engine config file")
    p.add_argument("--corpus", help="corpus JSONL or index snapshot (.json)")
    p.add_argument("--remote-retriever", help="URL of a remote retrieval endpoint")
    backend = p.add_mutually_exclusive_group()
    backend.add_argument("--backend-url", help="completions API root, e.g. http://host:8000/v1")
    backend.add_argument("--mock-script", help="JSON script for the deterministic mock backend")
    p.add_argument("--model", help="model name sent to the completions API")
    p.add_argument("--tau", type=float, help="answer confidence threshold")
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-branching", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--retrieval-cap", type=int)
    p.add_argument("--node-parallel", type=int, help="concurrent node expansions per question")
    p.add_argument("--out-dir", default="qtree-out")
    p.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="write zero timings so outputs are byte-stable (default: on with --mock-script)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtree", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", help="answer one question")
    ask.add_argument("question")
    ask.add_argument("--dot", action="store_true", help="also write tree.dot")
    _add_common(ask)

    ev = sub.add_parser("eval", help="evaluate on a JSONL dataset")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--parallel", type=int, default=1, help="questions evaluated concurrently")
    _add_common(ev)

    sw = sub.add_parser("sweep", help="evaluate over a grid of thresholds and depths")
    sw.add_argument("--dataset", required=True)
    sw.add_argument("--taus", required=True, help="comma-separated thresholds")
    sw.add_argument("--depths", required=True, help="comma-separated maximum depths")
    sw.add_argument("--parallel", type=int, default=1)
    _add_common(sw)

    ix = sub.add_parser("index", help="build an index snapshot from a corpus JSONL")
    ix.add_argument("--corpus", required=True)
    ix.add_argument("--out", required=True, help="snapshot path (.json)")
    return parser


# -- assembly ----------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> EngineConfig:
    cfg = load_config(args.config) if args.config else EngineConfig()
    return cfg.with_overrides(
        tau_a=args.tau,
        max_depth=args.max_depth,
        max_branching=args.max_branching,
        top_k=args.top_k,
        retrieval_cap=args.retrieval_cap,
        parallelism=args.node_parallel,
    )


def _check_path(path: str | None, what: str) -> None:
    if path is not None and not Path(path).exists():
        raise CLIError(f"{what} not found: {path}")


def make_backend(args: argparse.Namespace) -> tuple[LLM, dict[str, Any]]:
    if args.mock_script:
        _check_path(args.mock_script, "mock script")
        return ScriptedLLM.from_file(args.mock_script), {"type": "mock", "script": args.mock_script}
    client = CompletionsClient.from_env(args.backend_url, args.model)
    return client, {"type": "wire", "url": client.base_url, "model": client.model}


def make_retriever(args: argparse.Namespace) -> Retriever:
    corpus = None
    if args.corpus:
        _check_path(args.corpus, "corpus")
        corpus = ingest(args.corpus)
    if args.remote_retriever:
        return RemoteRetriever(args.remote_retriever, corpus)
    if corpus is None:
        raise CLIError("--corpus or --remote-retriever is required")
    return corpus


def _deterministic(args: argparse.Namespace) -> bool:
    return bool(args.mock_script) if args.deterministic is None else args.deterministic


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, cfg, backend, **kw) -> RunManifest:
    return RunManifest(
        command=args.command,
        config=cfg.to_dict(),
        corpus=args.corpus,
        backend=backend,
        out_dir=args.out_dir,
        deterministic=_deterministic(args),
        **kw,
    )


# -- evaluation loop -----------------------------------------------------------


def evaluate_one(engine: Engine, example: QAExample, deterministic: bool) -> EvalRecord:
    try:
        answer, tree = engine.run(example.question)
    except BackendUnavailable:
        raise
    except Exception as exc:  # per-example failure; the batch goes on
        log.warning("example %s failed: %s", example.id, exc)
        return EvalRecord(id=example.id, predicted="", error=f"{type(exc).__name__}: {exc}")
    return EvalRecord(
        id=example.id,
        predicted=answer,
        retrieved_ids=list(tree.telemetry.retrieved),
        retrieval_calls=tree.retrieval_calls,
        wall_time=0.0 if deterministic else round(tree.wall_time, 6),
        tree=tree.to_dict(),
    )


def evaluate_dataset(
    engine: Engine,
    examples: Sequence[QAExample],
    parallel: int = 1,
    deterministic: bool = True,
    progress: bool = True,
) -> list[EvalRecord]:
    total = len(examples)

    def job(item: tuple[int, QAExample]) -> EvalRecord:
        i, ex = item
        record = evaluate_one(engine, ex, deterministic)
        if progress:
            print(f"[{i + 1}/{total}] {ex.id}", file=sys.stderr)
        return record

    if parallel <= 1:
        return [job(item) for item in enumerate(examples)]
    with ThreadPoolExecutor(parallel) as pool:
        return list(pool.map(job, enumerate(examples)))


def mean_tree_depth(records: Sequence[EvalRecord]) -> float:
    depths = [max(n["depth"] for n in r.tree["nodes"]) for r in records if r.tree]
    return sum(depths) / len(depths) if depths else 0.0


def write_records(path: Path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def write_report(out: Path, report: MetricsReport) -> None:
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerow(report_csv_row(report))
    (out / "report.csv").write_text(buf.getvalue(), encoding="utf-8")


def _load_examples(args, retriever: Retriever) -> list[QAExample]:
    _check_path(args.dataset, "dataset")
    examples = load_dataset(args.dataset)
    if isinstance(retriever, Corpus):
        for ex in examples:
            missing = [d for d in ex.gold_doc_ids if d not in retriever]
            if missing:
                log.warning("example %s: gold docs not in corpus: %s", ex.id, missing)
    return examples


# -- subcommands -------------------------------------------------------------------


def cmd_ask(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    retriever = make_retriever(args)
    llm, backend = make_backend(args)
    out = _out_dir(args)
    _manifest(args, cfg, backend, extra={"question": args.question}).write(out)
    answer, tree = Engine(cfg, llm, retriever).run(args.question)
    (out / "tree.json").write_text(tree.to_json() + "\n", encoding="utf-8")
    if args.dot:
        (out / "tree.dot").write_text(to_dot(tree), encoding="utf-8")
    print(answer)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    retriever = make_retriever(args)
    examples = _load_examples(args, retriever)
    llm, backend = make_backend(args)
    out = _out_dir(args)
    det = _deterministic(args)
    _manifest(args, cfg, backend, dataset=args.dataset, extra={"parallel": args.parallel}).write(out)
    records = evaluate_dataset(Engine(cfg, llm, retriever), examples, args.parallel, det)
    report = aggregate(records, examples)
    write_records(out / "records.jsonl", records)
    write_report(out, report)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _parse_list(text: str, kind) -> list:
    try:
        values = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CLIError(f"bad list {text!r}: {exc}") from exc
    if not values:
        raise CLIError(f"empty list {text!r}")
    return values


SWEEP_FIELDS = ("tau", "max_depth", "n", "em", "f1", "efr", "rn", "mean_depth")


def sweep_grid(taus: Sequence[float], depths: Sequence[int]) -> list[tuple[float, int]]:
    grid: list[tuple[float, int]] = []
    for tau in taus:
        for depth in depths:
            if (tau, depth) not in grid:
                grid.append((tau, depth))
    return grid


def cmd_sweep(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    grid = sweep_grid(_parse_list(args.taus, float), _parse_list(args.depths, int))
    retriever = make_retriever(args)
    examples = _load_examples(args, retriever)
    llm, backend = make_backend(args)
    out = _out_dir(args)
    det = _deterministic(args)
    _manifest(
        args, base, backend, dataset=args.dataset,
        extra={"grid": [list(g) for g in grid], "parallel": args.parallel},
    ).write(out)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    writer.writeheader()
    for tau, depth in grid:
        cfg = base.with_overrides(tau_a=tau, max_depth=depth)
        records = evaluate_dataset(Engine(cfg, llm, retriever), examples, args.parallel, det)
        report = aggregate(records, examples)
        writer.writerow(
            {
                "tau": tau,
                "max_depth": depth,
                "n": report.n,
                "em": report.em,
                "f1": report.f1,
                "efr": "" if report.efr is None else report.efr,
                "rn": report.rn,
                "mean_depth": mean_tree_depth(records),
            }
        )
    (out / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    _check_path(args.corpus, "corpus")
    start = time.perf_counter()
    corpus = ingest(args.corpus)
    corpus.save(args.out)
    log.info("indexed %d documents in %.2fs", len(corpus), time.perf_counter() - start)
    print(f"{len(corpus)} documents, {len(corpus.postings)} terms -> {args.out}")
    return 0


COMMANDS = {"ask": cmd_ask, "eval": cmd_eval, "sweep": cmd_sweep, "index": cmd_index}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (CLIError, ConfigError, BackendUnavailable) as exc:
        print(f"qtree: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"qtree: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
