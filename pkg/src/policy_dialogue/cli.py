"""Command line entry point: run, evaluate, report, validate, ingest."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .harness import evaluate_dir, report_dir, run_grid
from .knowledge import EmbeddingCache
from .scenario import Scenario, ScenarioFileError, load_scenario

log = logging.getLogger("policy_dialogue")


def _load_all(specs: list[str]) -> list[Scenario]:
    scenarios, problems = [], []
    for spec in specs:
        try:
            sc = load_scenario(spec)
        except ScenarioFileError as exc:
            problems.extend(f"{spec}: {v}" for v in exc.violations)
            continue
        problems.extend(f"{spec}: {v}" for v in sc.violations())
        scenarios.append(sc)
    if problems:
        raise ScenarioFileError(problems)
    return scenarios


def cmd_validate(args: argparse.Namespace) -> int:
    _load_all(args.scenario)
    for spec in args.scenario:
        print(f"{spec}: ok")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    for sc in _load_all(args.scenario):
        registry = sc.registry(args.stub)
        cache = EmbeddingCache(Path(args.out) / "cache")
        kb = sc.knowledge(registry, cache)
        for cid, index in sorted(kb.indexes.items()):
            print(f"{sc.name}/{cid}: {len(index)} chunks")
        for w in kb.warnings:
            print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    scenarios = _load_all(args.scenario)
    if args.rounds is not None:
        scenarios = [replace(sc, rounds=args.rounds) for sc in scenarios]
    t0 = time.perf_counter()
    manifest = run_grid(
        scenarios,
        args.out,
        runs=args.runs,
        seed=args.seed,
        rules=args.rules.split(",") if args.rules else None,
        grid=args.grid,
        masks=args.mask,
        queries=args.queries.split(",") if args.queries else None,
        force_stub=args.stub,
        workers=args.workers,
        judge_backend=args.judge_backend,
        embed_backend=args.embed_backend,
    )
    n = len(manifest["cells"])
    print(f"{n - manifest['failed']}/{n} runs ok in {time.perf_counter() - t0:.1f}s -> {args.out}")
    if args.evaluate:
        evaluate_dir(args.out, judge_backend=args.judge_backend, embed_backend=args.embed_backend)
        paths = report_dir(args.out)
        print(f"report: {paths['report']}")
    return 1 if manifest["failed"] else 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    path = evaluate_dir(
        args.out,
        force_stub=True if args.stub else None,
        judge_backend=args.judge_backend,
        embed_backend=args.embed_backend,
    )
    print(f"metrics: {path}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    paths = report_dir(args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policy-dialogue", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, scenario: bool = True) -> None:
        if scenario:
            p.add_argument(
                "--scenario", action="append", required=True,
                help="scenario YAML path or builtin:land / builtin:education (repeatable)",
            )
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--stub", action="store_true", help="force stub backends")
        p.add_argument("--judge-backend", default=None)
        p.add_argument("--embed-backend", default=None)

    p = sub.add_parser("run", help="execute a scenario or grid and write transcripts")
    common(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--rules", help="comma list, e.g. none,light,struct or light:3")
    p.add_argument("--grid", help="weight axes, e.g. 'D=0.5,1.5;T=1.5'")
    p.add_argument("--mask", help="kept prompt blocks, e.g. 'TMD,DT,none' or 'all'")
    p.add_argument("--queries", help="comma list of query ids (default: all)")
    p.add_argument("--rounds", type=int, default=None, help="override rounds per dialogue")
    p.add_argument("--evaluate", action="store_true", help="also compute metrics and reports")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="compute metrics from transcripts")
    common(p, scenario=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate metrics into table and round-series CSVs")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check scenario files")
    p.add_argument("--scenario", action="append", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("ingest", help="chunk and embed corpora into the cache")
    common(p)
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioFileError as exc:
        print("invalid scenario:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
