"""Command-line entry point.

    cito run --config scm.toml --out results/
    cito sweep --config grid.toml --out results/
    cito replay --decision results/VSCM_phi0.110/decision.json --out replayed/
    cito check

Exit status: 0 on success, 1 when a cell (or check) fails, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import harness
from .config import ConfigError, default_sweep, load, load_sweep

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 as well; keep the usage text
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cito", description="Contact-implicit pushing benchmarks on a planar arm.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="solve a single scenario")
    run.add_argument("--config", required=True, help="scenario TOML file")
    run.add_argument("--out", default="results", help="output directory (default: results)")

    sweep = sub.add_parser("sweep", help="solve a model x distance grid")
    sweep.add_argument("--config", help="sweep TOML file (default: all models at 0.11, 0.17, 0.30 m)")
    sweep.add_argument("--out", default="results", help="output directory (default: results)")
    sweep.add_argument("--workers", type=int, help="parallel cells (overrides the file)")

    replay = sub.add_parser("replay", help="re-simulate a saved decision vector")
    replay.add_argument("--decision", required=True, help="decision.json written by run or sweep")
    replay.add_argument("--out", default="replay", help="output directory (default: replay)")

    check = sub.add_parser("check", help="run the oracle and property checks")
    check.add_argument("--out", help="write check_report.json to this directory")
    return parser


def _print_rows(rows) -> None:
    print("model  phi0   inaccuracy[N s]  pos_err[m]   yaw_err[rad]  status")
    for r in rows:
        print(
            f"{r.model:<6} {r.phi0:<6.3f} {r.physical_inaccuracy:<16.6g} {r.final_position_error:<12.6g} "
            f"{r.final_orientation_error:<13.6g} {r.status}"
        )


def _run(args) -> int:
    config = load(args.config)
    out = Path(args.out)
    report, _ = harness.run_scenario(config, out)
    _print_rows([report.metrics])
    print(f"wrote {out / 'report.json'} and {out / 'trajectory.csv'}")
    return EXIT_OK


def _sweep(args) -> int:
    sweep = load_sweep(args.config) if args.config else default_sweep()
    workers = sweep.workers if args.workers is None else args.workers
    if workers < 1:
        raise ConfigError("--workers must be positive")
    rows = harness.compare_models(sweep.cells, args.out, workers)
    _print_rows(rows)
    print(f"wrote {Path(args.out) / 'metrics.csv'}")
    return EXIT_FAILURE if any(harness.cell_failed(r) for r in rows) else EXIT_OK


def _replay(args) -> int:
    path = Path(args.decision)
    try:
        _, metrics, _ = harness.replay_file(path, args.out)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot replay: {exc}", str(path)) from None
    _print_rows([metrics])
    report = path.with_name("report.json")
    if report.exists():
        saved = harness.MetricsRow(**json.loads(report.read_text(encoding="utf-8"))["metrics"])
        if not saved.same_result(metrics):
            print("replayed metrics differ from the saved report", file=sys.stderr)
            return EXIT_FAILURE
        print("replay matches the saved metrics")
    return EXIT_OK


def _check(args) -> int:
    from .verification import run_checks

    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    if args.out:
        out = Path(args.out)
        harness.atomic_write(
            out / "check_report.json",
            json.dumps([r.as_dict() for r in results], indent=2) + "\n",
        )
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "sweep": _sweep, "replay": _replay, "check": _check}[args.command]
    try:
        return handler(args)
    except (ConfigError, harness.UnreachableDistance) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
