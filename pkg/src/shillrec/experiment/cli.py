"""Command-line entry point: ``shillrec run|attack-only|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..metrics import EvalReport
from .config import ConfigError, expand_grid, load_config
from .runner import StageError, run, run_attack_only

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2

log = logging.getLogger("shillrec.cli")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shillrec",
                                description="Shilling-attack experiments on recommenders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train, attack and evaluate")
    r.add_argument("--config", required=True, action="append",
                   help="top-level YAML file; repeat to layer extra files")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="run every combination of the listed values")
    r.add_argument("--out", help="output directory (defaults to output_dir in the config)")
    r.add_argument("--cache", help="cache root (defaults to $SHILLREC_CACHE)")

    a = sub.add_parser("attack-only", help="emit the attacked training set")
    a.add_argument("--config", required=True, action="append")
    a.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--out")
    a.add_argument("--cache")

    rep = sub.add_parser("report", help="re-render tables from report.json files")
    rep.add_argument("--dir", required=True, help="run directory or a directory of runs")
    return p


def _cmd_run(args) -> int:
    status = EXIT_OK
    for cell in expand_grid(args.grid):
        try:
            cfg = load_config(args.config, [*args.overrides, *cell])
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            art = run(cfg, args.out, cache_root=args.cache)
        except StageError as exc:
            print(f"{cfg.run_name()}: {exc}", file=sys.stderr)
            status = EXIT_STAGE
            continue
        except OSError as exc:
            print(f"{cfg.run_name()}: {exc}", file=sys.stderr)
            return EXIT_STAGE
        print(f"== {cfg.run_name()}  ({art.run_dir})")
        print(art.report.to_table(), end="")
    return status


def _cmd_attack_only(args) -> int:
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        path = run_attack_only(cfg, args.out, cache_root=args.cache)
    except (StageError, OSError) as exc:
        print(f"{cfg.run_name()}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(path)
    return EXIT_OK


def _cmd_report(args) -> int:
    root = Path(args.dir)
    reports = [root / "report.json"] if (root / "report.json").is_file() else sorted(
        root.glob("*/report.json"))
    if not reports:
        print(f"no report.json under {root}", file=sys.stderr)
        return EXIT_CONFIG
    for path in reports:
        rep = EvalReport.from_json(path.read_text())
        table = rep.to_table()
        (path.parent / "report.txt").write_text(table)
        print(f"== {path.parent.name}")
        print(table, end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "attack-only": _cmd_attack_only, "report": _cmd_report}
    return handler[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
