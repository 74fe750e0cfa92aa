"""Command line entry point: ``nfmc run|batch|rank|validate``."""

import argparse
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


def _cmd_run(args):
    cfg = harness.parse_config(args.config)
    if args.out:
        cfg = cfg.model_copy(update={"output": args.out})
    report = harness.run_experiment(cfg)
    if not cfg.output:
        print(harness.dumps_report(report))
    if report["status"] != "ok":
        print(f"run failed: {report['error']['type']}: {report['error']['message']}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_batch(args):
    root = Path(args.config_dir)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}", path="<config-dir>")
    paths = sorted(root.glob("*.json"))
    if not paths:
        raise ConfigError(f"no *.json configs in {root}", path="<config-dir>")
    out = Path(args.out) if args.out else root / "results.jsonl"
    summary = Path(args.summary) if args.summary else out.with_suffix(".csv")
    reports, failed = harness.run_batch(paths, out, summary, workers=args.workers)
    print(f"{len(reports) - failed}/{len(reports)} experiments succeeded; "
          f"reports in {out}, summary in {summary}")
    if failed == 0:
        return EXIT_OK
    return EXIT_PARTIAL if failed < len(reports) else EXIT_RUNTIME


def _cmd_rank(args):
    reports = harness.collect_reports(args.reports)
    if not reports:
        print(f"no reports match {args.reports}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = harness.rank_report(reports, grouping=args.group_by)
    harness.write_rank_csv(summary, args.out)
    print(f"ranked {len(summary['rows'])} method rows; "
          f"{len(summary['excluded'])} reports without b2 excluded")
    return EXIT_OK


def _cmd_validate(args):
    cfg = harness.parse_config(args.config)
    print(f"ok: {cfg.sampler.kind} on {cfg.target.family}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nfmc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    b = sub.add_parser("batch", help="run every *.json config in a directory")
    b.add_argument("--config-dir", required=True)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", help="JSONL report file (default <config-dir>/results.jsonl)")
    b.add_argument("--summary", help="summary CSV (default next to --out)")
    k = sub.add_parser("rank", help="standardized-rank table from report files")
    k.add_argument("--reports", required=True, help="glob of JSONL report files")
    k.add_argument("--out", required=True)
    k.add_argument("--group-by", choices=harness.GROUPINGS, default="global")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "batch": _cmd_batch, "rank": _cmd_rank,
               "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
