"""Command line: ``memunlearn run|report|validate-proxy|inspect``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SCHEMA_VERSION, ConfigError, load_config, parse_override

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("memunlearn")


def _overrides(args) -> dict:
    out = dict(parse_override(s) for s in args.set or [])
    if args.seed:
        out["seeds"] = [int(s) for s in args.seed.split(",") if s.strip()]
        out.pop("runs", None)
    return out


def cmd_run(args) -> int:
    from .orchestrate import run

    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.protocol == "proxy_validation":
        print("use `memunlearn validate-proxy` for proxy_validation configs", file=sys.stderr)
        return EXIT_CONFIG
    runlog, records = run(cfg, args.out)
    print(runlog.run_dir)
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        print(f"seed {r.seed} failed: {r.error.splitlines()[0]}", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_validate_proxy(args) -> int:
    from .orchestrate import run

    try:
        cfg = load_config(args.config, {**_overrides(args), "protocol": "proxy_validation"})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    runlog, table = run(cfg, args.out)
    print(table.to_markdown(), end="")
    print(runlog.run_dir / "proxy_fidelity.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import EmptySelection, ReportError, ReportSpec, build_report

    where = dict(parse_override(w) for w in args.where or [])
    try:
        spec = ReportSpec([Path(p) for p in args.runs], args.group_by.split(","), where,
                          args.format.split(","), Path(args.out) if args.out else None, args.level)
        paths = build_report(spec)
    except EmptySelection as exc:
        print(f"empty selection: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .store import CheckpointStore, IntegrityError

    root = Path(args.store)
    if not root.is_dir():
        print(f"no checkpoint store at {root}", file=sys.stderr)
        return EXIT_FAILURE
    store = CheckpointStore(root)
    try:
        entries = store.list()
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    bad = store.verify() if args.verify else []
    print(f"# schema_version: {SCHEMA_VERSION}")
    for e in entries:
        spec = e["model_spec"]
        cfg = e.get("train_config") or {}
        unl = (e.get("meta") or {}).get("unlearn_config")
        detail = f"method={unl['method']}" if unl else f"epochs={cfg.get('epochs')} seed={cfg.get('seed')}"
        print(f"{e['id']}  {e['lineage']:<10} {spec['architecture']:<18} parent={e.get('parent') or '-':<20} {detail}")
    for ckpt_id in bad:
        print(f"integrity error: {ckpt_id}", file=sys.stderr)
    return EXIT_FAILURE if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memunlearn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a single_shot, continual or ablation config")
    p.add_argument("config")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--seed", help="comma-separated seeds, replaces the config's list")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="top-level config override")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-proxy", help="Spearman rho of every proxy against memorization")
    p.add_argument("config")
    p.add_argument("--out", default="runs")
    p.add_argument("--seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_validate_proxy)

    p = sub.add_parser("report", help="mean ± CI tables and continual plots from run directories")
    p.add_argument("runs", nargs="+", help="run directories holding records.jsonl")
    p.add_argument("--group-by", default="method,rum,architecture,proxy,step")
    p.add_argument("--where", action="append", metavar="KEY=VALUE", help="keep records whose field equals VALUE")
    p.add_argument("--format", default="csv,markdown", help="any of csv,markdown,plot")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="list checkpoints in a store with lineage and config")
    p.add_argument("store")
    p.add_argument("--verify", action="store_true", help="re-hash every blob")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # top-level boundary: report and map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
