"""Command-line interface: ``actordb <command> ...`` (or ``python -m actordb``).

Exit codes: 0 success, 1 usage or runtime error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

from . import bench
from . import smartmart as sm
from .config import load_config
from .errors import ActorDBError
from .security import (CallFrame, apply_script, format_script, parse_admin_script,
                       stats_to_json, verify)

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2


def _parse_range(text: str) -> list[int]:
    """``"1-8"`` or ``"1,2,4,8"`` -> list of ints."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return out


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--paper-scale", dest="full_scale", action="store_true",
                   help="10000 items/section, 300 history rows/item, k=150, 20 x 2 s epochs")
    p.add_argument("--mode", choices=("sync", "async"))
    p.add_argument("--workers", type=int)
    p.add_argument("--sections", type=int, dest="sections_per_order",
                   help="store sections per order")
    p.add_argument("--items-per-section", type=int, dest="items_per_section_order",
                   help="items per section per order")
    p.add_argument("--epochs", type=int)
    p.add_argument("--epoch-seconds", type=float)
    p.add_argument("--seed", type=int)


def _workload_config(args, **extra) -> bench.BenchmarkConfig:
    keys = ("mode", "workers", "sections_per_order", "items_per_section_order", "epochs",
            "epoch_seconds", "seed")
    overrides = {k: getattr(args, k, None) for k in keys}
    overrides.update(extra)
    if overrides.get("workers") is not None:
        # one cart per worker unless the config asks for more
        base = load_config(args.config, args.full_scale)
        overrides["carts"] = max(overrides["workers"], base.carts)
    return load_config(args.config, args.full_scale, **overrides)


def _print_summary(report: bench.Report, out=None) -> None:
    out = out or sys.stderr
    print(f"throughput {report.throughput_mean:.1f} +- {report.throughput_std:.1f} interactions/s, "
          f"latency {report.latency_mean_us / 1000:.2f} +- {report.latency_std_us / 1000:.2f} ms, "
          f"aborts {report.abort_rate_pct:.2f}% over {len(report.epochs)} epochs", file=out)
    for w in report.warnings:
        print(f"warning: {w}", file=out)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_load(args) -> int:
    cfg = load_config(args.config, args.full_scale)
    t0 = time.perf_counter()
    engine, store = bench.build_engine(cfg)
    took = time.perf_counter() - t0
    counts: dict[tuple[str, str], int] = {}
    for (addr, rel), rows in engine.snapshot().items():
        key = (addr.type_name, rel)
        counts[key] = counts.get(key, 0) + len(rows)
    engine.close()
    print(f"loaded {len(engine.list_actors())} actors in {took:.2f} s")
    for (type_name, rel), n in sorted(counts.items()):
        print(f"  {type_name}.{rel}: {n} rows")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _workload_config(args, verify=args.verify or None)
    report = bench.run_benchmark(cfg)
    text = bench.emit_report(report, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)
    _print_summary(report)
    if report.audit is not None and not report.audit["ok"]:
        print(f"verification failed: {report.audit}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _workload_config(args)
    if args.param == "workers":
        cfg = bench.replace(cfg, carts=max(cfg.carts, max(args.values)))
    results = bench.sweep(cfg, args.param, args.values)
    text = bench.sweep_csv(args.param, results)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for v, r in results:
            bench.emit_report(r, "csv", out_dir / f"{args.param}-{v}.csv")
    return EXIT_OK


def cmd_admin(args) -> int:
    script = Path(args.script).read_text()
    commands = parse_admin_script(script)
    print(format_script(commands), end="")
    if args.config:
        engine, _ = bench.build_engine(load_config(args.config, False))
    else:
        # SmartMart types only, no actors: lifecycle scripts start from nothing
        from .engine import Engine
        engine = Engine()
        sm.register(engine)
    try:
        apply_script(engine, commands)
        print(f"-- applied {len(commands)} command(s); {len(engine.list_actors())} actors live")
        if engine.rules.restricted:
            denied = verify(engine.rules, sm.CALL_GRAPH)
            for ct, cm, tt, tm in denied:
                print(f"-- denied for unnamed actors: {ct}.{cm} -> {tt}.{tm}")
    finally:
        engine.close()
    return EXIT_OK


def cmd_recover(args) -> int:
    cfg = load_config(args.config, False)
    engine, _ = bench.build_engine(cfg)
    try:
        report = engine.recover(args.log)
        engine.wait_detached()
        print(json.dumps({"tids_replayed": report.tids_replayed,
                          "truncated_bytes": report.truncated_bytes,
                          "specs_restored": report.specs_restored,
                          "last_tid": report.last_tid}, sort_keys=True))
    finally:
        engine.close()
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    ok = True
    for result in run_all(quick=args.quick):
        print(result.line())
        ok &= result.ok
    return EXIT_OK if ok else EXIT_VERIFY


def _short_run(args, **engine_options):
    cfg = load_config(args.config, False, workers=1)
    engine, store = bench.build_engine(cfg, **engine_options)
    for _ in bench.run_worker(engine, 0, cfg, store, max_interactions=args.interactions):
        pass
    engine.wait_detached()
    return engine


def cmd_stats(args) -> int:
    engine = _short_run(args)
    try:
        print(stats_to_json(engine.stats.snapshot()))
    finally:
        engine.close()
    return EXIT_OK


def cmd_audit(args) -> int:
    engine = _short_run(args, audit_allows=True)
    try:
        if args.rules:
            apply_script(engine, Path(args.rules).read_text())
            # probe one call the rules may forbid so the trail shows the decision
            section = engine.list_actors(sm.STORE_SECTION)[0]
            engine.check_access(CallFrame(sm.GROUP_MANAGER, "get_fixed_discounts", "0"),
                                CallFrame(section.type_name, "get_price", section.actor_name))
        for rec in engine.audit.tail(args.tail):
            print(json.dumps(rec.to_json(), sort_keys=True))
    finally:
        engine.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actordb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("load", help="load a synthetic SmartMart store and report sizes")
    p.add_argument("--config")
    p.add_argument("--paper-scale", dest="full_scale", action="store_true",
                   help="10000 items/section, 300 history rows/item")
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("bench", help="run the SmartMart benchmark")
    _add_workload_args(p)
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--verify", action="store_true",
                   help="check committed interactions against store visits afterwards")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="one benchmark per value of sections or workers")
    _add_workload_args(p)
    p.add_argument("--param", choices=("sections", "workers"), required=True)
    p.add_argument("--values", type=_parse_range, default=_parse_range("1-8"))
    p.add_argument("--out", help="summary CSV path (default: stdout)")
    p.add_argument("--out-dir", help="also write one per-epoch CSV per value here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("admin", help="parse and apply an admin script to a fresh store")
    p.add_argument("--script", required=True)
    p.add_argument("--config", help="load this store first (default: no actors)")
    p.set_defaults(func=cmd_admin)

    p = sub.add_parser("recover", help="replay a redo log into a freshly loaded store")
    p.add_argument("--log", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--quick", action="store_true", help="fewer cases per suite")
    p.set_defaults(func=cmd_verify)

    for name, func, help_ in (("stats", cmd_stats, "per-actor counters after a short run"),
                              ("audit", cmd_audit, "audit trail after a short run")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--interactions", type=int, default=20)
        if name == "audit":
            p.add_argument("--tail", type=int, default=20)
            p.add_argument("--rules", help="admin script applied after the run")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    warnings.simplefilter("ignore", bench.HardwareWarning)  # reported in the summary
    try:
        return args.func(args)
    except (ActorDBError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
