"""SmartMart workload driver with epoch-based measurement.

Each worker owns one cart and runs closed-loop interactions: ``add_items``
and, if that commits, ``checkout``. Outcomes carry their completion time;
after the run they are bucketed into epochs (the first, warm-up epoch is
discarded) and summarized into a :class:`Report`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import random
import statistics
import threading
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

from . import smartmart as sm
from .engine import Engine, EngineConfig, LogicalClock
from .errors import ConfigError, LogIOError
from .txn import AbortReason

CSV_COLUMNS = ("epoch", "committed", "aborted_read", "aborted_scan", "aborted_racy",
               "aborted_app", "mean_latency_us", "throughput_per_s")

_CSV_REASON = {
    AbortReason.READ_VALIDATION.value: "aborted_read",
    AbortReason.SCAN_VALIDATION.value: "aborted_scan",
    AbortReason.RACY_SIBLINGS.value: "aborted_racy",
}


class HardwareWarning(UserWarning):
    """The machine has fewer cores than the configuration can keep busy."""


@dataclass(frozen=True)
class BenchmarkConfig:
    sections_total: int = 8
    sections_per_order: int = 8
    items_per_section_order: int = 4
    inventory_items_per_section: int = 500
    history_rows_per_item: int = 30
    workers: int = 1
    carts: int | None = None  # defaults to one cart per worker
    customers_per_cart: int = 30
    group_managers: int = 10
    k: int = 15
    c: float = 1.0
    replenish_quantity: int = 10000
    replenish: bool = True
    initial_quantity: int = 10000
    max_quantity: int = 4
    epochs: int = 5
    epoch_seconds: float = 1.0
    warmup: bool = True
    # count-based epochs: every worker runs this many interactions per epoch
    interactions_per_epoch: int | None = None
    mode: str = "sync"
    seed: int = 0
    durability: bool = False
    log_path: str | None = None
    fsync: str = "commit"
    clock: str = "monotonic"  # monotonic | logical
    scan_granularity: str = "leaf"
    leaf_span: int = 1  # per-key phantom granularity; see README "Aborts"
    affinity: bool = False
    verify: bool = False

    def __post_init__(self):
        if self.carts is None:
            object.__setattr__(self, "carts", self.workers)
        positive = ("sections_total", "sections_per_order", "items_per_section_order",
                    "inventory_items_per_section", "workers", "carts", "customers_per_cart",
                    "group_managers", "k", "max_quantity", "epochs", "leaf_span")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.sections_per_order > self.sections_total:
            raise ConfigError("sections_per_order must not exceed sections_total")
        if self.items_per_section_order > self.inventory_items_per_section:
            raise ConfigError("items_per_section_order must not exceed inventory_items_per_section")
        if self.workers > self.carts:
            raise ConfigError("workers must not exceed carts")
        if not self.epoch_seconds > 0:
            raise ConfigError("epoch_seconds must be > 0")
        if self.interactions_per_epoch is not None and self.interactions_per_epoch < 1:
            raise ConfigError("interactions_per_epoch must be >= 1")
        if self.mode not in ("sync", "async"):
            raise ConfigError("mode must be 'sync' or 'async'")
        if self.clock not in ("monotonic", "logical"):
            raise ConfigError("clock must be 'monotonic' or 'logical'")
        if self.durability and not self.log_path:
            raise ConfigError("durability needs a log_path")

    @classmethod
    def full_scale(cls, **kw) -> "BenchmarkConfig":
        base = dict(inventory_items_per_section=10000, history_rows_per_item=300, k=150,
                    epochs=20, epoch_seconds=2.0)
        return cls(**{**base, **kw})

    @property
    def customers(self) -> int:
        return self.customers_per_cart * self.carts

    @property
    def order_size(self) -> int:
        return self.sections_per_order * self.items_per_section_order

    def store_config(self) -> sm.StoreConfig:
        return sm.StoreConfig(sections=self.sections_total,
                              items_per_section=self.inventory_items_per_section,
                              history_rows_per_item=self.history_rows_per_item,
                              carts=self.carts, customers_per_cart=self.customers_per_cart,
                              group_managers=self.group_managers,
                              initial_quantity=self.initial_quantity, seed=self.seed)


@dataclass(frozen=True)
class InteractionOutcome:
    worker: int
    index: int  # per-worker interaction number
    started: float  # perf_counter seconds
    finished: float
    committed: bool
    reason: str | None = None  # abort reason of whichever step failed

    @property
    def latency_us(self) -> float:
        return (self.finished - self.started) * 1e6


@dataclass
class EpochStats:
    epoch: int
    committed: int
    aborted: dict[str, int]
    mean_latency_us: float
    throughput_per_s: float
    seconds: float

    @property
    def aborted_total(self) -> int:
        return sum(self.aborted.values())


@dataclass
class Report:
    config: dict
    epochs: list[EpochStats]
    throughput_mean: float
    throughput_std: float
    latency_mean_us: float
    latency_std_us: float
    abort_rate: float  # fraction of measured interactions that aborted
    warnings: list[str] = field(default_factory=list)
    audit: dict | None = None

    @property
    def abort_rate_pct(self) -> float:
        return 100.0 * self.abort_rate

    @property
    def committed_total(self) -> int:
        return sum(e.committed for e in self.epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        d = dict(d)
        d["epochs"] = [EpochStats(**e) for e in d["epochs"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# setup and workers
# ---------------------------------------------------------------------------

def build_engine(cfg: BenchmarkConfig, **engine_options) -> tuple[Engine, sm.StoreConfig]:
    """A fresh engine with the SmartMart store for ``cfg`` loaded.

    ``engine_options`` are extra :class:`EngineConfig` fields (e.g. ``audit_allows``).
    """
    assignment_kw = {}
    if cfg.affinity:
        cpus = sorted(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else [0]
        store = cfg.store_config()
        assignment_kw["affinity"] = {
            f"{sm.STORE_SECTION}[{name}]": [cpus[i % len(cpus)]]
            for i, name in enumerate(store.section_names())}
    from .engine import ExecutorAssignment
    engine = Engine(EngineConfig(
        mode=cfg.mode, assignment=ExecutorAssignment(**assignment_kw),
        scan_granularity=cfg.scan_granularity, leaf_span=cfg.leaf_span,
        log_path=cfg.log_path if cfg.durability else None, fsync=cfg.fsync,
        clock=LogicalClock() if cfg.clock == "logical" else None, **engine_options))
    sm.register(engine, sm.SmartMartSettings(
        discount=sm.DiscountParams(c=cfg.c, k=cfg.k, replenish_quantity=cfg.replenish_quantity),
        replenish=cfg.replenish))
    store = cfg.store_config()
    sm.load_store(engine, store)
    return engine, store


def worker_rng(cfg: BenchmarkConfig, worker: int) -> random.Random:
    return random.Random(cfg.seed * 1_000_003 + worker)


def run_interaction(engine: Engine, cart: str, customer: str, order) -> tuple[bool, str | None]:
    """One add_items + checkout; returns (committed, abort reason)."""
    out = engine.execute((sm.CART, cart), "add_items", order, int(customer))
    if not out.committed:
        return False, out.result.reason.value
    out = engine.execute((sm.CART, cart), "checkout", out.value)
    if not out.committed:
        return False, out.result.reason.value
    return True, None


def run_worker(engine: Engine, worker: int, cfg: BenchmarkConfig, store: sm.StoreConfig,
               stop: threading.Event | None = None, max_interactions: int | None = None,
               max_committed: int | None = None,
               rng: random.Random | None = None) -> Iterator[InteractionOutcome]:
    """Closed-loop interactions on cart ``worker + 1`` until a limit is hit."""
    rng = rng or worker_rng(cfg, worker)
    cart = store.cart_names()[worker]
    customers = store.customer_names()
    n = committed = 0
    while True:
        if stop is not None and stop.is_set():
            return
        if max_interactions is not None and n >= max_interactions:
            return
        if max_committed is not None and committed >= max_committed:
            return
        customer = rng.choice(customers)
        order = sm.random_order(rng, store, cfg.sections_per_order, cfg.items_per_section_order,
                                cfg.max_quantity)
        t0 = time.perf_counter()
        ok, reason = run_interaction(engine, cart, customer, order)
        yield InteractionOutcome(worker, n, t0, time.perf_counter(), ok, reason)
        n += 1
        committed += ok


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

def _hardware_warnings(cfg: BenchmarkConfig) -> list[str]:
    cores = os.cpu_count() or 1
    out = []
    if cfg.mode == "async" and cores < cfg.workers + cfg.sections_total:
        msg = (f"{cores} core(s) available but async mode with {cfg.workers} worker(s) and "
               f"{cfg.sections_total} section executors wants {cfg.workers + cfg.sections_total}")
        warnings.warn(msg, HardwareWarning, stacklevel=3)
        out.append(msg)
    return out


def _epoch_stats(index: int, outcomes: list[InteractionOutcome], seconds: float) -> EpochStats:
    aborted: dict[str, int] = {}
    latencies = []
    for o in outcomes:
        if o.committed:
            latencies.append(o.latency_us)
        else:
            aborted[o.reason] = aborted.get(o.reason, 0) + 1
    committed = len(latencies)
    mean_lat = statistics.fmean(latencies) if latencies else 0.0
    return EpochStats(index, committed, dict(sorted(aborted.items())), mean_lat,
                      committed / seconds if seconds > 0 else 0.0, seconds)


def _std(xs: list[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def summarize(cfg: BenchmarkConfig, epochs: list[EpochStats], warns: list[str]) -> Report:
    thr = [e.throughput_per_s for e in epochs]
    lat = [e.mean_latency_us for e in epochs if e.committed]
    committed = sum(e.committed for e in epochs)
    aborted = sum(e.aborted_total for e in epochs)
    attempts = committed + aborted
    return Report(
        config=asdict(cfg), epochs=epochs,
        throughput_mean=statistics.fmean(thr) if thr else 0.0, throughput_std=_std(thr),
        latency_mean_us=statistics.fmean(lat) if lat else 0.0, latency_std_us=_std(lat),
        abort_rate=aborted / attempts if attempts else 0.0, warnings=warns)


def _run_timed(engine, cfg, store) -> tuple[list[EpochStats], int]:
    warm = 1 if cfg.warmup else 0
    stop = threading.Event()
    sinks: list[list[InteractionOutcome]] = [[] for _ in range(cfg.workers)]

    def drive(w):
        for out in run_worker(engine, w, cfg, store, stop=stop):
            sinks[w].append(out)

    threads = [threading.Thread(target=drive, args=(w,), name=f"bench-worker-{w}", daemon=True)
               for w in range(cfg.workers)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    deadline = t0 + (warm + cfg.epochs) * cfg.epoch_seconds
    while (remaining := deadline - time.perf_counter()) > 0:
        time.sleep(min(remaining, 0.05))
    stop.set()
    for t in threads:
        t.join()
    buckets: list[list[InteractionOutcome]] = [[] for _ in range(cfg.epochs)]
    for sink in sinks:
        for o in sink:
            e = math.floor((o.finished - t0) / cfg.epoch_seconds) - warm
            if 0 <= e < cfg.epochs:
                buckets[e].append(o)
    total_committed = sum(o.committed for sink in sinks for o in sink)
    return [_epoch_stats(i, b, cfg.epoch_seconds) for i, b in enumerate(buckets)], total_committed


def _run_counted(engine, cfg, store) -> tuple[list[EpochStats], int]:
    warm = 1 if cfg.warmup else 0
    per_epoch = cfg.interactions_per_epoch
    sinks: list[list[InteractionOutcome]] = [[] for _ in range(cfg.workers)]

    def drive(w):
        sinks[w].extend(run_worker(engine, w, cfg, store,
                                   max_interactions=(warm + cfg.epochs) * per_epoch))

    threads = [threading.Thread(target=drive, args=(w,), name=f"bench-worker-{w}", daemon=True)
               for w in range(cfg.workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    epochs = []
    for i in range(cfg.epochs):
        lo, hi = (warm + i) * per_epoch, (warm + i + 1) * per_epoch
        bucket = [o for sink in sinks for o in sink[lo:hi]]
        seconds = (max(o.finished for o in bucket) - min(o.started for o in bucket)) if bucket else 0
        epochs.append(_epoch_stats(i, bucket, seconds))
    total_committed = sum(o.committed for sink in sinks for o in sink)
    return epochs, total_committed


def run_benchmark(cfg: BenchmarkConfig) -> Report:
    """Load a store, drive it with ``cfg.workers`` workers, and summarize the epochs."""
    warns = _hardware_warnings(cfg)
    engine, store = build_engine(cfg)
    try:
        if cfg.verify:
            from .verify import inventory_totals
            before = inventory_totals(engine)
        runner = _run_timed if cfg.interactions_per_epoch is None else _run_counted
        epochs, total_committed = runner(engine, cfg, store)
        report = summarize(cfg, epochs, warns)
        if cfg.verify:
            from .verify import conservation_audit, store_visit_count
            engine.wait_detached()
            visits = store_visit_count(engine)
            problems = conservation_audit(engine, before) if not cfg.replenish else []
            report.audit = {"committed_total": total_committed, "store_visits": visits,
                            "ok": visits == total_committed and not problems,
                            "problems": problems[:10]}
        return report
    finally:
        engine.close()


def sweep(cfg: BenchmarkConfig, param: str, values) -> list[tuple[int, Report]]:
    """One report per value of ``param`` (``sections`` or ``workers``)."""
    out = []
    for v in values:
        if param == "sections":
            c = replace(cfg, sections_per_order=v)
        elif param == "workers":
            c = replace(cfg, workers=v, carts=max(v, cfg.carts))
        else:
            raise ConfigError(f"cannot sweep over {param!r}; use 'sections' or 'workers'")
        out.append((v, run_benchmark(c)))
    return out


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def _csv_row(e: EpochStats) -> list:
    cols = {"aborted_read": 0, "aborted_scan": 0, "aborted_racy": 0, "aborted_app": 0}
    for reason, n in e.aborted.items():
        cols[_CSV_REASON.get(reason, "aborted_app")] += n
    return [e.epoch, e.committed, cols["aborted_read"], cols["aborted_scan"],
            cols["aborted_racy"], cols["aborted_app"], repr(float(e.mean_latency_us)),
            repr(float(e.throughput_per_s))]


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in report.epochs:
        w.writerow(_csv_row(e))
    return buf.getvalue()


def report_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def load_report(path: str | Path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text()))


def emit_report(report: Report, fmt: str, path: str | Path | None) -> str:
    """Serialize ``report`` as ``csv`` or ``json``; write it to ``path`` unless None."""
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise LogIOError(f"cannot write report to {path}: {exc}") from exc
    return text


SWEEP_COLUMNS = ("param", "value", "throughput_mean", "throughput_std", "latency_mean_us",
                 "latency_std_us", "abort_rate_pct")


def sweep_csv(param: str, results: list[tuple[int, Report]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for v, r in results:
        w.writerow([param, v, repr(r.throughput_mean), repr(r.throughput_std),
                    repr(r.latency_mean_us), repr(r.latency_std_us), repr(r.abort_rate_pct)])
    return buf.getvalue()


def config_fields() -> list[str]:
    return [f.name for f in fields(BenchmarkConfig)]
