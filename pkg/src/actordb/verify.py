"""Independent oracles for the engine and the SmartMart application.

Each oracle recomputes a result by a different route than the engine:

* ``discount_reference`` -- variable discount from the ``statistics`` module
  over an explicit newest-first window, no relstore code involved;
* ``SequentialStore`` -- SmartMart add_items/checkout as straight-line
  Python over plain dicts and lists;
* ``serial_states`` -- brute-force final states of every serial order of
  a set of small read/write programs;
* ``conservation_audit`` -- inventory bookkeeping against purchase history.
"""

from __future__ import annotations

import itertools
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Any, Callable

from . import smartmart as sm
from .address import ActorAddress
from .engine import Engine, LogicalClock
from .relstore import Relation, Schema, WindowStats, scan, update
from .txn import TxnManager

# ---------------------------------------------------------------------------
# variable discount
# ---------------------------------------------------------------------------


def discount_reference(q: float, window_newest_first: list[float], vd: float, c: float, k: int) -> float:
    window = window_newest_first[:k]
    if not window:
        return 0.0
    mu = statistics.fmean(window)
    sigma = statistics.stdev(window) if len(window) > 1 else 0.0
    if mu + c * sigma <= 0:
        return 0.0
    return q / (mu + c * sigma) * vd


def _engine_discount(q, window_newest_first, vd, c, k):
    """The engine's route: window statistics through a relation, then the formula."""
    rel = Relation(Schema.of("h", "i_id int, time timestamp, i_quantity float"))
    n = len(window_newest_first)
    for age, x in enumerate(reversed(window_newest_first)):
        rel.load((1, age - n, x))
    (stats,) = _window(rel, k)
    return sm.variable_discount(q, stats, vd, c)


def _window(rel, k):
    from .relstore import window_stats
    return window_stats(None, rel, "i_id", "time", "i_quantity", k, [1])


@dataclass
class CheckResult:
    name: str
    ok: bool
    cases: int
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.cases} cases {self.detail}".rstrip()


def check_discount(cases: int = 1000, seed: int = 1, tol: float = 1e-9) -> CheckResult:
    rng = random.Random(seed)
    worst = 0.0
    bad = 0
    for _ in range(cases):
        q = rng.randint(1, 50)
        n = rng.randint(0, 40)
        window = [rng.choice([rng.randint(1, 30), round(rng.uniform(0.5, 30), 3)]) for _ in range(n)]
        vd = round(rng.uniform(0, 5), 4)
        c = rng.choice([0.0, 0.5, 1.0, 2.0, round(rng.uniform(0, 4), 3)])
        k = rng.randint(1, 50)
        want = discount_reference(q, window, vd, c, k)
        got = _engine_discount(q, window, vd, c, k)
        err = abs(got - want) / max(1.0, abs(want))
        worst = max(worst, err)
        if not err <= tol:
            bad += 1
    return CheckResult("discount-oracle", bad == 0, cases, f"max rel err {worst:.3e}, {bad} mismatches")


# ---------------------------------------------------------------------------
# straight-line SmartMart
# ---------------------------------------------------------------------------

@dataclass
class SequentialStore:
    """SmartMart over plain Python containers, one call at a time."""

    inventory: dict[str, dict[int, list]]  # sec -> i_id -> [price, min, qty, vd]
    history: dict[str, list[tuple]]  # sec -> [(i_id, time, qty, c_id)] in insertion order
    discounts: dict[str, dict[int, float]]  # group -> i_id -> fixed
    customers: dict[str, tuple]  # c_id -> (name, group)
    params: sm.DiscountParams
    store_id: int = 1
    replenish: bool = True
    cart: dict[str, Any] = field(default_factory=dict)
    purchases: list[tuple] = field(default_factory=list)
    visits: dict[str, list[tuple]] = field(default_factory=dict)

    @classmethod
    def from_engine(cls, engine: Engine) -> "SequentialStore":
        settings = engine.settings["smartmart"]
        inv, hist, disc, cust = {}, {}, {}, {}
        for addr in engine.list_actors():
            st = engine.actor(addr).state
            if addr.type_name == sm.STORE_SECTION:
                inv[addr.actor_name] = {r.i_id: [r.i_price, r.i_min_price, r.i_quantity, r.i_var_disc]
                                        for r in st["inventory"].committed_rows().values()}
                hist[addr.actor_name] = [tuple(r) for r in st["purchase_history"].committed_rows().values()]
            elif addr.type_name == sm.GROUP_MANAGER:
                disc[addr.actor_name] = {r.i_id: r.fixed_disc
                                         for r in st["discounts"].committed_rows().values()}
            elif addr.type_name == sm.CUSTOMER:
                rows = list(st["customer_info"].committed_rows().values())
                cust[addr.actor_name] = tuple(rows[0])
        return cls(inv, hist, disc, cust, settings.discount, settings.store_id, settings.replenish)

    def add_items(self, orders, c_id) -> int:
        _, group = self.customers[str(c_id)]
        fixed = self.discounts[str(group)]
        session = self.cart.get("session_id", 0) + 1
        self.cart = {"c_id": int(c_id), "store_id": self.cart.get("store_id", self.store_id),
                     "session_id": session}
        sections = []
        for sec, _, _ in orders:
            if sec not in sections:
                sections.append(sec)
        for sec in sections:
            # price lookups come back in inventory order
            wanted = {i for s, i, _ in orders if s == sec}
            qty = {i: q for s, i, q in orders if s == sec}
            for i_id in sorted(wanted):
                if i_id in self.inventory[sec]:
                    price, min_price, _, _ = self.inventory[sec][i_id]
                    self.purchases.append((sec, session, i_id, qty[i_id],
                                           fixed.get(i_id, 0.0), min_price, price))
        return session

    def _window(self, sec, i_id) -> list:
        rows = [(t, n, q) for n, (i, t, q, _) in enumerate(self.history[sec]) if i == i_id]
        rows.sort(reverse=True)
        return [q for _, _, q in rows]

    def section_totals(self, sec, c_id, c_time, items):
        amount = fixed_total = var = 0.0
        for i_id, qty, price, fixed, min_price in items:
            vdisc = discount_reference(qty, self._window(sec, i_id), self.inventory[sec][i_id][3],
                                  self.params.c, self.params.k)
            if price > fixed + vdisc:
                amount += (price - (fixed + vdisc)) * qty
                var += vdisc * qty
            else:
                amount += min_price * qty
                var += (price - min_price - fixed) * qty
            fixed_total += fixed * qty
        for i_id, qty, *_ in items:
            row = self.inventory[sec][i_id]
            if row[2] > qty or not self.replenish:
                row[2] -= qty
            else:
                row[2] = self.params.replenish_quantity
            self.history[sec].append((i_id, c_time, qty, c_id))
        return amount, fixed_total, var

    def checkout(self, session, c_time) -> tuple[float, float, float]:
        lines = [p for p in self.purchases if p[1] == session]
        sections = []
        for p in lines:
            if p[0] not in sections:
                sections.append(p[0])
        totals = [self.section_totals(sec, self.cart["c_id"], c_time,
                                      [(p[2], p[3], p[6], p[4], p[5]) for p in lines if p[0] == sec])
                  for sec in sections]
        amt = sum(t[0] for t in totals)
        fixed = sum(t[1] for t in totals)
        var = sum(t[2] for t in totals)
        self.visits.setdefault(str(self.cart["c_id"]), []).append(
            (self.cart["store_id"], c_time, amt, fixed, var))
        return amt, fixed, var


def _close(a, b, tol) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        return math.isclose(a, b, rel_tol=tol, abs_tol=tol)
    return a == b


def _rows_close(got: list, want: list, tol: float) -> bool:
    return len(got) == len(want) and all(
        len(g) == len(w) and all(_close(x, y, tol) for x, y in zip(g, w)) for g, w in zip(got, want))


def compare_with_oracle(engine: Engine, oracle: SequentialStore, tol: float = 1e-9) -> list[str]:
    """Differences between the engine's committed state and the oracle's."""
    problems = []
    for sec, items in oracle.inventory.items():
        rows = engine.relation((sm.STORE_SECTION, sec), "inventory").committed_rows().values()
        got = [tuple(r) for r in rows]
        want = [(i, p, m, q, v) for i, (p, m, q, v) in items.items()]
        if not _rows_close(got, want, tol):
            problems.append(f"inventory of section {sec}")
        hist = [tuple(r) for r in
                engine.relation((sm.STORE_SECTION, sec), "purchase_history").committed_rows().values()]
        if not _rows_close(hist, oracle.history[sec], tol):
            problems.append(f"purchase_history of section {sec}")
    cart = engine.list_actors(sm.CART)[0]
    got = [tuple(r) for r in engine.relation(cart, "cart_purchases").committed_rows().values()]
    if not _rows_close(got, oracle.purchases, tol):
        problems.append("cart_purchases")
    for c in oracle.customers:
        got = [tuple(r) for r in
               engine.relation((sm.CUSTOMER, c), "store_visits").committed_rows().values()]
        if not _rows_close(got, oracle.visits.get(c, []), tol):
            problems.append(f"store_visits of customer {c}")
    return problems


def random_small_store(rng: random.Random) -> tuple[Engine, sm.StoreConfig]:
    cfg = sm.StoreConfig(sections=2, items_per_section=rng.randint(1, 10),
                         history_rows_per_item=rng.randint(0, 20), carts=1,
                         customers_per_cart=3, group_managers=2,
                         initial_quantity=rng.randint(1, 30), seed=rng.randrange(2**31))
    params = sm.DiscountParams(c=rng.choice([0.0, 1.0, 2.0]), k=rng.randint(1, 25),
                               replenish_quantity=rng.choice([10000, 50]))
    engine = Engine(clock=LogicalClock(), detached="manual")
    sm.register(engine, sm.SmartMartSettings(discount=params))
    sm.load_store(engine, cfg)
    return engine, cfg


def check_checkout(stores: int = 200, seed: int = 2, tol: float = 1e-9,
                   interactions: int = 3) -> CheckResult:
    rng = random.Random(seed)
    failures = []
    for n in range(stores):
        engine, cfg = random_small_store(rng)
        oracle = SequentialStore.from_engine(engine)
        cart = cfg.cart_names()[0]
        for _ in range(interactions):
            order = sm.random_order(rng, cfg, rng.randint(1, 2),
                                    rng.randint(1, cfg.items_per_section), max_quantity=6)
            c_id = rng.choice(cfg.customer_names())
            session = engine.call((sm.CART, cart), "add_items", order, int(c_id))
            want_session = oracle.add_items(order, c_id)
            if session != want_session:
                failures.append(f"store {n}: session {session} != {want_session}")
                break
            amt = engine.call((sm.CART, cart), "checkout", session)
            engine.process_detached_queue()
            # the engine read its clock exactly once for this checkout
            c_time = engine.relation((sm.CUSTOMER, c_id), "store_visits").committed_rows()
            c_time = list(c_time.values())[-1].time
            want = oracle.checkout(session, c_time)
            visit = list(engine.relation((sm.CUSTOMER, c_id), "store_visits")
                         .committed_rows().values())[-1]
            got = (visit.amount, visit.fixed_disc, visit.var_disc)
            if not (_close(amt, want[0], tol) and all(_close(g, w, tol) for g, w in zip(got, want))):
                failures.append(f"store {n}: totals {got} != {want}")
                break
        else:
            problems = compare_with_oracle(engine, oracle, tol)
            if problems:
                failures.append(f"store {n}: {', '.join(problems)}")
        engine.close()
    return CheckResult("checkout-oracle", not failures, stores,
                       "; ".join(failures[:3]) if failures else "")


# ---------------------------------------------------------------------------
# small-instance serializability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Op:
    kind: str  # "r" or "w"
    key: int
    a: int = 0  # write value = a * (sum of values read so far) + b
    b: int = 0


def _run_program(ops: list[Op], state: dict[int, int]) -> None:
    acc = 0
    for op in ops:
        if op.kind == "r":
            acc += state[op.key]
        else:
            state[op.key] = op.a * acc + op.b


def serial_states(programs: list[list[Op]], initial: dict[int, int]) -> list[dict[int, int]]:
    out = []
    for perm in itertools.permutations(programs):
        st = dict(initial)
        for p in perm:
            _run_program(p, st)
        out.append(st)
    return out


def random_programs(rng: random.Random, n_txn: int, n_keys: int) -> list[list[Op]]:
    programs = []
    for _ in range(n_txn):
        ops = []
        for _ in range(rng.randint(1, 4)):
            key = rng.randrange(n_keys)
            if rng.random() < 0.5:
                ops.append(Op("r", key))
            else:
                ops.append(Op("w", key, rng.randint(0, 3), rng.randint(0, 9)))
        programs.append(ops)
    return programs


def run_interleaved(programs: list[list[Op]], initial: dict[int, int], schedule: list[int]):
    """Execute programs under the txn manager, stepping them in ``schedule`` order.

    Each program's final step is its commit. Returns (committed flags, final state).
    """
    manager = TxnManager()
    schema = Schema.of("kv", "k int, v int", indexes=["k"])
    rel = Relation(schema, owner=ActorAddress("KV", "0"))
    for k in sorted(initial):
        rel.load((k, initial[k]))
    ctxs = [manager.begin_root() for _ in programs]
    accs = [0] * len(programs)
    pcs = [0] * len(programs)
    committed = [False] * len(programs)
    for t in schedule:
        ctx, pc = ctxs[t], pcs[t]
        if pc < len(programs[t]):
            op = programs[t][pc]
            if op.kind == "r":
                (v,) = scan(ctx, rel, {"k": op.key}, columns=("v",))[0]
                accs[t] += v
            else:
                update(ctx, rel, {"k": op.key}, {"v": op.a * accs[t] + op.b})
        else:
            committed[t] = manager.commit(ctx).committed
        pcs[t] += 1
    final = {r.k: r.v for r in rel.committed_rows().values()}
    return committed, final


def check_serializability(schedules: int = 500, seed: int = 3) -> CheckResult:
    rng = random.Random(seed)
    bad = []
    for n in range(schedules):
        n_txn, n_keys = rng.randint(1, 3), rng.randint(1, 2)
        programs = random_programs(rng, n_txn, n_keys)
        initial = {k: rng.randint(0, 9) for k in range(n_keys)}
        steps = [t for t, p in enumerate(programs) for _ in range(len(p) + 1)]
        rng.shuffle(steps)
        # a program's steps must stay in program order; the shuffle only picks who goes next
        committed, final = run_interleaved(programs, initial, steps)
        survivors = [p for p, ok in zip(programs, committed) if ok]
        if final not in serial_states(survivors, initial):
            bad.append(n)
    return CheckResult("serializability", not bad, schedules,
                       f"non-serializable schedules: {bad[:5]}" if bad else "")


# ---------------------------------------------------------------------------
# conservation
# ---------------------------------------------------------------------------

def inventory_totals(engine: Engine) -> tuple[dict, dict]:
    """Per (section, item): current quantity and summed purchase-history quantity."""
    qty, sold = {}, {}
    for addr in engine.list_actors(sm.STORE_SECTION):
        for r in engine.relation(addr, "inventory").committed_rows().values():
            qty[(addr.actor_name, r.i_id)] = r.i_quantity
        for r in engine.relation(addr, "purchase_history").committed_rows().values():
            key = (addr.actor_name, r.i_id)
            sold[key] = sold.get(key, 0) + r.i_quantity
    return qty, sold


def conservation_audit(engine: Engine, before: tuple[dict, dict]) -> list[str]:
    """Items whose stock drop differs from the quantity recorded as sold since ``before``."""
    qty0, sold0 = before
    qty1, sold1 = inventory_totals(engine)
    problems = []
    for key, q0 in qty0.items():
        drop = q0 - qty1[key]
        sold = sold1.get(key, 0) - sold0.get(key, 0)
        if drop != sold:
            problems.append(f"{key}: stock fell by {drop}, history records {sold}")
    return problems


def store_visit_count(engine: Engine) -> int:
    return sum(len(engine.relation(a, "store_visits"))
               for a in engine.list_actors(sm.CUSTOMER))


def check_conservation(workers: int = 4, committed_per_worker: int = 200, seed: int = 4,
                       mode: str = "sync") -> CheckResult:
    """Concurrent workload with replenishment off; stock and visits must balance."""
    from .bench import BenchmarkConfig, build_engine, run_worker
    import threading

    cfg = BenchmarkConfig(workers=workers, mode=mode, seed=seed, replenish=False,
                          inventory_items_per_section=50, history_rows_per_item=5,
                          initial_quantity=10**9, k=5)
    engine, store = build_engine(cfg)
    before = inventory_totals(engine)
    committed = [0] * workers

    def drive(w):
        for out in run_worker(engine, w, cfg, store, max_committed=committed_per_worker):
            committed[w] += out.committed

    threads = [threading.Thread(target=drive, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    engine.wait_detached()
    problems = conservation_audit(engine, before)
    visits = store_visit_count(engine)
    if visits != sum(committed):
        problems.append(f"{sum(committed)} committed checkouts but {visits} store visits")
    engine.close()
    return CheckResult("conservation", not problems, sum(committed), "; ".join(problems[:3]))


def run_all(quick: bool = False) -> list[CheckResult]:
    scale = 5 if quick else 1
    return [
        check_discount(1000 // scale),
        check_checkout(200 // scale),
        check_serializability(500 // scale),
        check_conservation(committed_per_worker=200 // scale),
    ]
