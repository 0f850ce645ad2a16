"""SmartMart: a self-checkout supermarket modelled as four actor types.

* ``Customer``       profile, store visits, (encrypted) password
* ``Group_Manager``  fixed per-item discounts for a customer group
* ``Store_Section``  inventory and purchase history of one section
* ``Cart``           a shopping session (nondurable)

An interaction is ``Cart.add_items`` followed, on commit, by
``Cart.checkout``. Checkout prices each section's items with a demand-
driven variable discount::

    vdisc = q / (mean + c * stddev) * VD

where ``q`` is the ordered quantity, mean/stddev summarize the quantities
of the item's ``k`` most recent purchases, and ``VD`` is the item's
variable-discount budget.
"""

from __future__ import annotations

import math
import operator
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .engine import ActorTypeDescriptor, Engine, MethodDescriptor
from .errors import ApplicationError, ConfigError, SessionAlreadyOpen, UnknownItem, UnknownSession
from .relstore import Schema, WindowStats
from .txn import Delivery, Trigger

CUSTOMER, GROUP_MANAGER, STORE_SECTION, CART = "Customer", "Group_Manager", "Store_Section", "Cart"

CUSTOMER_INFO = Schema.of("customer_info", "cust_name string, c_g_id int")
STORE_VISITS = Schema.of("store_visits",
                         "store_id int, time timestamp, amount float, fixed_disc float, var_disc float")
PASSWD = Schema.of("passwd", "enc_passwd string", encrypted=True)
DISCOUNTS = Schema.of("discounts", "i_id int, fixed_disc float", indexes=["i_id"])
INVENTORY = Schema.of("inventory",
                      "i_id int, i_price float, i_min_price float, i_quantity int, i_var_disc float",
                      indexes=["i_id"])
PURCHASE_HISTORY = Schema.of("purchase_history", "i_id int, time timestamp, i_quantity int, c_id int",
                             indexes=["i_id"])
CART_INFO = Schema.of("cart_info", "c_id int, store_id int, session_id int")
CART_PURCHASES = Schema.of(
    "cart_purchases",
    "sec_id string, session_id int, i_id int, i_quantity int, i_fixed_disc float, "
    "i_min_price float, i_price float",
    indexes=["session_id"])

# calls the application makes, for static checking against access rules
CALL_GRAPH = [
    (CART, "add_items", STORE_SECTION, "get_price"),
    (CART, "add_items", CUSTOMER, "get_customer_info"),
    (CART, "add_items", GROUP_MANAGER, "get_fixed_discounts"),
    (CART, "checkout", STORE_SECTION, "get_variable_discount_update_inventory"),
    (CART, "checkout", CUSTOMER, "add_store_visit"),
]

LIFECYCLE_EXAMPLE = """\
CREATE ACTORS OF TYPE Customer WITH NAMES IN (22, 32);
CREATE ACTORS OF TYPE Cart WITH NAMES IN (42, 43);

DROP ACTORS OF TYPE Cart WITH NAMES IN (42);
"""

ACCESS_RULES_EXAMPLE = """\
REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;

GRANT ACTORS OF TYPE Cart WITH METHODS IN (add_items)
 ACCESS TO
   ACTORS OF TYPE Store_Section WITH METHODS IN (get_price)
 AND ACCESS TO
   ACTORS OF TYPE Customer WITH METHODS IN (get_customer_info)
 AND ACCESS TO
   ACTORS OF TYPE Group_Manager WITH METHODS IN
                  (get_fixed_discounts);

GRANT ACTORS OF TYPE Cart WITH METHODS IN (checkout)
 ACCESS TO
   ACTORS OF TYPE Store_Section WITH METHODS IN
                  (get_variable_discount_update_inventory)
 AND ACCESS TO
   ACTORS OF TYPE Customer WITH METHODS IN (add_store_visit);

GRANT ACTORS OF TYPE Cart WITH NAMES IN (12,13,14)
 ACCESS TO
   ACTORS OF TYPE Store_Section WITH NAMES IN (100, 200);
"""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscountParams:
    c: float = 1.0
    k: int = 150
    replenish_quantity: int = 10000

    def __post_init__(self):
        if not (self.c >= 0 and math.isfinite(self.c)):
            raise ConfigError(f"c must be a finite number >= 0, got {self.c}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be an integer >= 1, got {self.k}")


@dataclass
class SmartMartSettings:
    """Application settings shared by all SmartMart actors of one engine.

    ``min_price_guard`` selects the clamp condition when pricing a line:
    ``"threshold"`` clamps only when ``price <= fixed + vdisc`` (the
    store-section pricing rule, and the default); ``"floor"`` clamps whenever
    the discounted price would fall below the item's minimum price.
    ``replenish=False`` turns off restocking so inventory can be audited.
    """

    discount: DiscountParams = field(default_factory=DiscountParams)
    store_id: int = 1
    min_price_guard: str = "threshold"
    replenish: bool = True
    validate_fn: Callable[[str, str], bool] = operator.eq

    def __post_init__(self):
        if self.min_price_guard not in ("threshold", "floor"):
            raise ConfigError("min_price_guard must be 'threshold' or 'floor'")


def _settings(ctx) -> SmartMartSettings:
    return ctx.settings["smartmart"]


# ---------------------------------------------------------------------------
# pricing
# ---------------------------------------------------------------------------

def variable_discount(q: int, stats: WindowStats, vd: float, c: float) -> float:
    """Demand-normalized discount; 0 when the item has no purchase history."""
    if q <= 0:
        raise ValueError("quantity must be positive")
    if stats.window_count == 0:
        return 0.0
    target = stats.mean + c * stats.sample_stddev
    if target <= 0:
        return 0.0
    return (q / target) * vd


@dataclass(frozen=True)
class CheckoutTotals:
    amount: float
    fixed_disc: float
    var_disc: float


def line_totals(price: float, fixed: float, vdisc: float, min_price: float, qty: int,
                guard: str = "threshold") -> CheckoutTotals:
    """Revenue and discounts of one order line."""
    if guard == "threshold":
        discounted = price > fixed + vdisc
    else:
        discounted = price - (fixed + vdisc) >= min_price
    if discounted:
        amount = (price - (fixed + vdisc)) * qty
        var = vdisc * qty
    else:
        amount = min_price * qty
        var = (price - min_price - fixed) * qty
    return CheckoutTotals(amount, fixed * qty, var)


# ---------------------------------------------------------------------------
# Customer
# ---------------------------------------------------------------------------

def get_customer_info(ctx):
    rows = ctx.scan("customer_info")
    if not rows:
        raise ApplicationError(f"customer {ctx.actor_name} has no profile")
    return tuple(rows[0])


def add_store_visit(ctx, store_id, time, amt, fixed_disc, var_disc):
    ctx.insert("store_visits", (store_id, time, amt, fixed_disc, var_disc))


def authenticate(ctx, enc_passwd):
    rows = ctx.scan("passwd")
    return bool(rows) and bool(_settings(ctx).validate_fn(enc_passwd, rows[0].enc_passwd))


# ---------------------------------------------------------------------------
# Group_Manager
# ---------------------------------------------------------------------------

def get_fixed_discounts(ctx, i_ids):
    return [tuple(r) for r in ctx.scan("discounts", where={"i_id": set(i_ids)})]


# ---------------------------------------------------------------------------
# Store_Section
# ---------------------------------------------------------------------------

def get_price(ctx, i_ids):
    if not i_ids:
        return []
    return ctx.scan("inventory", where={"i_id": set(i_ids)},
                    columns=("i_id", "i_price", "i_min_price"))


def get_variable_discount_update_inventory(ctx, c_id, c_time, ord_items):
    """Price ``ord_items`` = [(i_id, qty, price, fixed_disc, min_price)], then record the sale."""
    settings = _settings(ctx)
    params = settings.discount
    if not ord_items:
        raise ApplicationError("empty order for section")
    ids = [o[0] for o in ord_items]
    if any(o[1] <= 0 for o in ord_items):
        raise ApplicationError("order quantities must be positive")
    stock = {r.i_id: r for r in ctx.scan("inventory", where={"i_id": set(ids)})}
    missing = [i for i in ids if i not in stock]
    if missing:
        raise UnknownItem(f"section {ctx.actor_name} has no item(s) {missing}")
    # statistics over history *before* this purchase is recorded
    window = {w.key: w for w in ctx.window_stats("purchase_history", "i_id", "time",
                                                 "i_quantity", params.k, ids)}
    amount = fixed = var = 0.0
    for i_id, qty, price, fixed_disc, min_price in ord_items:
        vdisc = variable_discount(qty, window[i_id], stock[i_id].i_var_disc, params.c)
        line = line_totals(price, fixed_disc, vdisc, min_price, qty, settings.min_price_guard)
        amount += line.amount
        fixed += line.fixed_disc
        var += line.var_disc

    replenish = settings.replenish
    refill = params.replenish_quantity
    for i_id, qty, *_ in ord_items:
        ctx.update("inventory", where={"i_id": i_id}, set={
            "i_quantity": lambda row, q=qty: (row.i_quantity - q
                                              if row.i_quantity > q or not replenish else refill)})
        ctx.insert("purchase_history", (i_id, c_time, qty, c_id))
    return (amount, fixed, var)


# ---------------------------------------------------------------------------
# Cart
# ---------------------------------------------------------------------------

def _check_orders(orders) -> list[tuple[str, int, int]]:
    out, seen = [], set()
    for sec_id, i_id, qty in orders:
        sec_id, i_id, qty = str(sec_id), int(i_id), int(qty)
        if qty <= 0:
            raise ApplicationError(f"item {i_id}: quantity must be positive")
        if (sec_id, i_id) in seen:
            raise ApplicationError(f"item {i_id} ordered twice from section {sec_id}")
        seen.add((sec_id, i_id))
        out.append((sec_id, i_id, qty))
    return out


def add_items(ctx, orders, o_c_id):
    """Price an order and stage it as a new cart session; returns the session id."""
    orders = _check_orders(orders)
    by_section: dict[str, list[int]] = {}
    for sec_id, i_id, _ in orders:
        by_section.setdefault(sec_id, []).append(i_id)

    sections = ctx.actors(STORE_SECTION)
    prices = {sec: sections[sec].get_price(ids) for sec, ids in by_section.items()}

    _, c_g_id = ctx.actors(CUSTOMER)[o_c_id].get_customer_info().get()
    ordered_ids = list(dict.fromkeys(i_id for _, i_id, _ in orders))
    disc_res = ctx.actors(GROUP_MANAGER)[c_g_id].get_fixed_discounts(ordered_ids)

    info = ctx.scan("cart_info")
    if info:
        session_id = info[0].session_id + 1
        ctx.update("cart_info", set={"c_id": int(o_c_id), "session_id": session_id})
    else:
        session_id = 1
        ctx.insert("cart_info", (int(o_c_id), _settings(ctx).store_id, session_id))
    if ctx.scan("cart_purchases", where={"session_id": session_id}):
        raise SessionAlreadyOpen(f"cart {ctx.actor_name} already holds session {session_id}")

    discounts = dict(ctx.get(disc_res))
    ctx.when_all(list(prices.values()))

    quantity = {(sec, i_id): qty for sec, i_id, qty in orders}
    for sec, fut in prices.items():
        for i_id, price, min_price in ctx.get(fut):
            ctx.insert("cart_purchases", (sec, session_id, i_id, quantity[(sec, i_id)],
                                          discounts.get(i_id, 0.0), min_price, price))
    return session_id


def checkout(ctx, c_session_id):
    """Settle a session across its sections; records the visit once this commits."""
    info = ctx.scan("cart_info")
    lines = ctx.scan("cart_purchases", where={"session_id": c_session_id})
    if not info or not lines:
        raise UnknownSession(f"cart {ctx.actor_name} has no items in session {c_session_id}")
    cart = info[0]
    c_time = ctx.now()

    by_section: dict[str, list[tuple]] = {}
    for ln in lines:
        by_section.setdefault(ln.sec_id, []).append(
            (ln.i_id, ln.i_quantity, ln.i_price, ln.i_fixed_disc, ln.i_min_price))
    per_section = ctx.bulk_invoke(
        STORE_SECTION, list(by_section), "get_variable_discount_update_inventory",
        lambda sec: (cart.c_id, c_time, by_section[sec]))
    amt, fixed, var = ctx.aggregate(per_section, [("SUM", "amount"), ("SUM", "fixed_disc"),
                                                  ("SUM", "var_disc")])
    ctx.detach((CUSTOMER, str(cart.c_id)), "add_store_visit",
               cart.store_id, c_time, amt, fixed, var,
               trigger=Trigger.ON_COMMIT, delivery=Delivery.EXACTLY_ONCE)
    return amt


# ---------------------------------------------------------------------------
# registration and loading
# ---------------------------------------------------------------------------

def actor_types() -> list[ActorTypeDescriptor]:
    totals = (("amount", "float"), ("fixed_disc", "float"), ("var_disc", "float"))
    return [
        ActorTypeDescriptor(CUSTOMER, [
            MethodDescriptor("get_customer_info", get_customer_info, (), "tuple",
                             result_columns=(("cust_name", "string"), ("c_g_id", "int"))),
            MethodDescriptor("add_store_visit", add_store_visit,
                             ("int", "timestamp", "float", "float", "float"), "void"),
            MethodDescriptor("authenticate", authenticate, ("string",), "bool", encrypted=True),
        ], durable=True, state_schemas=[CUSTOMER_INFO, STORE_VISITS, PASSWD]),
        ActorTypeDescriptor(GROUP_MANAGER, [
            MethodDescriptor("get_fixed_discounts", get_fixed_discounts, ("list<int>",),
                             "list<tuple>", result_columns=(("i_id", "int"), ("fixed_disc", "float"))),
        ], durable=True, state_schemas=[DISCOUNTS]),
        ActorTypeDescriptor(STORE_SECTION, [
            MethodDescriptor("get_price", get_price, ("list<int>",), "list<tuple>",
                             result_columns=(("i_id", "int"), ("i_price", "float"),
                                             ("i_min_price", "float"))),
            MethodDescriptor("get_variable_discount_update_inventory",
                             get_variable_discount_update_inventory,
                             ("int", "timestamp", "list<tuple>"), "tuple", result_columns=totals),
        ], durable=True, state_schemas=[INVENTORY, PURCHASE_HISTORY]),
        ActorTypeDescriptor(CART, [
            MethodDescriptor("add_items", add_items, ("list<order>", "int"), "int"),
            MethodDescriptor("checkout", checkout, ("int",), "float"),
        ], durable=False, state_schemas=[CART_INFO, CART_PURCHASES]),
    ]


def register(engine: Engine, settings: SmartMartSettings | None = None) -> None:
    for descriptor in actor_types():
        engine.register_actor_type(descriptor)
    engine.settings["smartmart"] = settings or SmartMartSettings()


@dataclass(frozen=True)
class StoreConfig:
    """Size and seed of a synthetic store."""

    sections: int = 8
    items_per_section: int = 500
    history_rows_per_item: int = 30
    carts: int = 1
    customers_per_cart: int = 30
    group_managers: int = 10
    initial_quantity: int = 10000
    max_history_quantity: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("sections", "items_per_section", "carts", "customers_per_cart",
                     "group_managers", "max_history_quantity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.history_rows_per_item < 0 or self.initial_quantity < 0:
            raise ConfigError("history rows and initial quantity must be >= 0")

    @classmethod
    def full_scale(cls, **kw) -> "StoreConfig":
        return cls(**{"items_per_section": 10000, "history_rows_per_item": 300, **kw})

    @property
    def customers(self) -> int:
        return self.customers_per_cart * self.carts

    def section_names(self) -> list[str]:
        return [str(100 * (s + 1)) for s in range(self.sections)]

    def item_ids(self, section_index: int) -> range:
        start = section_index * self.items_per_section + 1
        return range(start, start + self.items_per_section)

    def customer_names(self) -> list[str]:
        return [str(c) for c in range(1, self.customers + 1)]

    def cart_names(self) -> list[str]:
        return [str(c) for c in range(1, self.carts + 1)]

    def group_names(self) -> list[str]:
        return [str(g) for g in range(self.group_managers)]


def creation_script(cfg: StoreConfig) -> str:
    def stmt(type_name, names):
        return f"CREATE ACTORS OF TYPE {type_name} WITH NAMES IN ({', '.join(names)});"
    return "\n".join([
        stmt(STORE_SECTION, cfg.section_names()),
        stmt(GROUP_MANAGER, cfg.group_names()),
        stmt(CUSTOMER, cfg.customer_names()),
        stmt(CART, cfg.cart_names()),
    ]) + "\n"


def load_store(engine: Engine, cfg: StoreConfig) -> None:
    """Create every actor and fill it with seeded synthetic data.

    Rows are loaded as committed state (not logged); recovery reruns this
    loader with the same seed before replaying the log.
    """
    from .security.admin import apply_script

    if engine.list_actors():
        raise ConfigError("load_store needs an engine without actors")
    if "smartmart" not in engine.settings:
        register(engine)
    apply_script(engine, creation_script(cfg))
    rng = random.Random(cfg.seed)

    all_items = []
    for s, sec in enumerate(cfg.section_names()):
        inv = engine.relation((STORE_SECTION, sec), "inventory")
        hist = engine.relation((STORE_SECTION, sec), "purchase_history")
        for i_id in cfg.item_ids(s):
            price = round(rng.uniform(1.0, 100.0), 2)
            min_price = round(price * rng.uniform(0.5, 0.9), 2)
            var_budget = round(price * rng.uniform(0.0, 0.2), 2)
            inv.load((i_id, price, min_price, cfg.initial_quantity, var_budget))
            all_items.append((i_id, price))
        for i_id in cfg.item_ids(s):
            for r in range(cfg.history_rows_per_item):
                # history predates any runtime clock value (which starts above 0)
                t = -((cfg.history_rows_per_item - r) * 1000) + rng.randrange(1000)
                hist.load((i_id, t, rng.randint(1, cfg.max_history_quantity),
                           rng.randint(1, cfg.customers)))

    for g in cfg.group_names():
        disc = engine.relation((GROUP_MANAGER, g), "discounts")
        for i_id, price in all_items:
            disc.load((i_id, round(price * rng.uniform(0.0, 0.1), 2)))

    for c in cfg.customer_names():
        engine.relation((CUSTOMER, c), "customer_info").load(
            (f"customer-{c}", rng.randrange(cfg.group_managers)))
        engine.relation((CUSTOMER, c), "passwd").load((f"pw-{c}",))


def random_order(rng: random.Random, cfg: StoreConfig, sections_per_order: int,
                 items_per_section_order: int, max_quantity: int = 4) -> list[tuple[str, int, int]]:
    """Uniformly chosen distinct sections, distinct items per section, quantities 1..max."""
    if not 1 <= sections_per_order <= cfg.sections:
        raise ConfigError("sections_per_order must be within 1..sections")
    if not 1 <= items_per_section_order <= cfg.items_per_section:
        raise ConfigError("items_per_section_order must be within 1..items_per_section")
    names = cfg.section_names()
    order = []
    for s in sorted(rng.sample(range(cfg.sections), sections_per_order)):
        for i_id in rng.sample(cfg.item_ids(s), items_per_section_order):
            order.append((names[s], i_id, rng.randint(1, max_quantity)))
    return order


def with_settings(engine: Engine, **changes) -> SmartMartSettings:
    engine.settings["smartmart"] = replace(engine.settings["smartmart"], **changes)
    return engine.settings["smartmart"]
