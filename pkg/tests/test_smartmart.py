from __future__ import annotations

import math
import random
import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from actordb import Engine, LogicalClock
from actordb import smartmart as sm
from actordb.errors import ConfigError, SessionAlreadyOpen, UnknownItem, UnknownSession
from actordb.relstore import summarize
from actordb.security import apply_script

from conftest import small_store


def stats_of(window):
    return summarize([float(q) for q in window])


# -- the variable discount ---------------------------------------------------

@pytest.mark.parametrize("q,window,vd,c,expected", [
    (10, [10, 10, 10, 10], 0.5, 1.0, 0.5),
    (20, [10, 10], 0.5, 2.0, 1.0),
    (12, [10, 14, 12], 1.0, 2.0, 0.75),
])
def test_variable_discount_examples(q, window, vd, c, expected):
    assert sm.variable_discount(q, stats_of(window), vd, c) == pytest.approx(expected, abs=1e-12)


def test_variable_discount_empty_window_is_zero():
    assert sm.variable_discount(3, stats_of([]), 0.5, 1.0) == 0.0


def test_variable_discount_needs_positive_quantity():
    with pytest.raises(ValueError):
        sm.variable_discount(0, stats_of([1]), 0.5, 1.0)


@given(st.integers(1, 50), st.lists(st.integers(1, 50), min_size=1, max_size=20),
       st.floats(0.0, 10.0), st.floats(0.0, 5.0), st.floats(0.01, 100.0))
def test_variable_discount_scale_invariance(q, window, vd, c, lam):
    base = sm.variable_discount(q, stats_of(window), vd, c)
    scaled = sm.variable_discount(q * lam, summarize([w * lam for w in window]), vd, c)
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_variable_discount_against_statistics_module():
    rng = random.Random(11)
    for _ in range(200):
        window = [rng.randint(1, 20) for _ in range(rng.randint(2, 15))]
        q, vd, c = rng.randint(1, 20), rng.uniform(0, 5), rng.uniform(0, 3)
        ref = q / (statistics.fmean(window) + c * statistics.stdev(window)) * vd
        assert sm.variable_discount(q, stats_of(window), vd, c) == pytest.approx(ref, abs=1e-9)


# -- line pricing ------------------------------------------------------------

def test_line_totals_discounted():
    t = sm.line_totals(10.0, 1.0, 2.0, 5.0, 3)
    assert (t.amount, t.fixed_disc, t.var_disc) == (21.0, 3.0, 6.0)


def test_line_totals_clamped():
    t = sm.line_totals(10.0, 4.0, 8.0, 5.0, 1)
    assert (t.amount, t.fixed_disc, t.var_disc) == (5.0, 4.0, 1.0)


def test_threshold_guard_can_undercut_min_price_and_floor_guard_cannot():
    threshold = sm.line_totals(10.0, 4.0, 2.0, 5.0, 1, "threshold")
    floor = sm.line_totals(10.0, 4.0, 2.0, 5.0, 1, "floor")
    assert threshold.amount == 4.0  # 10 > 4 + 2, so no clamp although 4 < 5
    assert floor.amount == 5.0


@given(st.floats(1, 100), st.floats(0, 1), st.floats(0, 50), st.floats(0, 1), st.integers(1, 9))
def test_floor_guard_keeps_unit_revenue_above_min_price(price, min_frac, vdisc, fixed_frac, qty):
    min_price = price * min_frac
    fixed = (price - min_price) * fixed_frac
    t = sm.line_totals(price, fixed, vdisc, min_price, qty, "floor")
    assert t.amount / qty >= min_price - 1e-9
    assert t.amount >= 0


def test_settings_validation():
    with pytest.raises(ConfigError):
        sm.SmartMartSettings(min_price_guard="never")
    with pytest.raises(ConfigError):
        sm.DiscountParams(k=0)
    with pytest.raises(ConfigError):
        sm.DiscountParams(c=-1.0)


# -- a hand-built store ------------------------------------------------------

def tiny_store(settings=None, quantity=100):
    """Sections 100 and 200 with items whose discounts are known in closed form.

    Item 1 (section 100): price 10, min 5, VD 2, history [3, 3, 3], fixed 1.
    Item 2 (section 200): price 8.5, min 1, VD 0.5, history [2, 2], fixed 1.
    Item 3 (section 200): price 4, min 2, VD 0, no history, no fixed discount.
    """
    engine = Engine(clock=LogicalClock(), detached="manual")
    sm.register(engine, settings or sm.SmartMartSettings(discount=sm.DiscountParams(c=1.0, k=5)))
    apply_script(engine, "CREATE ACTORS OF TYPE Store_Section WITH NAMES IN (100, 200);\n"
                         "CREATE ACTORS OF TYPE Group_Manager WITH NAMES IN (0);\n"
                         "CREATE ACTORS OF TYPE Customer WITH NAMES IN (1);\n"
                         "CREATE ACTORS OF TYPE Cart WITH NAMES IN (1);")
    inv100 = engine.relation((sm.STORE_SECTION, "100"), "inventory")
    inv200 = engine.relation((sm.STORE_SECTION, "200"), "inventory")
    inv100.load((1, 10.0, 5.0, quantity, 2.0))
    inv200.load((2, 8.5, 1.0, quantity, 0.5))
    inv200.load((3, 4.0, 2.0, quantity, 0.0))
    h100 = engine.relation((sm.STORE_SECTION, "100"), "purchase_history")
    for t in (-3, -2, -1):
        h100.load((1, t, 3, 1))
    h200 = engine.relation((sm.STORE_SECTION, "200"), "purchase_history")
    for t in (-2, -1):
        h200.load((2, t, 2, 1))
    disc = engine.relation((sm.GROUP_MANAGER, "0"), "discounts")
    disc.load((1, 1.0))
    disc.load((2, 1.0))
    engine.relation((sm.CUSTOMER, "1"), "customer_info").load(("alice", 0))
    engine.relation((sm.CUSTOMER, "1"), "passwd").load(("secret",))
    return engine


def rows(engine, addr, rel):
    return list(engine.relation(addr, rel).committed_rows().values())


CART = (sm.CART, "1")


def test_checkout_totals_sum_over_sections():
    engine = tiny_store()
    session = engine.call(CART, "add_items", [("100", 1, 3), ("200", 2, 2)], 1)
    assert engine.call(CART, "checkout", session) == pytest.approx(35.0)
    engine.process_detached_queue()
    (visit,) = rows(engine, (sm.CUSTOMER, "1"), "store_visits")
    store_id, _, amt, fixed, var = visit
    assert store_id == 1
    assert (amt, fixed, var) == pytest.approx((35.0, 5.0, 7.0), abs=1e-12)
    engine.close()


def test_section_method_returns_line_totals():
    engine = tiny_store()
    out = engine.call((sm.STORE_SECTION, "100"), "get_variable_discount_update_inventory",
                      1, 50, [(1, 3, 10.0, 1.0, 5.0)])
    assert out == pytest.approx((21.0, 3.0, 6.0))
    engine.close()


def test_insufficient_stock_is_replenished():
    engine = tiny_store(quantity=20)
    session = engine.call(CART, "add_items", [("100", 1, 30), ("200", 2, 5)], 1)
    engine.call(CART, "checkout", session)
    assert rows(engine, (sm.STORE_SECTION, "100"), "inventory")[0][3] == 10000
    assert rows(engine, (sm.STORE_SECTION, "200"), "inventory")[0][3] == 15
    engine.close()


def test_replenish_off_lets_stock_go_negative():
    engine = tiny_store(sm.SmartMartSettings(replenish=False), quantity=20)
    session = engine.call(CART, "add_items", [("100", 1, 30)], 1)
    engine.call(CART, "checkout", session)
    assert rows(engine, (sm.STORE_SECTION, "100"), "inventory")[0][3] == -10
    engine.close()


def test_get_price():
    engine = tiny_store()
    sec = (sm.STORE_SECTION, "200")
    assert sorted(tuple(r) for r in engine.call(sec, "get_price", [2, 3])) == \
        [(2, 8.5, 1.0), (3, 4.0, 2.0)]
    assert engine.call(sec, "get_price", []) == []
    assert [r[0] for r in engine.call(sec, "get_price", [3, 99])] == [3]
    engine.close()


def test_get_price_matches_inventory_scan():
    engine, cfg = small_store()
    ids = list(cfg.item_ids(0))[:4]
    got = sorted(tuple(r) for r in engine.call((sm.STORE_SECTION, "100"), "get_price", ids))
    inv = rows(engine, (sm.STORE_SECTION, "100"), "inventory")
    assert got == sorted((r[0], r[1], r[2]) for r in inv if r[0] in ids)
    assert len(got) == 4
    engine.close()


def test_customer_and_group_methods():
    engine = tiny_store()
    assert engine.call((sm.CUSTOMER, "1"), "get_customer_info") == ("alice", 0)
    assert sorted(engine.call((sm.GROUP_MANAGER, "0"), "get_fixed_discounts", [1, 2, 3])) == \
        [(1, 1.0), (2, 1.0)]
    assert engine.call((sm.CUSTOMER, "1"), "authenticate", "secret") is True
    assert engine.call((sm.CUSTOMER, "1"), "authenticate", "guess") is False
    engine.call((sm.CUSTOMER, "1"), "add_store_visit", 1, 5, 1.0, 0.0, 0.0)
    assert len(rows(engine, (sm.CUSTOMER, "1"), "store_visits")) == 1
    engine.close()


def test_pluggable_password_check():
    engine = tiny_store(sm.SmartMartSettings(validate_fn=lambda given, stored: given.upper() == stored.upper()))
    assert engine.call((sm.CUSTOMER, "1"), "authenticate", "SECRET")
    engine.close()


def test_get_fixed_discounts_three_items():
    engine, cfg = small_store()
    ids = list(cfg.item_ids(1))[:3]
    got = engine.call((sm.GROUP_MANAGER, "0"), "get_fixed_discounts", ids)
    assert sorted(i for i, _ in got) == ids
    engine.close()


# -- carts -------------------------------------------------------------------

def test_add_items_full_order_shape():
    engine, cfg = small_store(sections=8, items=10)
    order = sm.random_order(random.Random(1), cfg, 8, 4)
    before = engine.futures_created
    session = engine.call(CART, "add_items", order, 2)
    assert session == 1
    assert len(rows(engine, CART, "cart_purchases")) == 32
    # one future for the client's own call, then 8 price lookups + customer + discounts
    assert engine.futures_created - before == 1 + 8 + 2
    engine.close()


def test_add_items_rows_carry_prices_and_discounts():
    engine = tiny_store()
    engine.call(CART, "add_items", [("100", 1, 3), ("200", 3, 1)], 1)
    got = sorted(rows(engine, CART, "cart_purchases"))
    # (sec_id, session_id, i_id, i_quantity, i_fixed_disc, i_min_price, i_price)
    assert got == [("100", 1, 1, 3, 1.0, 5.0, 10.0), ("200", 1, 3, 1, 0.0, 2.0, 4.0)]
    assert rows(engine, CART, "cart_info") == [(1, 1, 1)]
    engine.close()


def test_empty_order_opens_empty_session():
    engine = tiny_store()
    assert engine.call(CART, "add_items", [], 1) == 1
    assert rows(engine, CART, "cart_purchases") == []
    assert engine.call(CART, "add_items", [("100", 1, 1)], 1) == 2
    engine.close()


def test_session_already_open():
    engine = tiny_store()
    engine.relation(CART, "cart_purchases").load(("100", 1, 1, 1, 0.0, 5.0, 10.0))
    out = engine.execute(CART, "add_items", [("100", 1, 1)], 1)
    assert isinstance(out.error, SessionAlreadyOpen)
    engine.close()


def test_bad_order_lines_rejected():
    engine = tiny_store()
    assert not engine.execute(CART, "add_items", [("100", 1, 0)], 1).committed
    assert not engine.execute(CART, "add_items", [("100", 1, 1), ("100", 1, 2)], 1).committed
    engine.close()


def test_checkout_unknown_session():
    engine = tiny_store()
    with pytest.raises(UnknownSession):
        engine.call(CART, "checkout", 1)
    engine.call(CART, "add_items", [], 1)
    with pytest.raises(UnknownSession):
        engine.call(CART, "checkout", 1)
    engine.close()


def test_store_visit_appears_only_after_commit():
    engine = tiny_store()
    session = engine.call(CART, "add_items", [("100", 1, 1)], 1)
    engine.call(CART, "checkout", session)
    assert rows(engine, (sm.CUSTOMER, "1"), "store_visits") == []  # still queued
    engine.process_detached_queue()
    assert len(rows(engine, (sm.CUSTOMER, "1"), "store_visits")) == 1
    engine.close()


def test_failing_section_aborts_whole_checkout():
    engine = tiny_store()
    cart_rows = engine.relation(CART, "cart_purchases")
    engine.relation(CART, "cart_info").load((1, 1, 1))
    cart_rows.load(("100", 1, 1, 1, 1.0, 5.0, 10.0))
    cart_rows.load(("200", 1, 77, 1, 0.0, 1.0, 2.0))  # not stocked
    before = engine.snapshot()
    with pytest.raises(UnknownItem):
        engine.call(CART, "checkout", 1)
    engine.process_detached_queue()
    assert engine.snapshot() == before
    engine.close()


def test_history_grows_by_order_lines_and_sessions_increase(store):
    engine, cfg = store
    rng = random.Random(5)
    sessions = []
    for _ in range(5):
        order = sm.random_order(rng, cfg, 2, 3)
        before = sum(len(rows(engine, (sm.STORE_SECTION, s), "purchase_history"))
                     for s in cfg.section_names())
        session = engine.call(CART, "add_items", order, 1)
        engine.call(CART, "checkout", session)
        after = sum(len(rows(engine, (sm.STORE_SECTION, s), "purchase_history"))
                    for s in cfg.section_names())
        assert after - before == len(order)
        sessions.append(session)
    assert sessions == sorted(set(sessions))


def test_checkout_amount_decomposes_over_sections(store):
    engine, cfg = store
    order = sm.random_order(random.Random(3), cfg, 2, 4)
    session = engine.call(CART, "add_items", order, 2)
    lines = rows(engine, CART, "cart_purchases")
    # recompute each section's share with the section method on a copy of the state
    shares = []
    for sec in cfg.section_names():
        items = [(r[2], r[3], r[6], r[4], r[5]) for r in lines if r[0] == sec]
        out = engine.execute((sm.STORE_SECTION, sec), "get_variable_discount_update_inventory",
                             1, 10**6, items, isolation="serializable")
        shares.append(out.value[0])
    engine.close()

    engine2, _ = small_store()
    session2 = engine2.call(CART, "add_items", order, 2)
    assert session2 == session
    amt = engine2.call(CART, "checkout", session2)
    assert amt == pytest.approx(math.fsum(shares), abs=1e-9)
    engine2.close()


def test_modes_produce_identical_cart_purchases():
    contents = []
    for mode in ("sync", "async"):
        engine, cfg = small_store(mode, sections=4, items=8)
        rng = random.Random(9)
        for _ in range(5):
            engine.call(CART, "add_items", sm.random_order(rng, cfg, 3, 2), 1)
        contents.append(rows(engine, CART, "cart_purchases"))
        engine.close()
    assert contents[0] == contents[1]


# -- loading -----------------------------------------------------------------

def test_load_store_counts():
    engine, cfg = small_store(sections=3, items=7, history=4, carts=2)
    counts = {}
    for (addr, rel), r in engine.snapshot().items():
        counts[(addr.type_name, rel)] = counts.get((addr.type_name, rel), 0) + len(r)
    assert counts[(sm.STORE_SECTION, "inventory")] == 21
    assert counts[(sm.STORE_SECTION, "purchase_history")] == 84
    assert counts[(sm.GROUP_MANAGER, "discounts")] == 3 * 21
    assert counts[(sm.CUSTOMER, "customer_info")] == 10
    assert counts[(sm.CART, "cart_info")] == 0
    assert len(engine.list_actors(sm.STORE_SECTION)) == 3
    engine.close()


def test_desk_scale_defaults():
    cfg = sm.StoreConfig()
    assert (cfg.sections, cfg.items_per_section, cfg.history_rows_per_item) == (8, 500, 30)
    big = sm.StoreConfig.full_scale()
    assert big.items_per_section * big.history_rows_per_item == 3_000_000  # per section
    assert big.sections == 8


def test_load_store_rejects_bad_config():
    with pytest.raises(ConfigError):
        sm.StoreConfig(carts=0)
    engine, cfg = small_store()
    with pytest.raises(ConfigError):
        sm.load_store(engine, cfg)  # already loaded
    engine.close()


def test_loaded_history_predates_runtime_clock():
    engine, cfg = small_store()
    hist = rows(engine, (sm.STORE_SECTION, "100"), "purchase_history")
    assert all(t < 0 for _, t, _, _ in hist)
    engine.close()


def test_random_order_shape_and_validation():
    cfg = sm.StoreConfig(sections=8, items_per_section=10)
    order = sm.random_order(random.Random(0), cfg, 8, 4)
    assert len(order) == 32
    assert len({(s, i) for s, i, _ in order}) == 32
    assert all(isinstance(s, str) and 1 <= q <= 4 for s, _, q in order)
    assert order == sm.random_order(random.Random(0), cfg, 8, 4)
    with pytest.raises(ConfigError):
        sm.random_order(random.Random(0), cfg, 9, 4)


def test_with_settings_changes_behaviour():
    engine = tiny_store()
    sm.with_settings(engine, min_price_guard="floor")
    assert engine.settings["smartmart"].min_price_guard == "floor"
    with pytest.raises(sm.ApplicationError):
        # a zero-quantity section call aborts whatever the guard
        engine.call((sm.STORE_SECTION, "100"), "get_variable_discount_update_inventory",
                    1, 1, [(1, 0, 10.0, 0.0, 5.0)])
    engine.close()
