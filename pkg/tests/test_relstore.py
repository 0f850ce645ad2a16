from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actordb import ActorAddress
from actordb.errors import (DuplicateRelation, InvalidSchema, TypeMismatch, UnknownColumn)
from actordb.relstore import (ActorState, Relation, Schema, aggregate, create_relation, delete,
                              insert, list_to_relation, load_csv, parse_csv_name,
                              relation_to_list, scan, summarize, update, window_stats)
from actordb.txn import TxnManager

OWNER = ActorAddress("T", "1")
INVENTORY = Schema.of("inventory",
                      "i_id int, i_price float, i_min_price float, i_quantity int, i_var_disc float",
                      indexes=["i_id"])
HISTORY = Schema.of("purchase_history", "i_id int, time timestamp, i_quantity int, c_id int",
                    indexes=["i_id"])


def ctx():
    return TxnManager().begin_root()


def history(quantities_newest_first, i_id=7):
    rel = Relation(HISTORY, owner=OWNER)
    n = len(quantities_newest_first)
    for age, q in enumerate(reversed(quantities_newest_first)):
        rel.load((i_id, age - n, q, 1))
    return rel


# -- schemas and relations ---------------------------------------------------

def test_create_relation_and_duplicate():
    state = ActorState(OWNER)
    rel = create_relation(state, INVENTORY)
    assert rel.relation_version == 0 and len(rel) == 0
    with pytest.raises(DuplicateRelation):
        create_relation(state, INVENTORY)


def test_schema_invariants():
    with pytest.raises(InvalidSchema):
        Schema("empty", ())
    with pytest.raises(InvalidSchema):
        Schema.of("dup", "a int, a float")
    with pytest.raises(InvalidSchema):
        Schema.of("badtype", "a decimal")


def test_insert_type_checks():
    rel = Relation(INVENTORY, owner=OWNER)
    c = ctx()
    with pytest.raises(TypeMismatch):
        insert(c, rel, (1, 2.0, 1.0))
    with pytest.raises(TypeMismatch):
        insert(c, rel, ("x", 2.0, 1.0, 5, 0.1))


def test_read_your_writes():
    rel = Relation(HISTORY, owner=OWNER)
    c = ctx()
    insert(c, rel, (1, 10, 3, 9))
    assert [tuple(r) for r in scan(c, rel)] == [(1, 10, 3, 9)]
    assert scan(ctx(), rel) == []  # not visible to others before commit
    update(c, rel, {"i_id": 1}, {"i_quantity": 4})
    assert scan(c, rel, columns=("i_quantity",)) == [(4,)]


def test_scan_empty_and_unknown_column():
    rel = Relation(INVENTORY, owner=OWNER)
    assert scan(ctx(), rel) == []
    with pytest.raises(UnknownColumn):
        scan(ctx(), rel, {"nope": 1})
    with pytest.raises(UnknownColumn):
        scan(ctx(), rel, columns=("nope",))


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 9)), max_size=40),
       st.sets(st.integers(0, 30), max_size=8))
def test_set_predicate_matches_linear_filter(rows, keys):
    rel = Relation(Schema.of("r", "k int, v int", indexes=["k"]), owner=OWNER)
    for r in rows:
        rel.load(r)
    got = [tuple(r) for r in scan(ctx(), rel, {"k": set(keys)})]
    assert got == [r for r in rows if r[0] in keys]


def test_update_counts_and_last_write_wins():
    rel = Relation(INVENTORY, owner=OWNER)
    rid = rel.load((1, 10.0, 5.0, 20, 1.0))
    v0 = rel.records[rid].version
    c = ctx()
    assert update(c, rel, {"i_id": 99}, {"i_quantity": 1}) == 0
    assert not c.txn.writes
    assert update(c, rel, {"i_id": 1}, {"i_quantity": 19}) == 1
    assert update(c, rel, {"i_id": 1}, {"i_quantity": lambda r: r.i_quantity - 1}) == 1
    assert c.txn.manager.commit(c).committed
    assert rel.records[rid].values.i_quantity == 18
    assert rel.records[rid].version == v0 + 1
    with pytest.raises(TypeMismatch):
        update(ctx(), rel, {"i_id": 1}, {"i_quantity": "many"})
    with pytest.raises(UnknownColumn):
        update(ctx(), rel, {"i_id": 1}, {"nope": 1})


def test_delete_bumps_relation_version():
    rel = Relation(HISTORY, owner=OWNER)
    rel.load((1, 1, 1, 1))
    before = rel.relation_version
    c = ctx()
    assert delete(c, rel, {"i_id": 1}) == 1
    assert scan(c, rel) == []
    assert c.txn.manager.commit(c).committed
    assert len(rel) == 0 and rel.relation_version > before


def test_committed_versions_increase():
    rel = Relation(HISTORY, owner=OWNER)
    mgr = TxnManager()
    seen = []
    for i in range(3):
        c = mgr.begin_root()
        insert(c, rel, (i, i, 1, 1))
        mgr.commit(c)
        seen.append(rel.relation_version)
    assert seen == sorted(set(seen))


def test_aggregates():
    rel = Relation(Schema.of("totals", "name string, amount float"), owner=OWNER)
    rel.load(("100", 21.0))
    rel.load(("200", 14.0))
    assert aggregate(ctx(), rel, [("SUM", "amount")]) == (35.0,)
    assert aggregate(ctx(), rel, [("AVG", "amount")], where={"name": "100"}) == (21.0,)
    empty = Relation(Schema.of("e", "x float"), owner=OWNER)
    assert aggregate(ctx(), empty, [("COUNT", "x"), ("SUM", "x"), ("AVG", "x")]) == (0, None, None)
    assert aggregate(ctx(), rel, [("SUM", lambda r: r.amount * 2)]) == (70.0,)
    with pytest.raises(UnknownColumn):
        aggregate(ctx(), rel, [("SUM", "nope")])


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), max_size=30), st.floats(-1e6, 1e6))
def test_sum_equals_fold_over_scan(values, cut):
    rel = Relation(Schema.of("r", "x float"), owner=OWNER)
    for v in values:
        rel.load((v,))
    c = ctx()
    (got,) = aggregate(c, rel, [("SUM", "x")], pred=lambda r: r.x > cut)
    rows = [r.x for r in scan(c, rel, pred=lambda r: r.x > cut)]
    if not rows:
        assert got is None
    else:
        assert got == pytest.approx(math.fsum(rows), rel=1e-12, abs=1e-9)


# -- window statistics -------------------------------------------------------

def test_window_identical_values():
    (w,) = window_stats(ctx(), history([10, 10, 10]), "i_id", "time", "i_quantity", 3, [7])
    assert (w.mean, w.sample_stddev, w.window_count) == (10, 0, 3)


def test_window_singleton():
    (w,) = window_stats(ctx(), history([8]), "i_id", "time", "i_quantity", 150, [7])
    assert (w.mean, w.sample_stddev, w.window_count) == (8, 0, 1)


def test_window_takes_newest_rows():
    (w,) = window_stats(ctx(), history([12, 10, 14]), "i_id", "time", "i_quantity", 2, [7])
    assert w.mean == pytest.approx(11.0)
    assert w.sample_stddev == pytest.approx(math.sqrt(2), abs=1e-12)
    assert w.window_count == 2


def test_window_ties_broken_by_record_id_and_missing_keys():
    rel = Relation(HISTORY, owner=OWNER)
    rel.load((7, 5, 1, 1))
    rel.load((7, 5, 9, 1))  # same time, inserted later -> more recent
    a, b = window_stats(ctx(), rel, "i_id", "time", "i_quantity", 1, [7, 8])
    assert a.mean == 9
    assert b.window_count == 0


def test_window_includes_own_uncommitted_rows():
    rel = history([1, 1])
    c = ctx()
    insert(c, rel, (7, 100, 4, 1))
    (w,) = window_stats(c, rel, "i_id", "time", "i_quantity", 1, [7])
    assert w.mean == 4


def test_window_rejects_bad_arguments():
    rel = history([1])
    with pytest.raises(ValueError):
        window_stats(ctx(), rel, "i_id", "time", "i_quantity", 0, [7])
    with pytest.raises(UnknownColumn):
        window_stats(ctx(), rel, "i_id", "when", "i_quantity", 3, [7])


@given(st.lists(st.integers(1, 50), min_size=0, max_size=25), st.integers(1, 30),
       st.floats(0.01, 100))
def test_window_scale_invariance(qs, k, lam):
    base = summarize([float(q) for q in qs[:k]])
    scaled = summarize([q * lam for q in qs[:k]])
    assert scaled.mean == pytest.approx(base.mean * lam, rel=1e-9, abs=1e-9)
    assert scaled.sample_stddev == pytest.approx(base.sample_stddev * lam, rel=1e-9, abs=1e-9)


# -- conversions and loading -------------------------------------------------

ORDER = Schema.of("ord_items", "i_id int, i_quantity int, i_price float")


def test_list_relation_round_trip():
    items = [(1, 2, 3.5), (4, 1, 2.0), (9, 7, 1.25)]
    assert relation_to_list(list_to_relation(items, ORDER)) == items
    assert relation_to_list(list_to_relation([], ORDER)) == []
    with pytest.raises(TypeMismatch):
        list_to_relation([(1, 2)], ORDER)


def test_list_join_matches_loop_lookup():
    inv = Relation(INVENTORY, owner=OWNER)
    for i in range(1, 6):
        inv.load((i, 10.0 * i, 5.0, 100, 1.0))
    items = list_to_relation([(2, 1, 0.0), (5, 3, 0.0)], ORDER)
    c = ctx()
    joined = [(o.i_id, o.i_quantity, r.i_price) for o in scan(c, items)
              for r in scan(c, inv, {"i_id": o.i_id})]
    looped = []
    for i_id, q, _ in relation_to_list(items):
        for r in relation_to_list(inv):
            if r[0] == i_id:
                looped.append((i_id, q, r[1]))
    assert joined == looped


def test_encryption_flag_is_inert():
    plain = Relation(Schema.of("p", "x string"), owner=OWNER)
    secret = Relation(Schema.of("p", "x string", encrypted=True), owner=OWNER)
    for rel in (plain, secret):
        rel.load(("a",))
        rel.load(("b",))
    assert [tuple(r) for r in scan(ctx(), plain)] == [tuple(r) for r in scan(ctx(), secret)]


def test_csv_loader(tmp_path):
    path = tmp_path / "Store_Section.100.inventory.csv"
    path.write_text("i_id,i_price,i_min_price,i_quantity,i_var_disc\n1,9.5,4.0,10,0.5\n")
    assert parse_csv_name(path) == ("Store_Section", "100", "inventory")
    rel = Relation(INVENTORY, owner=OWNER)
    assert load_csv(rel, path) == 1
    assert tuple(relation_to_list(rel)[0]) == (1, 9.5, 4.0, 10, 0.5)
    bad = tmp_path / "Store_Section.100.inventory2.csv"
    bad.write_text("i_id,price\n1,2\n")
    with pytest.raises(TypeMismatch):
        load_csv(Relation(INVENTORY, owner=OWNER), bad)
