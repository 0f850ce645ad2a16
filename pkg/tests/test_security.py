from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actordb import (AccessDenied, ActorTypeDescriptor, AdminSyntaxError, Engine, LogicalClock,
                     MethodDescriptor, RuleConflict)
from actordb import smartmart as sm
from actordb.errors import DuplicateActor, UnknownActor, UnknownMethod, UnknownType
from actordb.security import (ALL, AccessRuleSet, CallFrame, CreateActors, DropActors, Grant,
                              Pattern, RevokeAll, apply_script, format_script,
                              parse_admin_script, stats_to_json, verify)

from conftest import make_kv_engine, small_store


def smartmart_engine():
    engine = Engine(clock=LogicalClock(), detached="manual")
    sm.register(engine)
    return engine


def rules_from(script: str) -> AccessRuleSet:
    return AccessRuleSet().apply(parse_admin_script(script))


# -- parsing -----------------------------------------------------------------

def test_lifecycle_script_parses():
    cmds = parse_admin_script(sm.LIFECYCLE_EXAMPLE)
    assert cmds == [CreateActors("Customer", ("22", "32")), CreateActors("Cart", ("42", "43")),
                    DropActors("Cart", ("42",))]


def test_access_script_parses():
    cmds = parse_admin_script(sm.ACCESS_RULES_EXAMPLE)
    assert len(cmds) == 4
    assert cmds[0] == RevokeAll()
    assert cmds[1].subject == Pattern("Cart", ("add_items",))
    assert [o.type_name for o in cmds[1].objects] == ["Store_Section", "Customer", "Group_Manager"]
    assert cmds[3] == Grant(Pattern("Cart", None, ("12", "13", "14")),
                            (Pattern("Store_Section", None, ("100", "200")),))


def test_keywords_case_insensitive_and_comments():
    cmds = parse_admin_script("-- set up\ncreate actors of type Cart with names in (1);")
    assert cmds == [CreateActors("Cart", ("1",))]


@pytest.mark.parametrize("script,line,column", [
    ("CREATE ACTORS TYPE Cart WITH NAMES IN (1);", 1, 15),
    ("CREATE ACTORS OF TYPE Cart WITH NAMES IN (1)", 1, 45),
    ("GRANT ACTORS OF TYPE Cart\n ACCESS ACTORS OF TYPE Customer;", 2, 9),
    ("DROP ACTORS OF TYPE Cart WITH NAMES IN ();", 1, 41),
    ("CREATE ACTORS OF TYPE Cart WITH NAMES IN (1) $;", 1, 46),
])
def test_syntax_errors_report_position(script, line, column):
    with pytest.raises(AdminSyntaxError) as info:
        parse_admin_script(script)
    assert (info.value.line, info.value.column) == (line, column)
    assert f"line {line}, column {column}" in str(info.value)


def test_syntax_error_lists_expected_tokens():
    with pytest.raises(AdminSyntaxError) as info:
        parse_admin_script("SELECT 1;")
    assert set(info.value.expected) == {"CREATE", "DROP", "GRANT", "REVOKE"}


def test_example_scripts_round_trip():
    for script in (sm.LIFECYCLE_EXAMPLE, sm.ACCESS_RULES_EXAMPLE):
        cmds = parse_admin_script(script)
        assert parse_admin_script(format_script(cmds)) == cmds


ident = st.one_of(st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,8}", fullmatch=True),
                  st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1,
                          max_size=6))
names = st.lists(ident, min_size=1, max_size=4).map(tuple)
pattern = st.builds(Pattern, st.one_of(st.just(ALL), ident),
                    st.one_of(st.none(), names), st.one_of(st.none(), names))
command = st.one_of(
    st.builds(CreateActors, ident, names),
    st.builds(DropActors, ident, names),
    st.just(RevokeAll()),
    st.builds(Grant, pattern, st.lists(pattern, min_size=1, max_size=3).map(tuple)),
)


@settings(max_examples=200)
@given(st.lists(command, max_size=6))
def test_format_then_parse_is_identity(cmds):
    assert parse_admin_script(format_script(cmds)) == cmds


def test_keyword_named_actor_is_quoted():
    cmds = [CreateActors("Cart", ("all", "it's"))]
    assert parse_admin_script(format_script(cmds)) == cmds


# -- decisions ---------------------------------------------------------------

def frame(type_name, method, name="1"):
    return CallFrame(type_name, method, name)


def test_before_revoke_everything_is_allowed():
    rules = AccessRuleSet()
    assert rules.allows(frame("Group_Manager", "x"), frame("Store_Section", "get_price"))


def test_example_rules_decisions():
    rules = rules_from(sm.ACCESS_RULES_EXAMPLE)
    # rule 1: add_items may price, profile and discount
    assert rules.allows(frame("Cart", "add_items", "50"), frame("Store_Section", "get_price", "300"))
    assert rules.allows(frame("Cart", "add_items"), frame("Customer", "get_customer_info"))
    assert rules.allows(frame("Cart", "add_items"), frame("Group_Manager", "get_fixed_discounts"))
    assert not rules.allows(frame("Cart", "add_items"), frame("Customer", "add_store_visit"))
    # rule 2: checkout may settle and record the visit
    assert rules.allows(frame("Cart", "checkout"),
                        frame("Store_Section", "get_variable_discount_update_inventory"))
    assert rules.allows(frame("Cart", "checkout"), frame("Customer", "add_store_visit"))
    assert not rules.allows(frame("Cart", "checkout"), frame("Store_Section", "get_price"))
    # rule 3: carts 12-14 only reach sections 100 and 200
    assert rules.allows(frame("Cart", "add_items", "12"), frame("Store_Section", "get_price", "100"))
    assert not rules.allows(frame("Cart", "add_items", "12"),
                            frame("Store_Section", "get_price", "300"))
    assert rules.allows(frame("Cart", "add_items", "12"), frame("Customer", "get_customer_info"))
    # nobody else
    assert not rules.allows(frame("Group_Manager", "get_fixed_discounts"),
                            frame("Store_Section", "get_price", "100"))
    # external clients are never restricted
    assert rules.allows(None, frame("Store_Section", "get_price"))


def test_static_verify_of_example_rules():
    assert verify(rules_from(sm.ACCESS_RULES_EXAMPLE), sm.CALL_GRAPH) == []
    only_revoke = rules_from("REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;")
    assert verify(only_revoke, sm.CALL_GRAPH) == sm.CALL_GRAPH


def test_method_level_grants_are_monotone():
    base = "REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;\n"
    g1 = "GRANT ACTORS OF TYPE Cart ACCESS TO ACTORS OF TYPE Customer WITH METHODS IN (a);\n"
    g2 = "GRANT ACTORS OF TYPE Cart ACCESS TO ACTORS OF TYPE Customer WITH METHODS IN (b);\n"
    small, big = rules_from(base + g1), rules_from(base + g1 + g2)
    for m in ("a", "b", "c"):
        call = (frame("Cart", "x"), frame("Customer", m))
        assert not small.allows(*call) or big.allows(*call)
    assert big.allows(frame("Cart", "x"), frame("Customer", "b"))


def test_reapplying_rules_is_idempotent():
    once = rules_from(sm.ACCESS_RULES_EXAMPLE)
    twice = once.apply(parse_admin_script(sm.ACCESS_RULES_EXAMPLE))
    assert once == twice


def test_name_scoped_grant_without_method_grant_conflicts():
    with pytest.raises(RuleConflict):
        rules_from("REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;\n"
                   "GRANT ACTORS OF TYPE Cart WITH NAMES IN (1) "
                   "ACCESS TO ACTORS OF TYPE Store_Section WITH NAMES IN (100);")


def test_all_pattern_with_methods_conflicts():
    with pytest.raises(RuleConflict):
        rules_from("GRANT ACTORS OF TYPE ALL WITH METHODS IN (x) ACCESS TO ACTORS OF TYPE Cart;")


# -- applying scripts to an engine ---------------------------------------------

def test_lifecycle_script_applies():
    engine = smartmart_engine()
    apply_script(engine, sm.LIFECYCLE_EXAMPLE)
    assert [str(a) for a in engine.list_actors()] == ["Cart/43", "Customer/22", "Customer/32"]
    engine.close()


def test_unknown_type_rejected_without_partial_application():
    engine = smartmart_engine()
    script = ("CREATE ACTORS OF TYPE Cart WITH NAMES IN (1);\n"
              "CREATE ACTORS OF TYPE Basket WITH NAMES IN (2);")
    with pytest.raises(UnknownType):
        apply_script(engine, script)
    assert engine.list_actors() == []
    with pytest.raises(UnknownMethod):
        apply_script(engine, "REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;\n"
                             "GRANT ACTORS OF TYPE Cart WITH METHODS IN (fly) "
                             "ACCESS TO ACTORS OF TYPE Customer;")
    assert not engine.rules.restricted
    engine.close()


def test_lifecycle_errors():
    engine = smartmart_engine()
    apply_script(engine, "CREATE ACTORS OF TYPE Cart WITH NAMES IN (1);")
    with pytest.raises(DuplicateActor):
        apply_script(engine, "CREATE ACTORS OF TYPE Cart WITH NAMES IN (1);")
    with pytest.raises(UnknownActor):
        apply_script(engine, "DROP ACTORS OF TYPE Cart WITH NAMES IN (1, 2);")
    assert len(engine.list_actors()) == 1
    engine.close()


def test_deny_by_default_after_revoke_aborts_and_audits():
    engine = make_kv_engine()
    engine.register_actor_type(ActorTypeDescriptor("Caller", [
        MethodDescriptor("poke", lambda ctx: ctx.actors("KV")["a"].get(1).get())]))
    engine.create_actors("Caller", ["x"])
    assert engine.call(("Caller", "x"), "poke") is None
    apply_script(engine, "REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;")
    before = len([r for r in engine.audit.tail(1000) if r.decision == "deny"])
    out = engine.execute(("Caller", "x"), "poke")
    assert isinstance(out.error, AccessDenied)
    assert out.result.reason.value == "AccessDenied"
    denies = [r for r in engine.audit.tail(1000) if r.decision == "deny"]
    assert len(denies) == before + 1
    assert denies[-1].caller == CallFrame("Caller", "poke", "x")
    assert denies[-1].target == CallFrame("KV", "get", "a")
    assert engine.stats.snapshot()[engine.actor(("Caller", "x")).address].denied == 1
    # external clients still get through
    assert engine.call(("KV", "a"), "get", 1) is None
    engine.close()


def test_smartmart_runs_under_example_rules():
    engine, _ = small_store()
    apply_script(engine, sm.ACCESS_RULES_EXAMPLE)
    cart = (sm.CART, "1")
    session = engine.call(cart, "add_items", [("100", 1, 1)], 1)
    assert engine.call(cart, "checkout", session) > 0
    denied = engine.check_access(frame(sm.GROUP_MANAGER, "get_fixed_discounts", "0"),
                                 frame(sm.STORE_SECTION, "get_price", "100"))
    assert not denied
    last = engine.audit.tail(1)[0]
    assert last.decision == "deny" and last.caller.type_name == sm.GROUP_MANAGER
    engine.close()


# -- monitoring --------------------------------------------------------------

def test_fresh_engine_has_empty_stats_and_audit():
    engine = smartmart_engine()
    assert engine.stats.snapshot() == {}
    assert engine.audit.tail(5) == []
    assert engine.audit.tail(0) == []
    engine.close()


def test_stats_after_checkouts():
    engine, cfg = small_store(carts=42)
    cart = (sm.CART, "42")
    for i in range(10):
        session = engine.call(cart, "add_items", [("100", 1 + i % 5, 1)], 1)
        engine.call(cart, "checkout", session)
    engine.process_detached_queue()
    stats = engine.stats.snapshot()
    cart_stats = stats[engine.actor(cart).address]
    assert cart_stats.commits == 20
    assert cart_stats.commits_by_method == {"add_items": 10, "checkout": 10}
    assert cart_stats.abort_total == 0
    assert cart_stats.invocations == 20
    section = stats[engine.actor((sm.STORE_SECTION, "100")).address]
    assert section.commits_by_method["get_variable_discount_update_inventory"] == 10
    customer = stats[engine.actor((sm.CUSTOMER, "1")).address]
    assert customer.commits_by_method["add_store_visit"] == 10
    payload = json.loads(stats_to_json(stats))
    assert payload["Cart/42"]["commits"] == 20
    engine.close()


def test_abort_counted_per_reason():
    engine = make_kv_engine()
    engine.execute(("KV", "a"), "fail")
    st_a = engine.stats.snapshot()[engine.actor(("KV", "a")).address]
    assert st_a.aborts == {"ApplicationError": 1} and st_a.commits == 0
    engine.close()


def test_audit_export(tmp_path):
    engine = make_kv_engine(audit_allows=True)
    engine.call(("KV", "a"), "put", 1, 1)
    path = tmp_path / "audit.jsonl"
    assert engine.audit.export_jsonl(path) >= 1
    first = json.loads(path.read_text().splitlines()[0])
    assert first["caller"] == "external" and first["decision"] == "allow"
    engine.close()
