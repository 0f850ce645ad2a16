from __future__ import annotations

import pytest

from actordb import (ActorTypeDescriptor, ApplicationError, Engine, LogicalClock,
                     MethodDescriptor, Schema)
from actordb import smartmart as sm

KV = Schema.of("kv", "k int, v int", indexes=["k"])


def kv_get(ctx, k):
    rows = ctx.scan("kv", where={"k": k})
    return rows[0].v if rows else None


def kv_put(ctx, k, v):
    if ctx.update("kv", where={"k": k}, set={"v": v}) == 0:
        ctx.insert("kv", (k, v))


def kv_add(ctx, k, d):
    rows = ctx.scan("kv", where={"k": k})
    kv_put(ctx, k, (rows[0].v if rows else 0) + d)
    return (k, (rows[0].v if rows else 0) + d)


def kv_fail(ctx, msg="boom"):
    raise ApplicationError(msg)


def kv_count(ctx):
    return len(ctx.scan("kv"))


def kv_types(durable: bool = True) -> list[ActorTypeDescriptor]:
    kv = ActorTypeDescriptor("KV", [
        MethodDescriptor("get", kv_get),
        MethodDescriptor("put", kv_put),
        MethodDescriptor("add", kv_add, result_columns=(("k", "int"), ("v", "int"))),
        MethodDescriptor("fail", kv_fail),
        MethodDescriptor("count", kv_count),
    ], durable=durable, state_schemas=[KV])
    return [kv]


def make_kv_engine(mode="sync", names=("a", "b", "c"), **cfg) -> Engine:
    cfg.setdefault("clock", LogicalClock())
    cfg.setdefault("detached", "manual")
    engine = Engine(mode=mode, **cfg)
    for t in kv_types():
        engine.register_actor_type(t)
    engine.create_actors("KV", list(names))
    return engine


@pytest.fixture(params=["sync", "async"])
def mode(request):
    return request.param


@pytest.fixture
def kv_engine(mode):
    engine = make_kv_engine(mode)
    yield engine
    engine.close()


def small_store(mode="sync", *, sections=2, items=10, history=5, carts=1, seed=7,
                settings: sm.SmartMartSettings | None = None, **engine_cfg):
    engine_cfg.setdefault("clock", LogicalClock())
    engine_cfg.setdefault("detached", "manual")
    engine = Engine(mode=mode, **engine_cfg)
    sm.register(engine, settings or sm.SmartMartSettings(discount=sm.DiscountParams(k=15)))
    cfg = sm.StoreConfig(sections=sections, items_per_section=items, history_rows_per_item=history,
                         carts=carts, customers_per_cart=5, group_managers=3, seed=seed)
    sm.load_store(engine, cfg)
    return engine, cfg


@pytest.fixture
def store(mode):
    engine, cfg = small_store(mode)
    yield engine, cfg
    engine.close()
