"""Actor catalog, method dispatch, futures and client-facing transactions.

Every client call runs as a root transaction. A method invoked from inside
another method shares the caller's transaction; in ``sync`` mode it runs
inline, in ``async`` mode it is queued on the executor pool that the
:class:`ExecutorAssignment` maps its actor to (actors without a pool run
inline even in async mode).

Waiting on a future that is still queued *steals* the invocation and runs
it in the waiting thread, so a pool never deadlocks on its own backlog.
"""

from __future__ import annotations

import enum
import fnmatch
import inspect
import itertools
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import durability, relstore
from .address import ActorAddress
from .errors import (AccessDenied, ArityMismatch, CalledFromMethodBody, DeadlockDetected,
                     DuplicateActor, DuplicateType, FutureMisuse, InvalidDescriptor,
                     InvalidSchema, TransactionAborted, UnknownActor, UnknownMethod,
                     UnknownRelation, UnknownType)
from .relstore import ActorState, Relation, Schema
from .security.access import AccessRuleSet, CallFrame
from .security.monitor import AuditLog, StatsRegistry
from .txn import (AbortReason, CommitResult, Delivery, DetachedSpec, Status,
                  TransactionContext, Trigger, TxnManager, detach as txn_detach)

log = logging.getLogger(__name__)


class DispatchMode(enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


# ---------------------------------------------------------------------------
# catalog descriptors
# ---------------------------------------------------------------------------

@dataclass
class MethodDescriptor:
    """A method: ``fn(ctx, *args)``.

    ``params`` lists semantic parameter types; when given, the arity is
    exactly ``len(params)``, otherwise it is taken from ``fn``'s signature.
    ``result_columns`` describes the tuples the method returns, which
    :meth:`Engine.bulk_invoke` needs to type its result relation.
    """

    name: str
    fn: Callable
    params: tuple[str, ...] | None = None
    returns: str = "any"
    encrypted: bool = False
    result_columns: tuple[tuple[str, str], ...] = ()
    min_args: int = field(init=False, default=0)
    max_args: float = field(init=False, default=0)

    def __post_init__(self):
        if not self.name:
            raise InvalidDescriptor("method name must be non-empty")
        if not callable(self.fn):
            raise InvalidDescriptor(f"method {self.name}: fn is not callable")
        if self.params is not None:
            self.params = tuple(self.params)
            self.min_args = self.max_args = len(self.params)
            return
        sig = inspect.signature(self.fn)
        positional = [p for p in sig.parameters.values()
                      if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)][1:]
        self.min_args = sum(1 for p in positional if p.default is p.empty)
        varargs = any(p.kind is p.VAR_POSITIONAL for p in sig.parameters.values())
        self.max_args = float("inf") if varargs else len(positional)

    def check_arity(self, n: int) -> None:
        if not self.min_args <= n <= self.max_args:
            want = (str(self.min_args) if self.min_args == self.max_args
                    else f"{self.min_args}..{self.max_args}")
            raise ArityMismatch(f"{self.name} takes {want} arguments, got {n}")


@dataclass
class ActorTypeDescriptor:
    type_name: str
    methods: list[MethodDescriptor] = field(default_factory=list)
    durable: bool = True
    state_schemas: list[Schema] = field(default_factory=list)

    def __post_init__(self):
        if not self.type_name:
            raise InvalidDescriptor("type name must be non-empty")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise InvalidDescriptor(f"{self.type_name}: duplicate method names")
        rels = [s.name for s in self.state_schemas]
        if len(set(rels)) != len(rels):
            raise InvalidSchema(f"{self.type_name}: duplicate relation names")
        self._by_name = {m.name: m for m in self.methods}

    def method(self, name: str) -> MethodDescriptor:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownMethod(f"{self.type_name} has no method {name!r}") from None


@dataclass(eq=False)
class Actor:
    address: ActorAddress
    descriptor: ActorTypeDescriptor
    state: ActorState
    pool_id: str | None


# ---------------------------------------------------------------------------
# executor pools
# ---------------------------------------------------------------------------

@dataclass
class ExecutorAssignment:
    """Maps actor addresses to executor pools.

    ``routes`` are ``(type glob, name glob, pool id template)``; the template
    may use ``{type}`` and ``{name}``. The first matching route wins; an
    actor with no matching route runs inline in its caller's thread.
    """

    routes: list[tuple[str, str, str]] = field(
        default_factory=lambda: [("Store_Section", "*", "{type}[{name}]")])
    pool_sizes: dict[str, int] = field(default_factory=dict)
    default_width: int = 1
    affinity: dict[str, list[int]] = field(default_factory=dict)

    def pool_for(self, addr: ActorAddress) -> str | None:
        for type_glob, name_glob, template in self.routes:
            if (fnmatch.fnmatchcase(addr.type_name, type_glob)
                    and fnmatch.fnmatchcase(addr.actor_name, name_glob)):
                return template.format(type=addr.type_name, name=addr.actor_name)
        return None

    def width(self, pool_id: str) -> int:
        return max(1, int(self.pool_sizes.get(pool_id, self.default_width)))


def _pin(cpus: list[int]) -> None:
    try:
        os.sched_setaffinity(0, set(cpus))
    except (AttributeError, OSError, ValueError) as exc:
        log.debug("affinity hint %s ignored: %s", cpus, exc)


# ---------------------------------------------------------------------------
# futures
# ---------------------------------------------------------------------------

class FutureState(enum.Enum):
    PENDING = "pending"
    FULFILLED = "fulfilled"
    FAILED = "failed"


_invocation_ids = itertools.count(1)


class FutureHandle:
    """Result of one invocation; resolves exactly once."""

    __slots__ = ("invocation_id", "state", "value", "error", "final_segment", "creator",
                 "callee_ctx", "_event", "_task", "_resolutions")

    def __init__(self, creator: "Context", callee_ctx: "Context"):
        self.invocation_id = next(_invocation_ids)
        self.state = FutureState.PENDING
        self.value = None
        self.error: BaseException | None = None
        self.final_segment = None  # ordering token: callee's last segment
        self.creator = creator
        self.callee_ctx = callee_ctx
        self._event = threading.Event()
        self._task: _Invocation | None = None
        self._resolutions = 0

    @property
    def done(self) -> bool:
        return self.state is not FutureState.PENDING

    def _resolve(self, value=None, error: BaseException | None = None) -> None:
        if self._resolutions:
            raise RuntimeError(f"future {self.invocation_id} resolved twice")
        self._resolutions += 1
        self.final_segment = self.callee_ctx.segment
        self.value = value
        self.error = error
        self.state = FutureState.FAILED if error is not None else FutureState.FULFILLED
        self._event.set()
        cv = self.creator._cv
        if cv is not None:
            with cv:
                cv.notify_all()

    def get(self):
        """Wait for the result from the execution stream that created this future."""
        return self.creator.engine.future_get(self)

    def __repr__(self):
        return f"<FutureHandle #{self.invocation_id} {self.state.value}>"


class _Invocation:
    __slots__ = ("future", "ctx", "actor", "method", "args", "_claimed")

    def __init__(self, future, ctx, actor, method, args):
        self.future = future
        self.ctx = ctx
        self.actor = actor
        self.method = method
        self.args = args
        self._claimed = threading.Lock()

    def claim(self) -> bool:
        return self._claimed.acquire(blocking=False)


# ---------------------------------------------------------------------------
# execution contexts
# ---------------------------------------------------------------------------

class Context(TransactionContext):
    """What a method body sees as ``ctx``.

    Relational helpers operate on the executing actor's own relations;
    invocation helpers ship calls to other actors within the same
    transaction.
    """

    def __init__(self, txn, parent, segment, engine: "Engine" = None,
                 actor: Actor | None = None, method: MethodDescriptor | None = None):
        super().__init__(txn, parent, segment)
        self.engine = engine
        self.actor = actor
        self.method = method
        self._children: list[FutureHandle] = []
        self._cv: threading.Condition | None = None

    def spawn(self, segment):
        return Context(self.txn, self, segment, self.engine, self.actor, self.method)

    # -- identity ------------------------------------------------------------

    @property
    def frame(self) -> CallFrame | None:
        if self.actor is None:
            return None
        return CallFrame(self.actor.address.type_name, self.method.name,
                         self.actor.address.actor_name)

    @property
    def address(self) -> ActorAddress | None:
        return None if self.actor is None else self.actor.address

    @property
    def actor_name(self) -> str:
        return self.actor.address.actor_name

    @property
    def settings(self) -> dict:
        return self.engine.settings

    def now(self) -> int:
        return self.engine.now()

    # -- own state -----------------------------------------------------------

    def relation(self, rel) -> Relation:
        if isinstance(rel, Relation):
            return rel
        if self.actor is None:
            raise UnknownRelation(f"client context has no relation {rel!r}")
        return self.actor.state[rel]

    def _reading(self, rel: Relation) -> Relation:
        if rel.schema.encrypted and not (self.method is not None and self.method.encrypted):
            self.engine.audit.record(self.frame, self.frame or CallFrame("", "", ""), "warn",
                                     note=f"plaintext access to encrypted relation {rel.name}")
        return rel

    def scan(self, rel, where=None, pred=None, columns=None) -> list:
        return relstore.scan(self, self._reading(self.relation(rel)), where, pred, columns)

    def insert(self, rel, values) -> int:
        return relstore.insert(self, self.relation(rel), values)

    def update(self, rel, where=None, set=None, pred=None) -> int:  # noqa: A002
        return relstore.update(self, self.relation(rel), where, set, pred)

    def delete(self, rel, where=None, pred=None) -> int:
        return relstore.delete(self, self.relation(rel), where, pred)

    def aggregate(self, rel, specs, where=None, pred=None) -> tuple:
        return relstore.aggregate(self, self._reading(self.relation(rel)), specs, where, pred)

    def window_stats(self, rel, partition_col, order_col, value_col, k, keys):
        return relstore.window_stats(self, self._reading(self.relation(rel)), partition_col,
                                     order_col, value_col, k, keys)

    # -- other actors --------------------------------------------------------

    def invoke(self, target, method: str, *args) -> FutureHandle:
        return self.engine.invoke(self, target, method, args)

    def actors(self, type_name: str) -> "_TypeRef":
        """``ctx.actors("Store_Section")["100"].get_price(ids)`` -> future."""
        return _TypeRef(self, type_name)

    def get(self, fut: FutureHandle):
        return self.engine.future_get(fut, self)

    def when_all(self, futs: Sequence[FutureHandle]) -> None:
        self.engine.when_all(futs, self)

    def when_one(self, futs: Sequence[FutureHandle]) -> int:
        return self.engine.when_one(futs, self)

    def bulk_invoke(self, type_name: str, names: Iterable[str], method: str,
                    args_for: Callable[[str], Sequence]) -> Relation:
        return self.engine.bulk_invoke(self, type_name, names, method, args_for)

    def detach(self, target, method: str, *args, trigger: Trigger = Trigger.ON_COMMIT,
               delivery: Delivery = Delivery.EXACTLY_ONCE) -> DetachedSpec:
        return self.engine.detach(self, target, method, args, trigger, delivery)

    # -- completion ----------------------------------------------------------

    def _settle(self) -> None:
        """Wait for every invocation this context started and order them before its end."""
        pending = self._children
        if not pending:
            return
        for fut in pending:
            if not fut.done:
                self.engine._wait(fut)
        self.join(*(f.final_segment for f in pending))


class _TypeRef:
    __slots__ = ("ctx", "type_name")

    def __init__(self, ctx, type_name):
        self.ctx = ctx
        self.type_name = type_name

    def __getitem__(self, name) -> "_ActorRef":
        return _ActorRef(self.ctx, ActorAddress(self.type_name, str(name)))


class _ActorRef:
    __slots__ = ("ctx", "address")

    def __init__(self, ctx, address):
        self.ctx = ctx
        self.address = address

    def __getattr__(self, method):
        if method.startswith("__"):
            raise AttributeError(method)
        return lambda *args: self.ctx.invoke(self.address, method, *args)


def _as_address(target) -> ActorAddress:
    if isinstance(target, ActorAddress):
        return target
    if isinstance(target, str):
        return ActorAddress.parse(target)
    type_name, name = target
    return ActorAddress(type_name, str(name))


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

@dataclass
class Outcome:
    """Result of one client call: return value, commit result, application error."""

    value: Any
    result: CommitResult
    error: BaseException | None = None

    @property
    def committed(self) -> bool:
        return self.result.committed


class LogicalClock:
    """Deterministic clock: 1, 2, 3, ..."""

    def __init__(self, start: int = 0):
        self._c = itertools.count(start + 1)
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            return next(self._c)


def monotonic_micros() -> int:
    return time.monotonic_ns() // 1000


@dataclass
class EngineConfig:
    mode: DispatchMode | str = DispatchMode.SYNC
    assignment: ExecutorAssignment = field(default_factory=ExecutorAssignment)
    scan_granularity: str = "leaf"
    leaf_span: int = relstore.DEFAULT_LEAF_SPAN
    log_path: str | Path | None = None  # None: durability off
    fsync: str = "commit"
    group_interval: float = 0.005
    durable_overrides: dict[str, bool] = field(default_factory=dict)  # "Type/name" -> flag
    detached: str = "background"  # background | manual
    retry_limit: int = 10
    backoff: float = 0.001
    audit_capacity: int = 100_000
    audit_allows: bool = False
    clock: Callable[[], int] | None = None
    debug_lock_order: bool = False

    def __post_init__(self):
        self.mode = DispatchMode(self.mode)
        if self.detached not in ("background", "manual"):
            raise ValueError("detached must be 'background' or 'manual'")


class Engine:
    """One in-process actor database. Safe to share across threads."""

    def __init__(self, config: EngineConfig | None = None, **overrides):
        if config is None:
            config = EngineConfig(**overrides)
        elif overrides:
            raise TypeError("pass either a config or keyword overrides")
        self.config = config
        self.mode = config.mode
        self.settings: dict[str, Any] = {}
        self.clock = config.clock or monotonic_micros
        self.audit = AuditLog(config.audit_capacity)
        self.stats = StatsRegistry()
        self.rules = AccessRuleSet()
        self._types: dict[str, ActorTypeDescriptor] = {}
        self._type_ids: dict[str, int] = {}
        self._actors: dict[ActorAddress, Actor] = {}
        self._catalog_lock = threading.RLock()
        self._pools: dict[str, ThreadPoolExecutor] = {}
        self._tls = threading.local()
        self._counter_lock = threading.Lock()
        self.futures_created = 0
        self.futures_resolved = 0
        self.crashed = False

        self.log_writer = None
        if config.log_path is not None:
            self.log_writer = durability.LogWriter(config.log_path, config.fsync,
                                                   config.group_interval)
        self.txn = TxnManager(self.log_writer, durable=self._is_durable,
                              on_finish=self._on_finish, context_factory=Context,
                              debug_lock_order=config.debug_lock_order)
        q = self.txn.detached
        q.runner = self._run_detached
        q.retry_limit = config.retry_limit
        q.backoff = config.backoff
        q.on_failure = self._detached_failed
        if config.detached == "background":
            q.start()

    # -- catalog -------------------------------------------------------------

    def register_actor_type(self, descriptor: ActorTypeDescriptor) -> int:
        with self._catalog_lock:
            if descriptor.type_name in self._types:
                raise DuplicateType(f"actor type {descriptor.type_name!r} already registered")
            self._types[descriptor.type_name] = descriptor
            tid = len(self._type_ids) + 1
            self._type_ids[descriptor.type_name] = tid
            return tid

    def actor_type(self, type_name: str) -> ActorTypeDescriptor:
        try:
            return self._types[type_name]
        except KeyError:
            raise UnknownType(f"unknown actor type {type_name!r}") from None

    @property
    def type_names(self) -> list[str]:
        return sorted(self._types)

    def _in_method(self) -> bool:
        return bool(getattr(self._tls, "stack", None))

    def _admin_guard(self) -> None:
        if self._in_method():
            raise CalledFromMethodBody("actor lifecycle is administrative only")

    def create_actors(self, type_name: str, names: Iterable[str]) -> int:
        self._admin_guard()
        descriptor = self.actor_type(type_name)
        names = [str(n) for n in names]
        with self._catalog_lock:
            addrs = [ActorAddress(type_name, n) for n in names]
            for a in addrs:
                if not a.actor_name:
                    raise ValueError("actor names must be non-empty")
            dupes = [a for a in addrs if a in self._actors]
            if dupes or len(set(addrs)) != len(addrs):
                raise DuplicateActor(f"actor(s) already exist: {', '.join(map(str, dupes or addrs))}")
            for a in addrs:
                state = ActorState(a, scan_granularity=self.config.scan_granularity,
                                   leaf_span=self.config.leaf_span)
                for schema in descriptor.state_schemas:
                    relstore.create_relation(state, schema)
                pool_id = None
                if self.mode is DispatchMode.ASYNC:
                    pool_id = self.config.assignment.pool_for(a)
                    if pool_id is not None:
                        self._ensure_pool(pool_id)
                self._actors[a] = Actor(a, descriptor, state, pool_id)
        return len(addrs)

    def drop_actors(self, type_name: str, names: Iterable[str]) -> int:
        self._admin_guard()
        self.actor_type(type_name)
        with self._catalog_lock:
            addrs = [ActorAddress(type_name, str(n)) for n in names]
            missing = [a for a in addrs if a not in self._actors]
            if missing:
                raise UnknownActor(f"no such actor(s): {', '.join(map(str, missing))}")
            for a in addrs:
                del self._actors[a]
        return len(addrs)

    def list_actors(self, type_name: str | None = None) -> list[ActorAddress]:
        snapshot = list(self._actors)
        return sorted(a for a in snapshot if type_name is None or a.type_name == type_name)

    def actor(self, target) -> Actor:
        addr = _as_address(target)
        actor = self._actors.get(addr)
        if actor is None:
            raise UnknownActor(f"no actor {addr}")
        return actor

    def relation(self, target, name: str) -> Relation:
        return self.actor(target).state[name]

    def _ensure_pool(self, pool_id: str) -> None:
        if pool_id in self._pools:
            return
        cpus = self.config.assignment.affinity.get(pool_id)
        self._pools[pool_id] = ThreadPoolExecutor(
            max_workers=self.config.assignment.width(pool_id),
            thread_name_prefix=pool_id,
            initializer=_pin if cpus else None,
            initargs=(cpus,) if cpus else ())

    def _is_durable(self, owner: ActorAddress) -> bool:
        override = self.config.durable_overrides.get(str(owner))
        if override is not None:
            return override
        descriptor = self._types.get(owner.type_name)
        return descriptor is None or descriptor.durable

    # -- access control ------------------------------------------------------

    def set_rules(self, rules: AccessRuleSet) -> None:
        self.rules = rules  # single reference swap; in-flight calls keep their snapshot

    def check_access(self, caller: CallFrame | None, target: CallFrame, tid=None) -> bool:
        allowed = self.rules.allows(caller, target)
        if not allowed:
            self.audit.record(caller, target, "deny", tid)
        elif caller is None or self.config.audit_allows:
            self.audit.record(caller, target, "allow", tid)
        return allowed

    def _enforce(self, ctx: Context, target_frame: CallFrame) -> None:
        if not self.check_access(ctx.frame, target_frame):
            if ctx.actor is not None:
                self.stats.record_denied(ctx.actor.address)
            ctx.txn.mark_doomed(AbortReason.ACCESS_DENIED, f"{ctx.frame} -> {target_frame}")
            raise AccessDenied(f"{ctx.frame} may not call {target_frame}")

    # -- invocation ----------------------------------------------------------

    def invoke(self, ctx: Context, target, method: str, args: Sequence = ()) -> FutureHandle:
        ctx.check_active()
        addr = _as_address(target)
        actor = self._actors.get(addr)
        if actor is None:
            raise UnknownActor(f"no actor {addr}")
        md = actor.descriptor.method(method)
        args = tuple(args)
        md.check_arity(len(args))
        self._enforce(ctx, CallFrame(addr.type_name, method, addr.actor_name))

        seg = ctx.fork(f"{addr}.{method}")
        child = Context(ctx.txn, ctx, seg, self, actor, md)
        fut = FutureHandle(ctx, child)
        inv = _Invocation(fut, child, actor, md, args)
        fut._task = inv
        ctx._children.append(fut)
        txn = ctx.txn
        with txn.lock:
            txn.participants.setdefault(addr, set()).add(method)
        with self._counter_lock:
            self.futures_created += 1

        pool = self._pools.get(actor.pool_id) if actor.pool_id is not None else None
        if self.mode is DispatchMode.SYNC or pool is None:
            self._execute(inv)
        else:
            pool.submit(self._execute, inv)
        return fut

    def _execute(self, inv: _Invocation) -> None:
        if inv.claim():
            self._run_claimed(inv)
        # otherwise a waiter stole it

    def _run_claimed(self, inv: _Invocation) -> None:
        ctx, fut = inv.ctx, inv.future
        stack = getattr(self._tls, "stack", None)
        if stack is None:
            stack = self._tls.stack = []
        stack.append(ctx)
        t0 = time.perf_counter()
        try:
            value = inv.method.fn(ctx, *inv.args)
            ctx._settle()
        except BaseException as exc:  # noqa: BLE001 - delivered through the future
            try:
                ctx._settle()
            except BaseException:  # noqa: BLE001
                pass
            reason = (AbortReason.ACCESS_DENIED if isinstance(exc, AccessDenied)
                      else AbortReason.APPLICATION_ERROR)
            ctx.txn.mark_doomed(reason, f"{inv.actor.address}.{inv.method.name}: {exc!r}")
            fut._resolve(error=exc)
        else:
            fut._resolve(value)
        finally:
            stack.pop()
            self.stats.record_invocation(inv.actor.address, time.perf_counter() - t0)
            with self._counter_lock:
                self.futures_resolved += 1

    def _wait(self, fut: FutureHandle) -> None:
        if fut.done:
            return
        inv = fut._task
        if inv is not None and inv.claim():
            self._run_claimed(inv)
        fut._event.wait()

    def _current(self, fut: FutureHandle, ctx: Context | None) -> Context:
        if ctx is None:
            stack = getattr(self._tls, "stack", None)
            ctx = stack[-1] if stack else fut.creator
        if fut.creator is not ctx:
            c = ctx
            while c is not None:
                if c is fut.callee_ctx:
                    raise DeadlockDetected(
                        f"invocation #{fut.invocation_id} would wait on its own caller chain")
                c = c.parent
            raise FutureMisuse("futures may only be awaited by the context that created them")
        return ctx

    def future_get(self, fut: FutureHandle, ctx: Context | None = None):
        ctx = self._current(fut, ctx)
        self._wait(fut)
        ctx.join(fut.final_segment)
        if fut.error is not None:
            raise fut.error
        return fut.value

    def when_all(self, futs: Sequence[FutureHandle], ctx: Context | None = None) -> None:
        futs = list(futs)
        if not futs:
            return
        ctx = self._current(futs[0], ctx)
        for f in futs:
            self._current(f, ctx)
        for f in futs:
            self._wait(f)
        ctx.join(*(f.final_segment for f in futs))
        for f in futs:
            if f.error is not None:
                raise f.error

    def when_one(self, futs: Sequence[FutureHandle], ctx: Context | None = None) -> int:
        futs = list(futs)
        if not futs:
            raise ValueError("when_one needs at least one future")
        ctx = self._current(futs[0], ctx)
        for f in futs:
            self._current(f, ctx)
        if ctx._cv is None:
            ctx._cv = threading.Condition()
        chosen = None
        while chosen is None:
            for i, f in enumerate(futs):
                if f.done:
                    chosen = i
                    break
            else:
                for f in futs:
                    inv = f._task
                    if inv is not None and inv.claim():
                        self._run_claimed(inv)
                        break
                else:
                    with ctx._cv:
                        if not any(f.done for f in futs):
                            ctx._cv.wait(0.05)
        f = futs[chosen]
        ctx.join(f.final_segment)
        if f.error is not None:
            raise f.error
        return chosen

    def bulk_invoke(self, ctx: Context, type_name: str, names: Iterable[str], method: str,
                    args_for: Callable[[str], Sequence]) -> Relation:
        """Call ``method`` on every named actor; rows come back prefixed by the actor name."""
        md = self.actor_type(type_name).method(method)
        if not md.result_columns:
            raise InvalidDescriptor(f"{type_name}.{method} declares no result columns")
        schema = Schema(f"{type_name}.{method}", (("name", "string"),) + tuple(md.result_columns))
        names = list(dict.fromkeys(str(n) for n in names))
        futs = [self.invoke(ctx, ActorAddress(type_name, n), method, tuple(args_for(n)))
                for n in names]
        self.when_all(futs, ctx)
        out = Relation(schema)
        for n, f in zip(names, futs):
            rows = f.value if isinstance(f.value, list) else [f.value]
            for row in rows:
                out.load((n, *row))
        return out

    def detach(self, ctx: Context, target, method: str, args: Sequence = (),
               trigger: Trigger = Trigger.ON_COMMIT,
               delivery: Delivery = Delivery.EXACTLY_ONCE) -> DetachedSpec:
        ctx.check_active()
        addr = _as_address(target)
        actor = self.actor(addr)
        actor.descriptor.method(method).check_arity(len(args))
        self._enforce(ctx, CallFrame(addr.type_name, method, addr.actor_name))
        parent_spec = ctx.txn.detached_from
        depth = 0 if parent_spec is None else parent_spec.depth + 1
        spec = DetachedSpec(addr, method, tuple(args), Trigger(trigger), Delivery(delivery),
                            caller=ctx.frame, depth=depth)
        if depth:
            self.audit.record(ctx.frame, CallFrame(addr.type_name, method, addr.actor_name),
                              "allow", note=f"detached from a detached transaction (depth {depth})")
        txn_detach(ctx, spec)
        return spec

    def now(self) -> int:
        return self.clock()

    # -- client calls --------------------------------------------------------

    def execute(self, target, method: str, *args, isolation: str = "serializable",
                _detached_from: DetachedSpec | None = None) -> Outcome:
        """Run one method as a root transaction. Never raises for aborts."""
        if self.crashed:
            raise RuntimeError("engine has crashed; recover into a new engine")
        root = self.txn.begin_root(isolation, label="client", detached_from=_detached_from,
                                   engine=self)
        value, error = None, None
        try:
            fut = self.invoke(root, target, method, args)
            value = self.future_get(fut, root)
        except Exception as exc:  # noqa: BLE001 - reported in the outcome
            error = exc
        try:
            root._settle()
        except Exception:  # noqa: BLE001
            pass
        txn = root.txn
        if error is not None:
            reason, detail = txn.doom or (
                AbortReason.ACCESS_DENIED if isinstance(error, AccessDenied)
                else AbortReason.APPLICATION_ERROR, repr(error))
            result = self.txn.abort(root, reason, detail)
        else:
            result = self.txn.commit(root)
        return Outcome(value if result.committed else None, result, error)

    def call(self, target, method: str, *args):
        """Run a root transaction and return its value; raise if it did not commit."""
        out = self.execute(target, method, *args)
        if out.error is not None:
            raise out.error
        if not out.committed:
            raise TransactionAborted(out.result.reason, out.result.detail)
        return out.value

    def _on_finish(self, txn, result: CommitResult) -> None:
        self.stats.record_outcome(txn.participants, result.committed,
                                  None if result.committed else result.reason.value)

    # -- detached transactions ----------------------------------------------

    def _run_detached(self, spec: DetachedSpec) -> CommitResult:
        if spec.target not in self._actors:
            return CommitResult(None, AbortReason.APPLICATION_ERROR, f"no actor {spec.target}")
        return self.execute(spec.target, spec.method, *spec.args, _detached_from=spec).result

    def _detached_failed(self, spec: DetachedSpec, result) -> None:
        addr = spec.target
        self.audit.record(spec.caller, CallFrame(addr.type_name, spec.method, addr.actor_name),
                          "fail", note=f"detached {spec.delivery.value} gave up: {result}")

    def process_detached_queue(self) -> int:
        return self.txn.detached.process()

    def wait_detached(self, timeout: float | None = None) -> bool:
        return self.txn.detached.wait_idle(timeout)

    # -- loading, durability, lifecycle --------------------------------------

    def load_csv_dir(self, directory: str | Path) -> int:
        """Bulk-load ``<type>.<name>.<relation>.csv`` files; returns rows loaded."""
        n = 0
        for path in sorted(Path(directory).glob("*.csv")):
            type_name, name, rel_name = relstore.parse_csv_name(path)
            n += relstore.load_csv(self.relation((type_name, name), rel_name), path)
        return n

    def _replay_target(self, addr: ActorAddress, rel_name: str):
        actor = self._actors.get(addr)
        if actor is None or not self._is_durable(addr):
            return None
        try:
            return actor.state[rel_name]
        except UnknownRelation:
            return None

    def recover(self, path: str | Path | None = None) -> durability.RecoveryReport:
        """Replay the redo log into freshly created (and loaded) actors."""
        path = path if path is not None else self.config.log_path
        if path is None:
            return durability.RecoveryReport()
        report, owed, done = durability.replay(path, self._replay_target)
        self.txn.reset_tid(report.last_tid)
        self.txn.detached.mark_done(done)
        self.txn.detached.enqueue(owed)
        return report

    def snapshot(self, durable_only: bool = False) -> dict:
        """Committed rows per (address, relation), for comparisons."""
        out = {}
        for addr in self.list_actors():
            if durable_only and not self._is_durable(addr):
                continue
            for rel in self._actors[addr].state:
                out[(addr, rel.name)] = rel.committed_rows()
        return out

    def simulate_crash(self) -> None:
        """Drop all volatile state at once; the log file stays as written."""
        self.crashed = True
        if self.log_writer is not None:
            self.log_writer.abandon()
        q = self.txn.detached
        q.clear()
        q.stop(drain=False)
        for pool in self._pools.values():
            pool.shutdown(wait=False, cancel_futures=True)
        self._pools.clear()
        self._actors = {}

    def close(self) -> None:
        q = self.txn.detached
        if not self.crashed:
            q.stop(drain=True)
        for pool in self._pools.values():
            pool.shutdown(wait=True)
        self._pools.clear()
        if self.log_writer is not None and not self.crashed:
            self.log_writer.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
