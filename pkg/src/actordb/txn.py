"""Serializable cross-actor transactions.

A root transaction is shared by every nested invocation it spawns: all of
them stage writes into the same write set and record reads into the same
read set, so the whole computation commits or aborts as a unit.

Commit follows the usual optimistic discipline: lock the write set in a
global order, validate every observed version, then install. On top of that
the commit checks that no two *unordered* sub-invocations touched the same
data in a conflicting way. Ordering comes from a happens-before graph of
execution segments: invoking a method forks the caller's segment, and
synchronizing on a future joins the callee's final segment back in.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import ParentNotActive, UnsupportedIsolation
from .relstore import LEAF, RECORD, STRUCTURE, PendingWrites, Relation, Slot

log = logging.getLogger(__name__)


class Status(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


class AbortReason(enum.Enum):
    READ_VALIDATION = "ReadValidation"
    SCAN_VALIDATION = "ScanValidation"
    RACY_SIBLINGS = "RacySiblings"
    APPLICATION_ERROR = "ApplicationError"
    ACCESS_DENIED = "AccessDenied"
    IO_ERROR = "IoError"


class Trigger(enum.Enum):
    ON_COMMIT = "ON_COMMIT"
    ON_ABORT = "ON_ABORT"
    ON_ANY = "ON_ANY"

    def fires_on(self, committed: bool) -> bool:
        if self is Trigger.ON_ANY:
            return True
        return committed == (self is Trigger.ON_COMMIT)


class Delivery(enum.Enum):
    EXACTLY_ONCE = "exactly_once"
    AT_MOST_ONCE = "at_most_once"
    AT_LEAST_ONCE = "at_least_once"

    @property
    def durable(self) -> bool:
        return self is not Delivery.AT_MOST_ONCE


_spec_ids = itertools.count(1)
_spec_prefix = f"{int(time.time() * 1e6):x}"


def new_spec_id() -> str:
    return f"{_spec_prefix}-{next(_spec_ids)}"


@dataclass
class DetachedSpec:
    target: Any  # ActorAddress
    method: str
    args: tuple
    trigger: Trigger = Trigger.ON_COMMIT
    delivery: Delivery = Delivery.EXACTLY_ONCE
    spec_id: str = field(default_factory=new_spec_id)
    caller: Any = None
    depth: int = 0


@dataclass(frozen=True)
class CommitResult:
    tid: int | None = None
    reason: AbortReason | None = None
    detail: str | None = None

    @property
    def committed(self) -> bool:
        return self.reason is None

    def __str__(self):
        if self.committed:
            return f"committed(tid={self.tid})"
        return f"aborted({self.reason.value})"


class Segment:
    """A straight-line piece of one execution stream."""

    __slots__ = ("sid", "anc", "label")

    def __init__(self, sid: int, anc: int, label: str):
        self.sid = sid
        self.anc = anc
        self.label = label

    def precedes(self, other: "Segment") -> bool:
        return (other.anc >> self.sid) & 1 == 1

    def __repr__(self):
        return f"Segment({self.sid}, {self.label})"


def _ordered(a: Segment, b: Segment) -> bool:
    return a is b or a.precedes(b) or b.precedes(a)


# ---------------------------------------------------------------------------
# root transaction state
# ---------------------------------------------------------------------------

class Transaction:
    """State shared by a root context and all its nested contexts."""

    def __init__(self, manager: "TxnManager", detached_from: DetachedSpec | None = None):
        self.manager = manager
        self.status = Status.ACTIVE
        self.tid: int | None = None
        self.lock = threading.Lock()
        self.reads: dict[Slot, int] = {}
        self.writes: dict[Relation, PendingWrites] = {}
        self.segments: list[Segment] = []
        self.fp_records: dict[tuple, dict[int, bool]] = {}
        self.fp_scans: dict[int, set[int]] = {}
        self.fp_structs: dict[int, set[int]] = {}
        self.detached: list[DetachedSpec] = []
        self.detached_from = detached_from
        self.participants: dict = {}  # actor address -> methods executed
        self.doom: tuple[AbortReason, str] | None = None
        self.result: CommitResult | None = None

    def new_segment(self, preds: Iterable[Segment], label: str = "") -> Segment:
        with self.lock:
            anc = 0
            for p in preds:
                anc |= p.anc | (1 << p.sid)
            seg = Segment(len(self.segments), anc, label)
            self.segments.append(seg)
            return seg

    def mark_doomed(self, reason: AbortReason, detail: str = "") -> None:
        with self.lock:
            if self.doom is None:
                self.doom = (reason, detail)


class TransactionContext:
    """Execution context of one (root or nested) invocation."""

    def __init__(self, txn: Transaction, parent: "TransactionContext | None", segment: Segment):
        self.txn = txn
        self.parent = parent
        self.segment = segment

    # -- structure ----------------------------------------------------------

    @property
    def is_root(self) -> bool:
        return self.parent is None

    @property
    def status(self) -> Status:
        return self.txn.status

    def check_active(self) -> None:
        if self.txn.status is not Status.ACTIVE:
            raise ParentNotActive(f"transaction is {self.txn.status.value}")

    def fork(self, label: str = "") -> Segment:
        """Start a child segment; the caller continues in a fresh segment."""
        child = self.txn.new_segment((self.segment,), label)
        self.segment = self.txn.new_segment((self.segment,), self.segment.label)
        return child

    def spawn(self, segment: Segment) -> "TransactionContext":
        return TransactionContext(self.txn, self, segment)

    def join(self, *finals: Segment) -> None:
        """Order the given callee segments before everything that follows."""
        self.segment = self.txn.new_segment((self.segment, *finals), self.segment.label)

    # -- relstore tracking protocol -------------------------------------------

    def writes_for(self, rel: Relation) -> PendingWrites | None:
        return self.txn.writes.get(rel)

    def stage(self, rel: Relation) -> PendingWrites:
        self.check_active()
        txn = self.txn
        pending = txn.writes.get(rel)
        if pending is None:
            with txn.lock:
                pending = txn.writes.setdefault(rel, PendingWrites())
        return pending

    def note_read(self, rel: Relation, slot: Slot, version: int) -> None:
        txn = self.txn
        sid = self.segment.sid
        with txn.lock:
            if slot not in txn.reads:
                txn.reads[slot] = version
            fp = txn.fp_records.get(slot.key)
            if fp is None:
                txn.fp_records[slot.key] = {sid: False}
            elif sid not in fp:
                fp[sid] = False

    def note_scan(self, rel: Relation, slot: Slot, version: int) -> None:
        txn = self.txn
        with txn.lock:
            if slot not in txn.reads:
                txn.reads[slot] = version
            txn.fp_scans.setdefault(rel.rel_id, set()).add(self.segment.sid)

    def note_write(self, rel: Relation, rid: int, structural: bool) -> None:
        txn = self.txn
        sid = self.segment.sid
        with txn.lock:
            txn.fp_records.setdefault((rel.rel_id, RECORD, rid), {})[sid] = True
            if structural:
                txn.fp_structs.setdefault(rel.rel_id, set()).add(sid)


def child_context(parent: TransactionContext, label: str = "") -> TransactionContext:
    """Nested context sharing the parent's sets and fate."""
    parent.check_active()
    return parent.spawn(parent.fork(label))


# ---------------------------------------------------------------------------
# racy sibling detection
# ---------------------------------------------------------------------------

def detect_racy_siblings(txn: Transaction):
    """Return ``None`` or a witness ``(key, seg_a, seg_b)`` of an unordered conflict."""
    segs = txn.segments
    if len(segs) < 2:
        return None
    for key, by_seg in txn.fp_records.items():
        if len(by_seg) < 2:
            continue
        items = sorted(by_seg.items())
        for i, (sa, wa) in enumerate(items):
            for sb, wb in items[i + 1:]:
                if (wa or wb) and not _ordered(segs[sa], segs[sb]):
                    return key, segs[sa], segs[sb]
    for rel_id, writers in txn.fp_structs.items():
        scanners = txn.fp_scans.get(rel_id)
        if not scanners:
            continue
        for sa in writers:
            for sb in scanners:
                if sa != sb and not _ordered(segs[sa], segs[sb]):
                    return (rel_id, STRUCTURE, 0), segs[sa], segs[sb]
    return None


# ---------------------------------------------------------------------------
# manager: tids, commit protocol, detached queue
# ---------------------------------------------------------------------------

class TxnManager:
    """Commit sequencing shared by every transaction of one engine.

    ``durable(owner)`` decides whether an actor's writes go to the redo log;
    ``on_finish(txn, result)`` is called once per root outcome.
    """

    def __init__(self, log_writer=None, durable: Callable[[Any], bool] | None = None,
                 on_finish: Callable | None = None, context_factory=None,
                 debug_lock_order: bool = False):
        self.log_writer = log_writer
        self.durable = durable or (lambda owner: True)
        self.on_finish = on_finish
        self.context_factory = context_factory or TransactionContext
        self.debug_lock_order = debug_lock_order
        self._seq_lock = threading.Lock()
        self._next_tid = 1
        self.detached = DetachedQueue(None)

    @property
    def last_tid(self) -> int:
        return self._next_tid - 1

    def reset_tid(self, last: int) -> None:
        with self._seq_lock:
            self._next_tid = max(self._next_tid, last + 1)

    def begin_root(self, isolation: str = "serializable", label: str = "root",
                   detached_from: DetachedSpec | None = None, **ctx_kwargs):
        if isolation.lower() != "serializable":
            raise UnsupportedIsolation(f"isolation level {isolation!r} is not supported")
        txn = Transaction(self, detached_from)
        seg = txn.new_segment((), label)
        return self.context_factory(txn, None, seg, **ctx_kwargs)

    # -- outcome ----------------------------------------------------------------

    def abort(self, ctx: TransactionContext, reason: AbortReason = AbortReason.APPLICATION_ERROR,
              detail: str = "") -> CommitResult:
        txn = ctx.txn
        if txn.status is not Status.ACTIVE:
            return txn.result
        result = CommitResult(None, reason, detail or None)
        specs = [s for s in txn.detached if s.trigger.fires_on(False)]
        durable_specs = [s for s in specs if s.delivery.durable]
        if durable_specs and self.log_writer is not None:
            try:
                with self._seq_lock:
                    tid = self._next_tid
                    self._next_tid += 1
                    self.log_writer.append_group(tid, [], durable_specs, None)
            except OSError as exc:
                log.error("could not log detached specs of aborted transaction: %s", exc)
        self._finish(txn, Status.ABORTED, result)
        self.detached.enqueue(specs)
        return result

    def _finish(self, txn, status, result):
        txn.writes = {}
        txn.status = status
        txn.result = result
        if self.on_finish is not None:
            self.on_finish(txn, result)

    def commit(self, ctx: TransactionContext) -> CommitResult:
        txn = ctx.txn
        if txn.status is not Status.ACTIVE:
            return txn.result
        if txn.doom is not None:
            return self.abort(ctx, *txn.doom)

        # phase 1: lock the write footprint in global order
        lock_set: dict[tuple, Slot] = {}
        for rel, pending in txn.writes.items():
            for rid in itertools.chain(pending.updates, pending.deletes):
                rec = rel.records.get(rid)
                if rec is None or rec.values is None:
                    # deleted since we read it
                    return self.abort(ctx, AbortReason.READ_VALIDATION, f"record {rid} gone")
                lock_set[rec.key] = rec
                old = rec.values
                new = pending.updates.get(rid)
                if new is None or rel.moves_index(old, new):
                    for leaf in rel.leaves_of(old):
                        lock_set[leaf.key] = leaf
                    if new is not None:
                        for leaf in rel.leaves_of(new):
                            lock_set[leaf.key] = leaf
            if pending.inserts or pending.deletes:
                lock_set[rel.structure.key] = rel.structure
            for row in pending.inserts.values():
                for leaf in rel.leaves_of(row):
                    lock_set[leaf.key] = leaf
        ordered = [lock_set[k] for k in sorted(lock_set, key=_order_key)]
        if self.debug_lock_order:
            keys = [_order_key(s.key) for s in ordered]
            assert keys == sorted(keys), "write locks out of global order"
        acquired = []
        try:
            for slot in ordered:
                slot.lock(txn)
                acquired.append(slot)

            # phase 2: validate observed versions
            for slot, seen in txn.reads.items():
                if slot.state[0] != seen or slot.locked_by_other(txn):
                    kind = slot.key[1]
                    reason = (AbortReason.READ_VALIDATION if kind == RECORD
                              else AbortReason.SCAN_VALIDATION)
                    return self.abort(ctx, reason, f"slot {slot.key}")

            # phase 3: unordered conflicting siblings
            witness = detect_racy_siblings(txn)
            if witness is not None:
                key, a, b = witness
                return self.abort(ctx, AbortReason.RACY_SIBLINGS,
                                  f"{key} touched by unordered {a.label} and {b.label}")

            specs = [s for s in txn.detached if s.trigger.fires_on(True)]
            with self._seq_lock:
                tid = self._next_tid
                if self.log_writer is not None:
                    entries = self._log_entries(txn)
                    durable_specs = [s for s in specs if s.delivery.durable]
                    done = txn.detached_from
                    done_id = done.spec_id if done is not None and done.delivery.durable else None
                    if entries or durable_specs or done_id:
                        try:
                            self.log_writer.append_group(tid, entries, durable_specs, done_id)
                        except OSError as exc:
                            return self.abort(ctx, AbortReason.IO_ERROR, str(exc))
                self._next_tid = tid + 1
                txn.tid = tid

            for rel, pending in txn.writes.items():
                for rid, row in pending.updates.items():
                    rel.install_update(rel.records[rid], row)
                for rid in pending.deletes:
                    rel.install_delete(rel.records[rid])
                for rid, row in pending.inserts.items():
                    rel.install_insert(rid, row)
                if pending.inserts or pending.deletes:
                    rel.structure.bump()
        finally:
            for slot in reversed(acquired):
                slot.unlock()

        result = CommitResult(tid)
        self._finish(txn, Status.COMMITTED, result)
        self.detached.enqueue(specs)
        return result

    def _log_entries(self, txn):
        entries = []
        for rel, pending in txn.writes.items():
            if rel.owner is None or not self.durable(rel.owner):
                continue
            name = rel.schema.name
            for rid, row in sorted(pending.updates.items()):
                entries.append((rel.owner, name, "update", rid, tuple(row)))
            for rid in sorted(pending.deletes):
                entries.append((rel.owner, name, "delete", rid, ()))
            for rid, row in sorted(pending.inserts.items()):
                entries.append((rel.owner, name, "insert", rid, tuple(row)))
        return entries


def _order_key(key):
    rel_id, kind, ident = key
    if kind == LEAF:
        return (rel_id, kind, ident[0], ident[1])
    return (rel_id, kind, "", ident)


def detach(ctx: TransactionContext, spec: DetachedSpec) -> None:
    ctx.check_active()
    with ctx.txn.lock:
        ctx.txn.detached.append(spec)


# ---------------------------------------------------------------------------
# detached execution
# ---------------------------------------------------------------------------

class DetachedQueue:
    """Runs detached invocations as independent root transactions.

    ``runner(spec) -> CommitResult`` executes one attempt. at_most_once
    specs get exactly one attempt; the other deliveries are retried with
    exponential backoff until they commit or the retry limit is hit.
    exactly_once specs are de-duplicated by spec id.
    """

    def __init__(self, runner, retry_limit: int = 10, backoff: float = 0.001,
                 on_failure: Callable | None = None):
        self.runner = runner
        self.retry_limit = retry_limit
        self.backoff = backoff
        self.on_failure = on_failure
        self._queue: deque[DetachedSpec] = deque()
        self._cv = threading.Condition()
        self._done: set[str] = set()
        self._busy = 0
        self._thread = None
        self._stop = False
        self.executions = 0

    def __len__(self):
        return len(self._queue)

    @property
    def done_ids(self) -> frozenset:
        return frozenset(self._done)

    def mark_done(self, spec_ids: Iterable[str]) -> None:
        self._done.update(spec_ids)

    def enqueue(self, specs: Iterable[DetachedSpec]) -> None:
        specs = list(specs)
        if not specs:
            return
        with self._cv:
            self._queue.extend(specs)
            self._cv.notify_all()

    def _pop(self):
        with self._cv:
            if not self._queue:
                return None
            self._busy += 1
            return self._queue.popleft()

    def _run(self, spec: DetachedSpec) -> bool:
        """Run one spec to its delivery contract; True if it executed."""
        if spec.delivery is Delivery.EXACTLY_ONCE and spec.spec_id in self._done:
            return False
        attempts = 1 if spec.delivery is Delivery.AT_MOST_ONCE else self.retry_limit
        result = None
        for attempt in range(attempts):
            try:
                result = self.runner(spec)
            except Exception as exc:  # noqa: BLE001 - failures are data here
                result = CommitResult(None, AbortReason.APPLICATION_ERROR, repr(exc))
            self.executions += 1
            if result.committed:
                if spec.delivery is not Delivery.AT_MOST_ONCE:
                    self._done.add(spec.spec_id)
                return True
            if attempt + 1 < attempts:
                time.sleep(self.backoff * (2 ** attempt))
        if self.on_failure is not None:
            self.on_failure(spec, result)
        return True

    def process(self) -> int:
        """Drain the queue in the calling thread; returns specs executed."""
        n = 0
        while True:
            spec = self._pop()
            if spec is None:
                return n
            try:
                if self._run(spec):
                    n += 1
            finally:
                with self._cv:
                    self._busy -= 1
                    self._cv.notify_all()

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop = False
        self._thread = threading.Thread(target=self._loop, name="detached", daemon=True)
        self._thread.start()

    def _loop(self):
        while True:
            with self._cv:
                while not self._queue and not self._stop:
                    self._cv.wait()
                if self._stop:
                    return
            self.process()

    def stop(self, drain: bool = True) -> None:
        if drain:
            self.wait_idle()
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def wait_idle(self, timeout: float | None = None) -> bool:
        """Block until the queue is empty and nothing is running."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while self._queue or self._busy:
                if self._thread is None:
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cv.wait(remaining)
        if self._thread is None and (self._queue or self._busy):
            self.process()
        return True

    def clear(self) -> None:
        with self._cv:
            self._queue.clear()
