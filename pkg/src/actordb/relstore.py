"""Per-actor relational state.

Relations hold versioned records under optimistic concurrency control. Every
read path reports what it observed to the calling transaction context so the
commit protocol can validate it later; writes are staged in the context and
installed only by the commit protocol (see :mod:`actordb.txn`).

A context (``ctx``) passed to the functions below must provide::

    ctx.writes_for(rel)              -> PendingWrites | None
    ctx.stage(rel)                   -> PendingWrites   (creates on demand)
    ctx.note_read(rel, slot, version)
    ctx.note_scan(rel, slot, version)
    ctx.note_write(rel, rid, structural)

Passing ``ctx=None`` reads committed state without any tracking; that is
used for transient relations, loaders and snapshots.
"""

from __future__ import annotations

import csv
import itertools
import math
import threading
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import DuplicateRelation, InvalidSchema, TypeMismatch, UnknownColumn, UnknownRelation

COLUMN_TYPES = ("int", "float", "string", "timestamp")

# slot kinds, part of the global lock-ordering key (rel_id, kind, id)
STRUCTURE, LEAF, RECORD = 0, 1, 2

DEFAULT_LEAF_SPAN = 16

_rel_ids = itertools.count(1)
_lock_latch = threading.Lock()


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schema:
    name: str
    columns: tuple[tuple[str, str], ...]
    encrypted: bool = False
    indexes: tuple[str, ...] = ()

    def __post_init__(self):
        cols = tuple((str(c), str(t)) for c, t in self.columns)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "indexes", tuple(self.indexes))
        if not self.name:
            raise InvalidSchema("relation name must be non-empty")
        if not cols:
            raise InvalidSchema(f"relation {self.name!r} needs at least one column")
        names = [c for c, _ in cols]
        if len(set(names)) != len(names):
            raise InvalidSchema(f"duplicate column names in {self.name!r}")
        for c, t in cols:
            if t not in COLUMN_TYPES:
                raise InvalidSchema(f"column {c!r} has unsupported type {t!r}")
            if not c.isidentifier():
                raise InvalidSchema(f"column name {c!r} is not an identifier")
        pos = {c: i for i, c in enumerate(names)}
        for ix in self.indexes:
            if ix not in pos:
                raise InvalidSchema(f"index on unknown column {ix!r}")
            if dict(cols)[ix] not in ("int", "timestamp"):
                raise InvalidSchema(f"index column {ix!r} must be integer typed")
        object.__setattr__(self, "_pos", pos)
        object.__setattr__(self, "_row", namedtuple("Row", names))

    @classmethod
    def of(cls, name: str, spec: str, encrypted: bool = False, indexes: Sequence[str] = ()) -> "Schema":
        """Build a schema from ``"a int, b float"`` style text."""
        cols = []
        for part in spec.split(","):
            bits = part.split()
            if len(bits) != 2:
                raise InvalidSchema(f"bad column spec {part!r}")
            cols.append((bits[0], bits[1]))
        return cls(name, tuple(cols), encrypted, tuple(indexes))

    @property
    def column_names(self) -> tuple[str, ...]:
        return self._row._fields

    @property
    def row_type(self):
        return self._row

    def position(self, column: str) -> int:
        try:
            return self._pos[column]
        except KeyError:
            raise UnknownColumn(f"{self.name}.{column}") from None

    def type_of(self, column: str) -> str:
        return self.columns[self.position(column)][1]

    def coerce(self, values: Iterable[Any]):
        values = tuple(values)
        if len(values) != len(self.columns):
            raise TypeMismatch(
                f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        return self._row._make(_coerce(v, c, t) for v, (c, t) in zip(values, self.columns))

    def with_prefix(self, name: str, prefix: Sequence[tuple[str, str]]) -> "Schema":
        return Schema(name, tuple(prefix) + self.columns)


def _coerce(v, col, typ):
    if typ == "float":
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
    elif typ in ("int", "timestamp"):
        if isinstance(v, int) and not isinstance(v, bool):
            return v
    elif typ == "string":
        if isinstance(v, str):
            return v
    raise TypeMismatch(f"column {col!r} ({typ}) cannot hold {v!r}")


# ---------------------------------------------------------------------------
# versioned slots
# ---------------------------------------------------------------------------

class Slot:
    """A lockable version word. Records carry their row in ``state`` too.

    ``state`` is a ``(version, values)`` pair replaced as a whole so that
    readers always see a consistent snapshot of both.
    """

    __slots__ = ("state", "key", "owner", "_lock")

    def __init__(self, key, values=None, version=0):
        self.key = key
        self.state = (version, values)
        self.owner = None
        self._lock = None

    @property
    def version(self) -> int:
        return self.state[0]

    @property
    def values(self):
        return self.state[1]

    def lock(self, owner) -> None:
        lk = self._lock
        if lk is None:
            with _lock_latch:
                if self._lock is None:
                    self._lock = threading.Lock()
                lk = self._lock
        lk.acquire()
        self.owner = owner

    def unlock(self) -> None:
        self.owner = None
        self._lock.release()

    def locked_by_other(self, me) -> bool:
        owner = self.owner
        return owner is not None and owner is not me

    def bump(self, values=None, keep_values=True) -> None:
        ver, old = self.state
        self.state = (ver + 1, old if keep_values and values is None else values)

    def __repr__(self):
        return f"Slot({self.key}, v{self.state[0]})"


class PendingWrites:
    """Writes a transaction staged against one relation."""

    __slots__ = ("updates", "inserts", "deletes")

    def __init__(self):
        self.updates: dict[int, tuple] = {}
        self.inserts: dict[int, tuple] = {}
        self.deletes: set[int] = set()

    def __bool__(self):
        return bool(self.updates or self.inserts or self.deletes)


# ---------------------------------------------------------------------------
# relations
# ---------------------------------------------------------------------------

class Relation:
    """Schema-typed record store with record, leaf and relation versions.

    Scans that probe an index observe the version of each index leaf they
    touch (``scan_granularity="leaf"``) or the whole-relation version
    (``"relation"``); unindexed scans always observe the relation version.
    A leaf covers ``leaf_span`` consecutive key values.
    """

    def __init__(self, schema: Schema, owner=None, *, scan_granularity: str = "leaf",
                 leaf_span: int = DEFAULT_LEAF_SPAN):
        if scan_granularity not in ("leaf", "relation"):
            raise ValueError(f"unknown scan granularity {scan_granularity!r}")
        self.schema = schema
        self.owner = owner
        self.rel_id = next(_rel_ids)
        self.scan_granularity = scan_granularity
        self.leaf_span = max(1, int(leaf_span))
        self.records: dict[int, Slot] = {}
        self.structure = Slot((self.rel_id, STRUCTURE, 0))
        self.indexes: dict[str, dict[int, set[int]]] = {c: {} for c in schema.indexes}
        self._index_pos = {c: schema.position(c) for c in schema.indexes}
        self.leaves: dict[tuple[str, int], Slot] = {}
        self._rids = itertools.count(1)
        self._rid_floor = 0

    def __repr__(self):
        return f"Relation({self.schema.name}@{self.owner}, {len(self.records)} rows)"

    @property
    def name(self) -> str:
        return self.schema.name

    @property
    def relation_version(self) -> int:
        return self.structure.version

    @property
    def transient(self) -> bool:
        return self.owner is None

    def next_rid(self) -> int:
        return next(self._rids)

    def leaf(self, column: str, key: int) -> Slot:
        lid = key // self.leaf_span
        slot = self.leaves.get((column, lid))
        if slot is None:
            slot = self.leaves.setdefault(
                (column, lid), Slot((self.rel_id, LEAF, (column, lid))))
        return slot

    def scan_slots_for(self, column: str, keys: Iterable[int]) -> list[Slot]:
        if self.scan_granularity == "relation":
            return [self.structure]
        seen = {}
        for k in keys:
            s = self.leaf(column, k)
            seen[s.key] = s
        return list(seen.values())

    # -- committed-state maintenance (loader, recovery, commit install) ----

    def _reserve(self, rid: int) -> None:
        if rid > self._rid_floor:
            self._rid_floor = rid
            # never hand out a rid at or below one already used
            self._rids = itertools.count(rid + 1)

    def _index_add(self, rid, row):
        for col, pos in self._index_pos.items():
            self.indexes[col].setdefault(row[pos], set()).add(rid)

    def _index_remove(self, rid, row):
        for col, pos in self._index_pos.items():
            bucket = self.indexes[col].get(row[pos])
            if bucket is not None:
                bucket.discard(rid)
                if not bucket:
                    del self.indexes[col][row[pos]]

    def leaves_of(self, row) -> list[Slot]:
        return [self.leaf(col, row[pos]) for col, pos in self._index_pos.items()]

    def load(self, values) -> int:
        """Insert committed data directly, outside any transaction."""
        row = self.schema.coerce(values)
        rid = self.next_rid()
        self.records[rid] = Slot((self.rel_id, RECORD, rid), row)
        self._index_add(rid, row)
        return rid

    def put(self, rid: int, values) -> None:
        """Idempotent upsert of a committed post-image (used by recovery)."""
        row = self.schema.coerce(values)
        rec = self.records.get(rid)
        if rec is None:
            self._reserve(rid)
            self.records[rid] = Slot((self.rel_id, RECORD, rid), row)
            self._index_add(rid, row)
            self.structure.bump()
        else:
            self._index_remove(rid, rec.values)
            rec.bump(row, keep_values=False)
            self._index_add(rid, row)

    def remove(self, rid: int) -> None:
        rec = self.records.pop(rid, None)
        if rec is not None:
            self._index_remove(rid, rec.values)
            rec.bump(None, keep_values=False)
            self.structure.bump()

    def install_insert(self, rid: int, row) -> None:
        rec = Slot((self.rel_id, RECORD, rid), row)
        self.records[rid] = rec
        self._index_add(rid, row)
        for leaf in self.leaves_of(row):
            leaf.bump()

    def moves_index(self, old, new) -> bool:
        return any(old[p] != new[p] for p in self._index_pos.values())

    def install_update(self, rec: Slot, row) -> None:
        old = rec.values
        rid = rec.key[2]
        moved = self.moves_index(old, row)
        if moved:
            self._index_remove(rid, old)
            for leaf in self.leaves_of(old):
                leaf.bump()
        rec.state = (rec.state[0] + 1, row)
        if moved:
            self._index_add(rid, row)
            for leaf in self.leaves_of(row):
                leaf.bump()

    def install_delete(self, rec: Slot) -> None:
        rid = rec.key[2]
        old = rec.values
        self.records.pop(rid, None)
        self._index_remove(rid, old)
        rec.state = (rec.state[0] + 1, None)
        for leaf in self.leaves_of(old):
            leaf.bump()

    def committed_rows(self) -> dict[int, tuple]:
        return {rid: rec.values for rid, rec in sorted(self.records.items())}

    def __len__(self):
        return len(self.records)


class ActorState:
    """The relations owned by one actor."""

    def __init__(self, owner=None, **relation_options):
        self.owner = owner
        self.relations: dict[str, Relation] = {}
        self._options = relation_options

    def __getitem__(self, name: str) -> Relation:
        try:
            return self.relations[name]
        except KeyError:
            raise UnknownRelation(f"{self.owner}: no relation {name!r}") from None

    def __iter__(self):
        return iter(self.relations.values())


def create_relation(state: ActorState, schema: Schema) -> Relation:
    if schema.name in state.relations:
        raise DuplicateRelation(f"{state.owner}: relation {schema.name!r} exists")
    rel = Relation(schema, state.owner, **state._options)
    state.relations[schema.name] = rel
    return rel


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------

def _check_columns(schema: Schema, cols: Iterable[str]) -> None:
    for c in cols:
        schema.position(c)


def _normalize_where(schema: Schema, where: Mapping[str, Any] | None):
    if not where:
        return ()
    out = []
    for col, val in where.items():
        pos = schema.position(col)
        if isinstance(val, (set, frozenset, list, tuple)):
            out.append((col, pos, frozenset(val)))
        else:
            out.append((col, pos, val))
    return tuple(out)


def _matches(row, conds, pred) -> bool:
    for _, pos, val in conds:
        if isinstance(val, frozenset):
            if row[pos] not in val:
                return False
        elif row[pos] != val:
            return False
    return pred is None or bool(pred(row))


def _visible_rows(ctx, rel: Relation, where=None, pred=None):
    """Yield ``(rid, row, slot)`` for rows visible to ``ctx`` that match.

    ``slot`` is ``None`` for rows the context itself inserted.
    """
    conds = _normalize_where(rel.schema, where)
    pending = None if ctx is None or rel.transient else ctx.writes_for(rel)
    track = ctx is not None and not rel.transient

    probe = None
    for col, pos, val in conds:
        if col in rel.indexes:
            keys = val if isinstance(val, frozenset) else (val,)
            probe = (col, keys)
            break

    if probe is not None:
        col, keys = probe
        if track:
            for slot in rel.scan_slots_for(col, keys):
                ctx.note_scan(rel, slot, slot.version)
        index = rel.indexes[col]
        rids = []
        for k in keys:
            bucket = index.get(k)
            if bucket:
                rids.extend(bucket)
        rids.sort()
        candidates = [(rid, rel.records.get(rid)) for rid in rids]
    else:
        if track:
            ctx.note_scan(rel, rel.structure, rel.structure.version)
        candidates = sorted(rel.records.items())

    out = []
    seen_updates = set()
    for rid, rec in candidates:
        if rec is None:
            continue
        version, row = rec.state
        if row is None:
            continue
        if track:
            ctx.note_read(rel, rec, version)
        if pending is not None:
            if rid in pending.deletes:
                continue
            if rid in pending.updates:
                row = pending.updates[rid]
                seen_updates.add(rid)
        if _matches(row, conds, pred):
            out.append((rid, row, rec))

    if pending is not None:
        # own updates that moved a row into the probed key range
        if probe is not None:
            for rid, row in pending.updates.items():
                if rid not in seen_updates and rid not in pending.deletes \
                        and _matches(row, conds, pred):
                    rec = rel.records.get(rid)
                    out.append((rid, row, rec))
        for rid, row in pending.inserts.items():
            if _matches(row, conds, pred):
                out.append((rid, row, None))
        out.sort(key=lambda t: t[0])
    return out


def _project(schema: Schema, rows, columns):
    if columns is None:
        return list(rows)
    pos = [schema.position(c) for c in columns]
    return [tuple(r[p] for p in pos) for r in rows]


def scan(ctx, rel: Relation, where: Mapping[str, Any] | None = None,
         pred: Callable | None = None, columns: Sequence[str] | None = None) -> list:
    """Return matching rows (or projected tuples) in record-id order."""
    if columns is not None:
        _check_columns(rel.schema, columns)
    rows = [row for _, row, _ in _visible_rows(ctx, rel, where, pred)]
    return _project(rel.schema, rows, columns)


def insert(ctx, rel: Relation, values) -> int:
    row = rel.schema.coerce(values)
    if ctx is None or rel.transient:
        return rel.load(row)
    rid = rel.next_rid()
    ctx.stage(rel).inserts[rid] = row
    ctx.note_write(rel, rid, True)
    return rid


def _assign(schema: Schema, row, assignments):
    new = list(row)
    for col, val in assignments.items():
        pos = schema.position(col)
        new[pos] = val(row) if callable(val) else val
    return schema.coerce(new)


def update(ctx, rel: Relation, where: Mapping[str, Any] | None = None,
           assignments: Mapping[str, Any] | None = None, pred: Callable | None = None) -> int:
    """Stage updates on every matching row; callables receive the old row."""
    assignments = assignments or {}
    _check_columns(rel.schema, assignments)
    matched = _visible_rows(ctx, rel, where, pred)
    if ctx is None or rel.transient:
        for rid, row, rec in matched:
            rel.install_update(rec, _assign(rel.schema, row, assignments))
        return len(matched)
    if not matched:
        return 0
    pending = ctx.stage(rel)
    for rid, row, rec in matched:
        new = _assign(rel.schema, row, assignments)
        if rec is None:
            pending.inserts[rid] = new
        else:
            pending.updates[rid] = new
            ctx.note_write(rel, rid, False)
    return len(matched)


def delete(ctx, rel: Relation, where: Mapping[str, Any] | None = None,
           pred: Callable | None = None) -> int:
    matched = _visible_rows(ctx, rel, where, pred)
    if ctx is None or rel.transient:
        for rid, _, _ in matched:
            rel.remove(rid)
        return len(matched)
    if not matched:
        return 0
    pending = ctx.stage(rel)
    for rid, _, rec in matched:
        if rec is None:
            pending.inserts.pop(rid, None)
        else:
            pending.updates.pop(rid, None)
            pending.deletes.add(rid)
            ctx.note_write(rel, rid, True)
    return len(matched)


_AGGREGATES = ("SUM", "AVG", "COUNT", "MIN", "MAX")


def aggregate(ctx, rel: Relation, specs: Sequence[tuple[str, Any]],
              where: Mapping[str, Any] | None = None, pred: Callable | None = None) -> tuple:
    """Evaluate ``[(func, expr), ...]`` over matching rows.

    ``expr`` is a column name, a callable on the row, or ``None`` (``COUNT(*)``).
    SUM/AVG/MIN/MAX over zero rows yield ``None``; COUNT yields 0.
    """
    getters = []
    for func, expr in specs:
        func = func.upper()
        if func not in _AGGREGATES:
            raise ValueError(f"unknown aggregate {func!r}")
        if expr is None:
            if func != "COUNT":
                raise ValueError(f"{func} needs an expression")
            getter = None
        elif callable(expr):
            getter = expr
        else:
            pos = rel.schema.position(expr)
            getter = (lambda p: lambda r: r[p])(pos)
        getters.append((func, getter))

    rows = [row for _, row, _ in _visible_rows(ctx, rel, where, pred)]
    out = []
    for func, getter in getters:
        if func == "COUNT":
            out.append(len(rows) if getter is None else sum(1 for r in rows if getter(r) is not None))
            continue
        vals = [getter(r) for r in rows]
        if not vals:
            out.append(None)
        elif func == "SUM":
            out.append(sum(vals))
        elif func == "AVG":
            out.append(sum(vals) / len(vals))
        elif func == "MIN":
            out.append(min(vals))
        else:
            out.append(max(vals))
    return tuple(out)


@dataclass(frozen=True)
class WindowStats:
    key: Any
    mean: float
    sample_stddev: float
    window_count: int


def summarize(values: Sequence[float], key=None) -> WindowStats:
    n = len(values)
    if n == 0:
        return WindowStats(key, 0.0, 0.0, 0)
    mean = math.fsum(values) / n
    if n == 1:
        return WindowStats(key, mean, 0.0, 1)
    var = math.fsum((x - mean) ** 2 for x in values) / (n - 1)
    return WindowStats(key, mean, math.sqrt(var), n)


def window_stats(ctx, rel: Relation, partition_col: str, order_col: str, value_col: str,
                 k: int, keys: Iterable[Any]) -> list[WindowStats]:
    """Mean and sample stddev of ``value_col`` over the ``k`` most recent rows per key.

    Recency is ``order_col`` descending, ties broken by the larger record id.
    Keys without rows come back with ``window_count == 0``.
    """
    if k < 1:
        raise ValueError("window size must be >= 1")
    schema = rel.schema
    ppos = schema.position(partition_col)
    opos = schema.position(order_col)
    vpos = schema.position(value_col)
    if schema.columns[opos][1] not in ("int", "timestamp"):
        raise TypeMismatch(f"order column {order_col!r} must be int or timestamp")
    keys = list(dict.fromkeys(keys))
    groups: dict[Any, list] = {key: [] for key in keys}
    for rid, row, _ in _visible_rows(ctx, rel, {partition_col: set(keys)}):
        groups[row[ppos]].append((row[opos], rid, row[vpos]))
    out = []
    for key in keys:
        rows = groups[key]
        rows.sort(reverse=True)
        out.append(summarize([v for _, _, v in rows[:k]], key))
    return out


# ---------------------------------------------------------------------------
# list/relation conversion and CSV loading
# ---------------------------------------------------------------------------

def list_to_relation(values: Iterable[Sequence], schema: Schema) -> Relation:
    rel = Relation(schema)
    for v in values:
        rel.load(v)
    return rel


def relation_to_list(rel: Relation) -> list[tuple]:
    return [tuple(row) for row in rel.committed_rows().values()]


def parse_csv_name(path: str | Path) -> tuple[str, str, str]:
    """Split ``<type>.<name>.<relation>.csv`` into its three parts."""
    name = Path(path).name
    if not name.endswith(".csv"):
        raise ValueError(f"{name}: not a .csv file")
    parts = name[:-4].split(".")
    if len(parts) != 3 or not all(parts):
        raise ValueError(f"{name}: expected <type>.<name>.<relation>.csv")
    return parts[0], parts[1], parts[2]


_PARSERS = {"int": int, "timestamp": int, "float": float, "string": str}


def load_csv(rel: Relation, path: str | Path) -> int:
    """Bulk-load committed rows from a CSV whose header matches the schema."""
    schema = rel.schema
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != schema.column_names:
            raise TypeMismatch(
                f"{path}: header {header} does not match {schema.column_names}")
        parsers = [_PARSERS[t] for _, t in schema.columns]
        n = 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(parsers):
                raise TypeMismatch(f"{path}:{lineno}: expected {len(parsers)} fields")
            try:
                vals = [p(x) for p, x in zip(parsers, rec)]
            except ValueError as exc:
                raise TypeMismatch(f"{path}:{lineno}: {exc}") from None
            rel.load(vals)
            n += 1
    return n
