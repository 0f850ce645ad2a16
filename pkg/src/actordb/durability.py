"""Redo log for committed writes of durable actors, and crash recovery.

On-disk format: a sequence of frames ``<u32 length><u32 crc32><payload>``
(little-endian). Each committed transaction is a contiguous group of
frames sharing its tid, closed by a commit marker that carries the number
of frames in the group. Payload kinds:

    W  write      tid, actor type, actor name, relation, op, rid, post-image
    S  spec       tid, detached invocation queued by the transaction
    D  done       tid, id of the detached spec this transaction executed
    C  commit     tid, frame count

A group is written with a single ``write`` call. An incomplete frame, or a
bad checksum on the very last frame, is a torn tail and gets truncated. A
bad checksum anywhere else means the log is corrupt.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .address import ActorAddress
from .errors import CorruptLog
from .txn import Delivery, DetachedSpec, Trigger

log = logging.getLogger(__name__)

_HEADER = struct.Struct("<II")
_OPS = {"insert": 0, "update": 1, "delete": 2}
_OP_NAMES = {v: k for k, v in _OPS.items()}
_TRIGGERS = list(Trigger)
_DELIVERIES = list(Delivery)


# ---------------------------------------------------------------------------
# value codec
# ---------------------------------------------------------------------------

def _enc_str(out: bytearray, s: str) -> None:
    b = s.encode("utf-8")
    out += struct.pack("<I", len(b))
    out += b


def _enc_value(out: bytearray, v: Any) -> None:
    if v is None:
        out += b"n"
    elif isinstance(v, bool):
        out += b"b" + (b"\x01" if v else b"\x00")
    elif isinstance(v, int):
        out += b"i" + struct.pack("<q", v)
    elif isinstance(v, float):
        out += b"f" + struct.pack("<d", v)
    elif isinstance(v, str):
        out += b"s"
        _enc_str(out, v)
    elif isinstance(v, (list, tuple)):
        out += (b"t" if isinstance(v, tuple) else b"l") + struct.pack("<I", len(v))
        for x in v:
            _enc_value(out, x)
    else:
        raise TypeError(f"cannot log value of type {type(v).__name__}")


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        b = self.buf[self.pos:self.pos + n]
        if len(b) != n:
            raise CorruptLog("truncated payload")
        self.pos += n
        return b

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def value(self) -> Any:
        tag = self.take(1)
        if tag == b"n":
            return None
        if tag == b"b":
            return self.take(1) == b"\x01"
        if tag == b"i":
            return struct.unpack("<q", self.take(8))[0]
        if tag == b"f":
            return struct.unpack("<d", self.take(8))[0]
        if tag == b"s":
            return self.str()
        if tag in (b"l", b"t"):
            items = [self.value() for _ in range(self.u32())]
            return tuple(items) if tag == b"t" else items
        raise CorruptLog(f"unknown value tag {tag!r}")


def _frame(payload: bytes) -> bytes:
    return _HEADER.pack(len(payload), zlib.crc32(payload)) + payload


def encode_group(tid: int, entries: Iterable[tuple], specs: Iterable[DetachedSpec],
                 done_id: str | None) -> bytes:
    """Serialize one transaction's frames, commit marker included."""
    frames = []
    for owner, rel_name, op, rid, values in entries:
        p = bytearray(b"W")
        p += struct.pack("<Q", tid)
        _enc_str(p, owner[0])
        _enc_str(p, owner[1])
        _enc_str(p, rel_name)
        p += struct.pack("<BQ", _OPS[op], rid)
        _enc_value(p, tuple(values))
        frames.append(_frame(bytes(p)))
    for spec in specs:
        p = bytearray(b"S")
        p += struct.pack("<Q", tid)
        _enc_str(p, spec.spec_id)
        _enc_str(p, spec.target[0])
        _enc_str(p, spec.target[1])
        _enc_str(p, spec.method)
        _enc_value(p, tuple(spec.args))
        p += struct.pack("<BBI", _TRIGGERS.index(spec.trigger),
                         _DELIVERIES.index(spec.delivery), spec.depth)
        frames.append(_frame(bytes(p)))
    if done_id is not None:
        p = bytearray(b"D")
        p += struct.pack("<Q", tid)
        _enc_str(p, done_id)
        frames.append(_frame(bytes(p)))
    frames.append(_frame(b"C" + struct.pack("<QI", tid, len(frames))))
    return b"".join(frames)


# ---------------------------------------------------------------------------
# writer
# ---------------------------------------------------------------------------

FSYNC_POLICIES = ("commit", "group", "none")


class LogWriter:
    """Append-only log file; one ``append_group`` per committing transaction.

    ``fsync="commit"`` syncs every group before returning, ``"group"``
    syncs at most every ``group_interval`` seconds, ``"none"`` leaves it to
    the OS. Callers serialize appends (the commit sequencer does).
    """

    def __init__(self, path: str | Path, fsync: str = "commit", group_interval: float = 0.005):
        if fsync not in FSYNC_POLICIES:
            raise ValueError(f"fsync policy must be one of {FSYNC_POLICIES}")
        self.path = Path(path)
        self.fsync = fsync
        self.group_interval = group_interval
        self._fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        self._last_sync = time.monotonic()
        self._lock = threading.Lock()
        self.bytes_written = 0
        self.groups_written = 0
        self.fail_next: Exception | None = None  # test hook

    def append_group(self, tid: int, entries, specs, done_id) -> None:
        data = encode_group(tid, entries, specs, done_id)
        with self._lock:
            if self.fail_next is not None:
                exc, self.fail_next = self.fail_next, None
                raise exc
            view = memoryview(data)
            while view:
                n = os.write(self._fd, view)
                view = view[n:]
            if self.fsync == "commit":
                os.fsync(self._fd)
            elif self.fsync == "group":
                now = time.monotonic()
                if now - self._last_sync >= self.group_interval:
                    os.fsync(self._fd)
                    self._last_sync = now
            self.bytes_written += len(data)
            self.groups_written += 1

    def sync(self) -> None:
        with self._lock:
            os.fsync(self._fd)

    def close(self, sync: bool = True) -> None:
        with self._lock:
            if self._fd < 0:
                return
            if sync:
                os.fsync(self._fd)
            os.close(self._fd)
            self._fd = -1

    def abandon(self) -> None:
        """Drop the descriptor without syncing, as a crash would."""
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1


# ---------------------------------------------------------------------------
# reading and recovery
# ---------------------------------------------------------------------------

@dataclass
class LogGroup:
    tid: int
    writes: list  # (ActorAddress, relation, op, rid, values)
    specs: list  # DetachedSpec
    done: list  # spec ids


@dataclass
class RecoveryReport:
    tids_replayed: int = 0
    truncated_bytes: int = 0
    specs_restored: int = 0
    last_tid: int = 0


def _decode(payload: bytes):
    r = _Reader(payload)
    kind = r.take(1)
    tid = r.u64()
    if kind == b"W":
        addr = ActorAddress(r.str(), r.str())
        rel = r.str()
        op = _OP_NAMES[r.u8()]
        rid = r.u64()
        return "W", tid, (addr, rel, op, rid, r.value())
    if kind == b"S":
        spec_id = r.str()
        addr = ActorAddress(r.str(), r.str())
        method = r.str()
        args = r.value()
        trig, deliv, depth = struct.unpack("<BBI", r.take(6))
        return "S", tid, DetachedSpec(addr, method, tuple(args), _TRIGGERS[trig],
                                      _DELIVERIES[deliv], spec_id, None, depth)
    if kind == b"D":
        return "D", tid, r.str()
    if kind == b"C":
        return "C", tid, r.u32()
    raise CorruptLog(f"unknown frame kind {kind!r}")


def read_log(data: bytes) -> tuple[list[LogGroup], int]:
    """Parse complete groups; returns them and the byte offset where they end."""
    groups: list[LogGroup] = []
    pos = 0
    good_end = 0
    size = len(data)
    open_group: LogGroup | None = None
    nframes = 0
    while pos < size:
        if size - pos < _HEADER.size:
            break
        length, crc = _HEADER.unpack_from(data, pos)
        end = pos + _HEADER.size + length
        if end > size:
            break
        payload = data[pos + _HEADER.size:end]
        if zlib.crc32(payload) != crc:
            if end == size:
                break
            raise CorruptLog(f"checksum mismatch at byte {pos}")
        kind, tid, body = _decode(payload)
        if open_group is None:
            open_group = LogGroup(tid, [], [], [])
            nframes = 0
        elif open_group.tid != tid:
            raise CorruptLog(f"frame for tid {tid} inside group {open_group.tid} at byte {pos}")
        if kind == "C":
            if body != nframes:
                raise CorruptLog(f"tid {tid}: commit marker counts {body} frames, saw {nframes}")
            if groups and tid <= groups[-1].tid:
                raise CorruptLog(f"tid {tid} out of order at byte {pos}")
            groups.append(open_group)
            open_group = None
            good_end = end
        else:
            nframes += 1
            {"W": open_group.writes, "S": open_group.specs, "D": open_group.done}[kind].append(body)
        pos = end
    return groups, good_end


def replay(path: str | Path, resolve: Callable[[ActorAddress, str], Any],
           truncate: bool = True) -> tuple[RecoveryReport, list[DetachedSpec], set[str]]:
    """Apply committed groups of the log at ``path`` in tid order.

    ``resolve(address, relation_name)`` returns the target relation or
    ``None`` to skip (e.g. an actor that no longer exists). Returns the
    report, the durable detached specs still owed an execution, and the ids
    of specs already executed.
    """
    path = Path(path)
    report = RecoveryReport()
    if not path.exists():
        return report, [], set()
    data = path.read_bytes()
    groups, good_end = read_log(data)
    report.truncated_bytes = len(data) - good_end
    if report.truncated_bytes and truncate:
        log.warning("truncating %d byte torn tail of %s", report.truncated_bytes, path)
        with open(path, "r+b") as fh:
            fh.truncate(good_end)
            fh.flush()
            os.fsync(fh.fileno())

    specs: dict[str, DetachedSpec] = {}
    done: set[str] = set()
    for group in groups:
        for addr, rel_name, op, rid, values in group.writes:
            rel = resolve(addr, rel_name)
            if rel is None:
                continue
            if op == "delete":
                rel.remove(rid)
            else:
                rel.put(rid, values)
        for spec in group.specs:
            specs[spec.spec_id] = spec
        done.update(group.done)
        report.tids_replayed += 1
        report.last_tid = group.tid
    owed = [s for sid, s in specs.items() if sid not in done]
    report.specs_restored = len(owed)
    return report, owed, done
