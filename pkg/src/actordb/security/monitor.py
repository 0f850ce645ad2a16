"""Audit trail and per-actor monitoring counters."""

from __future__ import annotations

import copy
import json
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .access import CallFrame


@dataclass(frozen=True)
class AuditRecord:
    timestamp: float
    caller: CallFrame | None  # None = external client
    target: CallFrame
    decision: str  # "allow" | "deny" | "warn"
    tid: int | None = None
    note: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "caller": "external" if self.caller is None else list(self.caller),
            "target": list(self.target),
            "decision": self.decision,
            "tid": self.tid,
            "note": self.note,
        }


class AuditLog:
    """Bounded append-only audit trail (oldest records fall off)."""

    def __init__(self, capacity: int = 100_000):
        self._records: deque[AuditRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.total = 0

    def record(self, caller: CallFrame | None, target: CallFrame, decision: str,
               tid: int | None = None, note: str = "") -> AuditRecord:
        rec = AuditRecord(time.time(), caller, target, decision, tid, note)
        with self._lock:
            self._records.append(rec)
            self.total += 1
        return rec

    def tail(self, n: int) -> list[AuditRecord]:
        if n <= 0:
            return []
        with self._lock:
            return list(self._records)[-n:]

    def __len__(self):
        return len(self._records)

    def export_jsonl(self, path: str | Path, records: Iterable[AuditRecord] | None = None) -> int:
        records = list(self._records) if records is None else list(records)
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        return len(records)


@dataclass
class ActorStats:
    invocations: int = 0
    commits: int = 0
    aborts: dict[str, int] = field(default_factory=dict)
    busy_seconds: float = 0.0
    denied: int = 0
    commits_by_method: dict[str, int] = field(default_factory=dict)

    @property
    def abort_total(self) -> int:
        return sum(self.aborts.values())


class StatsRegistry:
    """Contention-safe per-actor counters keyed by actor address."""

    def __init__(self):
        self._stats: dict[Any, ActorStats] = {}
        self._lock = threading.Lock()

    def _get(self, addr) -> ActorStats:
        st = self._stats.get(addr)
        if st is None:
            st = self._stats.setdefault(addr, ActorStats())
        return st

    def record_invocation(self, addr, seconds: float) -> None:
        with self._lock:
            st = self._get(addr)
            st.invocations += 1
            st.busy_seconds += seconds

    def record_denied(self, addr) -> None:
        with self._lock:
            self._get(addr).denied += 1

    def record_outcome(self, participants: dict, committed: bool, reason: str | None) -> None:
        """Count one outcome per participating actor; ``participants`` maps address -> methods."""
        with self._lock:
            for addr, methods in participants.items():
                st = self._get(addr)
                if committed:
                    st.commits += 1
                    for m in methods:
                        st.commits_by_method[m] = st.commits_by_method.get(m, 0) + 1
                else:
                    st.aborts[reason] = st.aborts.get(reason, 0) + 1

    def snapshot(self) -> dict[Any, ActorStats]:
        with self._lock:
            return copy.deepcopy(self._stats)

    def clear(self) -> None:
        with self._lock:
            self._stats.clear()


def stats_to_json(snapshot: dict[Any, ActorStats]) -> str:
    payload = {str(addr): asdict(st) for addr, st in sorted(snapshot.items(), key=lambda kv: str(kv[0]))}
    return json.dumps(payload, indent=2, sort_keys=True)
