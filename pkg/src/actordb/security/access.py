"""Access-rule sets and the allow/deny decision.

Each GRANT contributes one *edge* per object pattern: (subject, object).
Edges without a NAMES clause on either side are *method-level* edges;
edges with one are *name-scoped*.

A call (caller type, method, name) -> (target type, method, name) is
allowed iff

1. some method-level edge covers it, and
2. if any name-scoped edge *applies* to it -- its subject pattern matches
   the caller fully and its object pattern matches the target's type --
   then at least one of those applicable edges covers it fully.

So name-scoped rules narrow method-level rules rather than widen them.
Until a REVOKE has been applied, every call is allowed; after it, calls are
denied unless granted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from ..errors import RuleConflict
from .dsl import ALL, AdminCommand, Grant, Pattern, RevokeAll


class CallFrame(NamedTuple):
    type_name: str
    method: str
    actor_name: str

    def __str__(self):
        return f"{self.type_name}[{self.actor_name}].{self.method}"


@dataclass(frozen=True)
class Edge:
    subject: Pattern
    object: Pattern

    @property
    def name_scoped(self) -> bool:
        return self.subject.names is not None or self.object.names is not None

    def covers(self, caller: CallFrame, target: CallFrame) -> bool:
        return self.subject.matches(*caller) and self.object.matches(*target)

    def applies(self, caller: CallFrame, target: CallFrame) -> bool:
        return self.subject.matches(*caller) and self.object.matches_type(target.type_name)


@dataclass(frozen=True)
class AccessRuleSet:
    """Immutable rule set; updates produce a new instance."""

    restricted: bool = False
    grants: tuple[Grant, ...] = ()
    method_edges: tuple[Edge, ...] = field(default=(), compare=False, repr=False)
    named_edges: tuple[Edge, ...] = field(default=(), compare=False, repr=False)

    @classmethod
    def build(cls, restricted: bool, grants: Iterable[Grant]) -> "AccessRuleSet":
        grants = tuple(dict.fromkeys(grants))  # set semantics, first-seen order
        edges = [Edge(g.subject, o) for g in grants for o in g.objects]
        return cls(restricted, grants,
                   tuple(e for e in edges if not e.name_scoped),
                   tuple(e for e in edges if e.name_scoped))

    def allows(self, caller: CallFrame | None, target: CallFrame) -> bool:
        """Pure decision. ``caller=None`` is an external client: always allowed."""
        if caller is None or not self.restricted:
            return True
        if not any(e.covers(caller, target) for e in self.method_edges):
            return False
        applicable = [e for e in self.named_edges if e.applies(caller, target)]
        return not applicable or any(e.covers(caller, target) for e in applicable)

    def apply(self, commands: Iterable[AdminCommand]) -> "AccessRuleSet":
        """Rule set after the access commands in ``commands`` (others ignored)."""
        restricted, grants = self.restricted, list(self.grants)
        for cmd in commands:
            if isinstance(cmd, RevokeAll):
                restricted, grants = True, []
            elif isinstance(cmd, Grant):
                grants.append(cmd)
        out = AccessRuleSet.build(restricted, grants)
        out.check_composition()
        return out

    def check_composition(self) -> None:
        """Reject rule sets that do not compose cleanly."""
        for g in self.grants:
            for p in (g.subject, *g.objects):
                if p.type_name == ALL and (p.methods is not None or p.names is not None):
                    raise RuleConflict(
                        "a pattern over type ALL cannot restrict methods or names")
        for e in self.named_edges:
            if not any(_may_overlap(m, e) for m in self.method_edges):
                raise RuleConflict(
                    f"name-scoped grant {e.subject.type_name} -> {e.object.type_name} "
                    "has no method-level grant to narrow; it could never allow a call")


def _may_overlap(method_edge: Edge, named: Edge) -> bool:
    def types(a: Pattern, b: Pattern) -> bool:
        return a.type_name == ALL or b.type_name == ALL or a.type_name == b.type_name

    def methods(a: Pattern, b: Pattern) -> bool:
        return a.methods is None or b.methods is None or bool(set(a.methods) & set(b.methods))

    return all(types(a, b) and methods(a, b) for a, b in
               ((method_edge.subject, named.subject), (method_edge.object, named.object)))


def referenced_types(commands: Iterable[AdminCommand]) -> set[str]:
    out = set()
    for cmd in commands:
        if isinstance(cmd, Grant):
            for p in (cmd.subject, *cmd.objects):
                if p.type_name != ALL:
                    out.add(p.type_name)
    return out


# sentinel actor name that no NAMES clause can mention
_ANY_NAME = "\x00any"


def verify(rules: AccessRuleSet, call_graph: Iterable[tuple[str, str, str, str]],
           ) -> list[tuple[str, str, str, str]]:
    """Statically check declared calls ``(caller type, method, callee type, method)``.

    Returns the calls the rule set would deny for actors not singled out by
    any NAMES clause -- i.e. edges the application makes but can never
    execute.
    """
    denied = []
    for ct, cm, tt, tm in call_graph:
        if not rules.allows(CallFrame(ct, cm, _ANY_NAME), CallFrame(tt, tm, _ANY_NAME)):
            denied.append((ct, cm, tt, tm))
    return denied
