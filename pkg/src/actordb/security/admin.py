"""Applying admin scripts to an engine: lifecycle plus access rules, all or nothing."""

from __future__ import annotations

from typing import Iterable

from ..address import ActorAddress
from ..errors import DuplicateActor, UnknownActor
from .access import AccessRuleSet
from .dsl import ALL, AdminCommand, CreateActors, DropActors, Grant, parse_admin_script


def validate(engine, commands: list[AdminCommand]) -> AccessRuleSet:
    """Check a whole script against the engine without changing anything.

    Returns the rule set the script would install.
    """
    live = set(engine.list_actors())
    for cmd in commands:
        if isinstance(cmd, (CreateActors, DropActors)):
            engine.actor_type(cmd.type_name)
            addrs = [ActorAddress(cmd.type_name, n) for n in cmd.names]
            if isinstance(cmd, CreateActors):
                clash = [a for a in addrs if a in live]
                if clash or len(set(addrs)) != len(addrs):
                    raise DuplicateActor(f"actor(s) already exist: {', '.join(map(str, clash))}")
                live.update(addrs)
            else:
                missing = [a for a in addrs if a not in live]
                if missing:
                    raise UnknownActor(f"no such actor(s): {', '.join(map(str, missing))}")
                live.difference_update(addrs)
        elif isinstance(cmd, Grant):
            for p in (cmd.subject, *cmd.objects):
                if p.type_name == ALL:
                    continue
                descriptor = engine.actor_type(p.type_name)
                for m in p.methods or ():
                    descriptor.method(m)
    return engine.rules.apply(commands)


def apply_script(engine, script: str | Iterable[AdminCommand]) -> list[AdminCommand]:
    """Parse (if needed), validate and apply; nothing changes if validation fails."""
    commands = parse_admin_script(script) if isinstance(script, str) else list(script)
    rules = validate(engine, commands)
    for cmd in commands:
        if isinstance(cmd, CreateActors):
            engine.create_actors(cmd.type_name, cmd.names)
        elif isinstance(cmd, DropActors):
            engine.drop_actors(cmd.type_name, cmd.names)
    engine.set_rules(rules)
    return commands
