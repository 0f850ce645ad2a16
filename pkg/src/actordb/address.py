from __future__ import annotations

from typing import NamedTuple


class ActorAddress(NamedTuple):
    """(type name, actor name): the sole identity of a logical actor."""

    type_name: str
    actor_name: str

    def __str__(self):
        return f"{self.type_name}/{self.actor_name}"

    @classmethod
    def parse(cls, text: str) -> "ActorAddress":
        type_name, sep, actor_name = text.partition("/")
        if not sep or not type_name or not actor_name:
            raise ValueError(f"expected <type>/<name>, got {text!r}")
        return cls(type_name, actor_name)
