"""Admin DSL: actor lifecycle and access-control statements.

Grammar::

    script    := { stmt ";" }
    stmt      := create | drop | grant | revoke
    create    := CREATE ACTORS OF TYPE ident WITH NAMES IN namelist
    drop      := DROP ACTORS OF TYPE ident WITH NAMES IN namelist
    revoke    := REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL
    grant     := GRANT pattern ACCESS TO pattern { AND ACCESS TO pattern }
    pattern   := ACTORS OF TYPE ident [ WITH METHODS IN namelist ] [ WITH NAMES IN namelist ]
    namelist  := "(" ident { "," ident } ")"

Keywords are case-insensitive; ``--`` starts a comment running to end of
line. Identifiers are runs of letters, digits and underscores, or a
single-quoted string for names that need other characters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Union

from ..errors import AdminSyntaxError

ALL = "ALL"

KEYWORDS = frozenset({
    "CREATE", "DROP", "ACTORS", "OF", "TYPE", "WITH", "NAMES", "METHODS", "IN",
    "GRANT", "REVOKE", "ACCESS", "TO", "FROM", "AND", "ALL",
})


@dataclass(frozen=True)
class Pattern:
    type_name: str  # or ALL
    methods: tuple[str, ...] | None = None  # None = all methods
    names: tuple[str, ...] | None = None  # None = all names

    def matches_type(self, type_name: str) -> bool:
        return self.type_name == ALL or self.type_name == type_name

    def matches(self, type_name: str, method: str, name: str) -> bool:
        return (self.matches_type(type_name)
                and (self.methods is None or method in self.methods)
                and (self.names is None or name in self.names))


@dataclass(frozen=True)
class CreateActors:
    type_name: str
    names: tuple[str, ...]


@dataclass(frozen=True)
class DropActors:
    type_name: str
    names: tuple[str, ...]


@dataclass(frozen=True)
class RevokeAll:
    pass


@dataclass(frozen=True)
class Grant:
    subject: Pattern
    objects: tuple[Pattern, ...]


AdminCommand = Union[CreateActors, DropActors, RevokeAll, Grant]


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # KW, IDENT, PUNCT, EOF
    text: str
    line: int
    col: int

    def describe(self) -> str:
        return "end of input" if self.kind == "EOF" else repr(self.text)


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<nl>\n)
  | (?P<comment>--[^\n]*)
  | (?P<word>[A-Za-z0-9_]+)
  | (?P<quoted>'(?:[^'\n]|'')*')
  | (?P<punct>[(),;])
""", re.VERBOSE)


def tokenize(text: str) -> Iterator[Token]:
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise AdminSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        val = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "word":
            up = val.upper()
            if up in KEYWORDS:
                yield Token("KW", up, line, col)
            else:
                yield Token("IDENT", val, line, col)
        elif kind == "quoted":
            yield Token("IDENT", val[1:-1].replace("''", "'"), line, col)
        elif kind == "punct":
            yield Token("PUNCT", val, line, col)
        pos = m.end()
    yield Token("EOF", "", line, pos - line_start + 1)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.toks = list(tokenize(text))
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, expected) -> AdminSyntaxError:
        t = self.tok
        return AdminSyntaxError(f"unexpected {t.describe()}", t.line, t.col, expected)

    def at_kw(self, kw: str) -> bool:
        return self.tok.kind == "KW" and self.tok.text == kw

    def kw(self, *kws: str) -> None:
        for kw in kws:
            if not self.at_kw(kw):
                raise self.error([kw])
            self.i += 1

    def punct(self, p: str) -> None:
        if self.tok.kind != "PUNCT" or self.tok.text != p:
            raise self.error([p])
        self.i += 1

    def ident(self, allow_all: bool = False) -> str:
        t = self.tok
        if t.kind == "IDENT":
            self.i += 1
            return t.text
        if allow_all and self.at_kw(ALL):
            self.i += 1
            return ALL
        raise self.error(["identifier", ALL] if allow_all else ["identifier"])

    def namelist(self) -> tuple[str, ...]:
        self.punct("(")
        names = [self.ident()]
        while self.tok.kind == "PUNCT" and self.tok.text == ",":
            self.i += 1
            names.append(self.ident())
        self.punct(")")
        return tuple(names)

    def script(self) -> list[AdminCommand]:
        out = []
        while self.tok.kind != "EOF":
            out.append(self.stmt())
            self.punct(";")
        return out

    def stmt(self) -> AdminCommand:
        if self.at_kw("CREATE") or self.at_kw("DROP"):
            create = self.at_kw("CREATE")
            self.i += 1
            self.kw("ACTORS", "OF", "TYPE")
            type_name = self.ident()
            self.kw("WITH", "NAMES", "IN")
            names = self.namelist()
            return CreateActors(type_name, names) if create else DropActors(type_name, names)
        if self.at_kw("REVOKE"):
            self.i += 1
            self.kw("ACCESS", "TO", "ACTORS", "OF", "TYPE", "ALL",
                    "FROM", "ACTORS", "OF", "TYPE", "ALL")
            return RevokeAll()
        if self.at_kw("GRANT"):
            self.i += 1
            subject = self.pattern()
            self.kw("ACCESS", "TO")
            objects = [self.pattern()]
            while self.at_kw("AND"):
                self.i += 1
                self.kw("ACCESS", "TO")
                objects.append(self.pattern())
            return Grant(subject, tuple(objects))
        raise self.error(["CREATE", "DROP", "GRANT", "REVOKE"])

    def pattern(self) -> Pattern:
        self.kw("ACTORS", "OF", "TYPE")
        type_name = self.ident(allow_all=True)
        methods = names = None
        if self.at_kw("WITH") and self.toks[self.i + 1].text == "METHODS":
            self.kw("WITH", "METHODS", "IN")
            methods = self.namelist()
        if self.at_kw("WITH"):
            self.i += 1
            if not self.at_kw("NAMES"):
                raise self.error(["NAMES"] if methods is not None else ["METHODS", "NAMES"])
            self.kw("NAMES", "IN")
            names = self.namelist()
        return Pattern(type_name, methods, names)


def parse_admin_script(text: str) -> list[AdminCommand]:
    """Parse a script into commands; raises :class:`AdminSyntaxError`."""
    return _Parser(text).script()


# ---------------------------------------------------------------------------
# printer
# ---------------------------------------------------------------------------

_PLAIN = re.compile(r"[A-Za-z0-9_]+")


def _ident(name: str) -> str:
    if _PLAIN.fullmatch(name) and name.upper() not in KEYWORDS:
        return name
    return "'" + name.replace("'", "''") + "'"


def _namelist(names) -> str:
    return "(" + ", ".join(_ident(n) for n in names) + ")"


def _pattern(p: Pattern) -> str:
    out = "ACTORS OF TYPE " + (ALL if p.type_name == ALL else _ident(p.type_name))
    if p.methods is not None:
        out += " WITH METHODS IN " + _namelist(p.methods)
    if p.names is not None:
        out += " WITH NAMES IN " + _namelist(p.names)
    return out


def format_command(cmd: AdminCommand) -> str:
    if isinstance(cmd, CreateActors):
        return f"CREATE ACTORS OF TYPE {_ident(cmd.type_name)} WITH NAMES IN {_namelist(cmd.names)};"
    if isinstance(cmd, DropActors):
        return f"DROP ACTORS OF TYPE {_ident(cmd.type_name)} WITH NAMES IN {_namelist(cmd.names)};"
    if isinstance(cmd, RevokeAll):
        return "REVOKE ACCESS TO ACTORS OF TYPE ALL FROM ACTORS OF TYPE ALL;"
    if isinstance(cmd, Grant):
        lines = [f"GRANT {_pattern(cmd.subject)}", " ACCESS TO", f"   {_pattern(cmd.objects[0])}"]
        for obj in cmd.objects[1:]:
            lines += [" AND ACCESS TO", f"   {_pattern(obj)}"]
        return "\n".join(lines) + ";"
    raise TypeError(f"not an admin command: {cmd!r}")


def format_script(commands) -> str:
    return "\n\n".join(format_command(c) for c in commands) + "\n"
