"""Exception hierarchy shared by all engine modules."""


class ActorDBError(Exception):
    """Base class for engine errors."""


# catalog / lifecycle
class DuplicateType(ActorDBError):
    pass


class UnknownType(ActorDBError):
    pass


class DuplicateActor(ActorDBError):
    pass


class UnknownActor(ActorDBError):
    pass


class UnknownMethod(ActorDBError):
    pass


class ArityMismatch(ActorDBError):
    pass


class InvalidDescriptor(ActorDBError):
    """Malformed actor type or method descriptor."""


class CalledFromMethodBody(ActorDBError):
    """Administrative operation attempted from inside an actor method."""


class DeadlockDetected(ActorDBError):
    pass


class FutureMisuse(ActorDBError):
    """A future was awaited outside the execution stream that created it."""


# relational state
class InvalidSchema(ActorDBError):
    pass


class DuplicateRelation(ActorDBError):
    pass


class UnknownRelation(ActorDBError):
    pass


class UnknownColumn(ActorDBError):
    pass


class TypeMismatch(ActorDBError):
    pass


# transactions
class UnsupportedIsolation(ActorDBError):
    pass


class ParentNotActive(ActorDBError):
    pass


class TransactionAborted(ActorDBError):
    """Raised by client-facing helpers when a root transaction aborts."""

    def __init__(self, reason, detail=None):
        super().__init__(f"transaction aborted: {reason.value}" + (f" ({detail})" if detail else ""))
        self.reason = reason
        self.detail = detail


# durability
class CorruptLog(ActorDBError):
    pass


class LogIOError(ActorDBError):
    pass


# security
class AccessDenied(ActorDBError):
    pass


class RuleConflict(ActorDBError):
    pass


class AdminSyntaxError(ActorDBError):
    def __init__(self, message, line, column, expected=()):
        self.line = line
        self.column = column
        self.expected = tuple(sorted(set(expected)))
        exp = f"; expected one of {', '.join(self.expected)}" if self.expected else ""
        super().__init__(f"line {line}, column {column}: {message}{exp}")


# application (SmartMart)
class ApplicationError(ActorDBError):
    pass


class UnknownItem(ApplicationError):
    pass


class UnknownSession(ApplicationError):
    pass


class SessionAlreadyOpen(ApplicationError):
    pass


class ConfigError(ActorDBError):
    pass
