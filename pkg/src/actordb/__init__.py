"""An embedded, in-memory actor database engine."""

from .address import ActorAddress
from .engine import (ActorTypeDescriptor, Context, DispatchMode, Engine, EngineConfig,
                     ExecutorAssignment, FutureHandle, FutureState, LogicalClock,
                     MethodDescriptor, Outcome)
from .errors import *  # noqa: F401,F403
from .relstore import Relation, Schema, WindowStats
from .txn import AbortReason, CommitResult, Delivery, DetachedSpec, Trigger

__version__ = "0.1.0"
