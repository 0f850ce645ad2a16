"""Admin DSL, access control, audit and monitoring."""

from .access import AccessRuleSet, CallFrame, Edge, verify
from .admin import apply_script, validate
from .dsl import (ALL, AdminCommand, CreateActors, DropActors, Grant, Pattern, RevokeAll,
                  format_command, format_script, parse_admin_script)
from .monitor import ActorStats, AuditLog, AuditRecord, StatsRegistry, stats_to_json

__all__ = [
    "ALL", "AccessRuleSet", "ActorStats", "AdminCommand", "AuditLog", "AuditRecord",
    "CallFrame", "CreateActors", "DropActors", "Edge", "Grant", "Pattern", "RevokeAll",
    "StatsRegistry", "apply_script", "format_command", "format_script",
    "parse_admin_script", "stats_to_json", "validate", "verify",
]
