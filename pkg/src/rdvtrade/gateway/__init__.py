"""CLI and HTTP job service over the tradespace pipeline."""

from rdvtrade.gateway.cli import main
from rdvtrade.gateway.store import (
    JOB_KINDS,
    JOB_STATUSES,
    ConflictError,
    Job,
    JobStore,
    TransitionError,
)

__all__ = [
    "JOB_KINDS",
    "JOB_STATUSES",
    "ConflictError",
    "Job",
    "JobStore",
    "TransitionError",
    "main",
]
