"""Hierarchical coordinator runtime with stack-based task memory."""

from .gateway import Gateway, ReplayBackend, ScriptedBackend
from .runtime import RunResult, RuntimeConfig, RuntimeContext, TaskSpec, Termination, run_task
from .task_memory import EntryKind, MemoryEntry, MemoryStack

__version__ = "0.1.0"

__all__ = [
    "EntryKind",
    "Gateway",
    "MemoryEntry",
    "MemoryStack",
    "ReplayBackend",
    "RunResult",
    "RuntimeConfig",
    "RuntimeContext",
    "ScriptedBackend",
    "TaskSpec",
    "Termination",
    "run_task",
]
