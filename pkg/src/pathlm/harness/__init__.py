"""In-process simulation of the distributed training fabric.

The pieces mirror a networked deployment: a lease-based task queue, a
content-addressed checkpoint store, an append-only metadata registry,
training/eval workers, sharded outer-optimization executors, and a health
monitor, all run as cooperative actors on a deterministic virtual clock so
fault injection replays exactly.
"""

from .store import CheckpointStore
from .registry import Registry, RegistryEntry
from .queue import Task, TaskQueue
from .sim import FaultEvent, FaultPlan, SimConfig, SimResult, run_simulation

__all__ = [
    "CheckpointStore",
    "Registry",
    "RegistryEntry",
    "Task",
    "TaskQueue",
    "FaultEvent",
    "FaultPlan",
    "SimConfig",
    "SimResult",
    "run_simulation",
]
