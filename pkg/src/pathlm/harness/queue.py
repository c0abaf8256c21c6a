"""Lease-based task queue.

Tasks are immutable and uniquely identified by (kind, phase, path). A lease
moves a task to in-flight with a deadline; if the worker disappears, the
next expiry sweep returns the task to the front of the pending queue. The
whole queue state snapshots to JSON (leases are dropped on restore, which
is the conservative choice a restarted queue server has to make).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

TaskId = tuple[str, int, int]


@dataclass(frozen=True)
class Task:
    kind: str  # train | eval
    phase: int
    path_id: int
    tau: int
    input_refs: tuple[tuple[str, str], ...]  # (module key str, checkpoint ref)

    @property
    def task_id(self) -> TaskId:
        return (self.kind, self.phase, self.path_id)

    def to_obj(self) -> dict:
        return {
            "kind": self.kind,
            "phase": self.phase,
            "path_id": self.path_id,
            "tau": self.tau,
            "input_refs": [list(pair) for pair in self.input_refs],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Task":
        return cls(
            kind=obj["kind"],
            phase=obj["phase"],
            path_id=obj["path_id"],
            tau=obj["tau"],
            input_refs=tuple((k, r) for k, r in obj["input_refs"]),
        )


class TaskQueue:
    def __init__(self):
        self.pending: deque[Task] = deque()
        self.in_flight: dict[TaskId, tuple[Task, str, int]] = {}  # task, worker, deadline
        self.done: set[TaskId] = set()
        self._known: set[TaskId] = set()

    def __len__(self) -> int:
        return len(self.pending) + len(self.in_flight)

    def push(self, task: Task) -> bool:
        """Enqueue; duplicates of any known task id are rejected."""
        if task.task_id in self._known:
            return False
        self._known.add(task.task_id)
        self.pending.append(task)
        return True

    def expire(self, now: int) -> list[Task]:
        """Return expired leases to the front of the queue."""
        expired = [tid for tid, (_, _, deadline) in self.in_flight.items() if deadline <= now]
        out = []
        for tid in expired:
            task, _, _ = self.in_flight.pop(tid)
            self.pending.appendleft(task)
            out.append(task)
        return out

    def lease(self, worker_id: str, now: int, lease_ticks: int) -> Task | None:
        self.expire(now)
        if not self.pending:
            return None
        task = self.pending.popleft()
        self.in_flight[task.task_id] = (task, worker_id, now + lease_ticks)
        return task

    def complete(self, task_id: TaskId) -> bool:
        """Mark done; idempotent, and tolerant of completed-after-expiry."""
        if task_id in self.done:
            return False
        self.done.add(task_id)
        self.in_flight.pop(task_id, None)
        # a re-queued copy of a now-done task must not run again
        self.pending = deque(t for t in self.pending if t.task_id != task_id)
        return True

    def all_done(self) -> bool:
        return not self.pending and not self.in_flight

    # -- persistence --------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "pending": [t.to_obj() for t in self.pending],
            "in_flight": [t.to_obj() for t, _, _ in self.in_flight.values()],
            "done": sorted(list(tid) for tid in self.done),
        }

    @classmethod
    def restore(cls, snap: dict) -> "TaskQueue":
        q = cls()
        for kind, phase, path_id in snap["done"]:
            tid = (kind, int(phase), int(path_id))
            q.done.add(tid)
            q._known.add(tid)
        for obj in snap["in_flight"] + snap["pending"]:  # lost leases retry first
            q.push(Task.from_obj(obj))
        return q

    def replace_from(self, other: "TaskQueue") -> None:
        """Adopt another queue's state in place (server-restart swap)."""
        self.pending = other.pending
        self.in_flight = other.in_flight
        self.done = other.done
        self._known = other._known

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot()))

    @classmethod
    def load(cls, path: str | Path) -> "TaskQueue":
        return cls.restore(json.loads(Path(path).read_text()))
