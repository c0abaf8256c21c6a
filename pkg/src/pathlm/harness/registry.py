"""Append-only metadata registry (the database-table analog).

Rows record worker contributions, published module checkpoints and
evaluation results. Appends are atomic and deduplicated on the row's
identity, which is what makes retried tasks exactly-once at the metadata
level; listeners fire only for rows that were actually appended.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from ..modular import ModuleKey

KIND_CONTRIB = "contrib"
KIND_MODULE = "module"
KIND_EVAL = "eval"


@dataclass(frozen=True)
class RegistryEntry:
    phase: int
    kind: str
    path_id: int | None = None
    module: ModuleKey | None = None
    ref: str | None = None
    val_loss: float | None = None

    def identity(self) -> tuple:
        if self.kind == KIND_CONTRIB:
            return (self.kind, self.phase, self.path_id, self.module)
        if self.kind == KIND_MODULE:
            return (self.kind, self.phase, self.module)
        if self.kind == KIND_EVAL:
            return (self.kind, self.phase, self.path_id)
        raise ValueError(f"unknown registry kind {self.kind!r}")


class Registry:
    def __init__(self):
        self.rows: list[RegistryEntry] = []
        self._seen: set[tuple] = set()
        self.listeners: list[Callable[[RegistryEntry], None]] = []

    def append(self, entry: RegistryEntry) -> bool:
        """Append a row; returns False (and does nothing) for a duplicate."""
        key = entry.identity()
        if key in self._seen:
            return False
        self._seen.add(key)
        self.rows.append(entry)
        for listener in list(self.listeners):
            listener(entry)
        return True

    def has(self, entry_identity: tuple) -> bool:
        return entry_identity in self._seen

    def module_ref(self, phase: int, key: ModuleKey) -> str | None:
        if (KIND_MODULE, phase, key) not in self._seen:
            return None
        for row in self.rows:
            if row.kind == KIND_MODULE and row.phase == phase and row.module == key:
                return row.ref
        return None

    def contributions(self, phase: int, key: ModuleKey) -> list[tuple[int, str]]:
        """(path id, checkpoint ref) pairs for a module at a phase."""
        return [
            (row.path_id, row.ref)
            for row in self.rows
            if row.kind == KIND_CONTRIB and row.phase == phase and row.module == key
        ]

    def eval_rows(self) -> list[RegistryEntry]:
        return [row for row in self.rows if row.kind == KIND_EVAL]

    def contrib_count(self) -> int:
        return sum(1 for row in self.rows if row.kind == KIND_CONTRIB)
