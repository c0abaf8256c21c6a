"""Append-only metrics stream shared by the trainer, the simulation harness
and the report command. One delimited record per line:

    outer_step|path_id|split|kind|value
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class MetricRecord:
    step: int
    path_id: int
    split: str  # train | val
    kind: str  # loss | ppl
    value: float

    def line(self) -> str:
        return f"{self.step}|{self.path_id}|{self.split}|{self.kind}|{self.value!r}"

    @classmethod
    def parse(cls, line: str) -> "MetricRecord":
        step, path_id, split, kind, value = line.strip().split("|")
        return cls(int(step), int(path_id), split, kind, float(value))


def append_records(path: str | Path, records: list[MetricRecord]) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(r.line() + "\n")


def read_records(path: str | Path) -> list[MetricRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(MetricRecord.parse(line))
    return out
