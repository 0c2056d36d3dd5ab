"""Task-balanced rehearsal buffer with provenance tags."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROVENANCES = ("original", "prospective", "noise")


class BufferError(ValueError):
    pass


@dataclass
class TaskEntries:
    """Rehearsal entries of one task; arrays share their first axis."""

    inputs: np.ndarray  # (n, T, d)
    targets: np.ndarray  # (n,)
    provenance: np.ndarray  # (n,) of str
    steps: np.ndarray  # (n,) series index of the window's last row

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.provenance = np.asarray(self.provenance, dtype=object)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        n = len(self.targets)
        if not (len(self.inputs) == n == len(self.provenance) == len(self.steps)):
            raise BufferError("entry arrays must have equal length")
        bad = set(self.provenance) - set(PROVENANCES)
        if bad:
            raise BufferError(f"unknown provenance tags {sorted(bad)}")

    def __len__(self):
        return len(self.targets)

    def take(self, idx) -> "TaskEntries":
        return TaskEntries(self.inputs[idx], self.targets[idx], self.provenance[idx], self.steps[idx])

    def counts(self) -> dict[str, int]:
        return {p: int(np.sum(self.provenance == p)) for p in PROVENANCES}


def balanced_quota(capacity: int, n_tasks: int, available: int | None = None) -> int:
    """Even per-task entry count so every task holds the same number of pairs."""
    if n_tasks < 1:
        raise BufferError("need at least one task")
    q = capacity // n_tasks
    if available is not None:
        q = min(q, available)
    return 2 * (q // 2)


class RehearsalBuffer:
    """Per-task entry lists; total size never exceeds ``capacity``."""

    def __init__(self, capacity: int = 3000):
        if capacity < 2:
            raise BufferError("capacity must be >= 2")
        self.capacity = int(capacity)
        self.tasks: dict[str, TaskEntries] = {}

    def __len__(self):
        return sum(len(e) for e in self.tasks.values())

    def __contains__(self, task):
        return task in self.tasks

    def task_ids(self) -> list[str]:
        return list(self.tasks)

    def set_task(self, task: str, entries: TaskEntries) -> None:
        others = sum(len(e) for t, e in self.tasks.items() if t != task)
        if others + len(entries) > self.capacity:
            raise BufferError(f"adding {len(entries)} entries for {task!r} exceeds capacity "
                              f"{self.capacity} ({others} already stored)")
        self.tasks[task] = entries

    def replace_all(self, new: dict[str, TaskEntries]) -> None:
        if sum(len(e) for e in new.values()) > self.capacity:
            raise BufferError("update exceeds capacity")
        self.tasks = dict(new)

    def entries(self, task: str) -> TaskEntries:
        if task not in self.tasks:
            raise BufferError(f"no entries for task {task!r}")
        return self.tasks[task]

    def counts(self) -> dict[str, int]:
        return {t: len(e) for t, e in self.tasks.items()}

    def provenance_counts(self) -> dict[str, int]:
        out = dict.fromkeys(PROVENANCES, 0)
        for e in self.tasks.values():
            for k, v in e.counts().items():
                out[k] += v
        return out

    def is_balanced(self) -> bool:
        c = list(self.counts().values())
        return not c or max(c) - min(c) <= 1

    # -- dump / restore -----------------------------------------------------
    def dump(self, path: str | Path) -> None:
        """Structured text (JSON) with one record per entry."""
        doc = {"capacity": self.capacity, "tasks": {}}
        for t, e in self.tasks.items():
            doc["tasks"][t] = [
                {"provenance": str(p), "step": int(s), "target": float(y),
                 "inputs": x.tolist()}
                for x, y, p, s in zip(e.inputs, e.targets, e.provenance, e.steps)
            ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def restore(cls, path: str | Path) -> "RehearsalBuffer":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        buf = cls(doc["capacity"])
        for t, rows in doc["tasks"].items():
            if rows:
                ent = TaskEntries(np.array([r["inputs"] for r in rows]),
                                  [r["target"] for r in rows],
                                  [r["provenance"] for r in rows],
                                  [r["step"] for r in rows])
            else:
                ent = TaskEntries(np.zeros((0, 0, 0)), [], [], [])
            buf.set_task(t, ent)
        return buf
