"""Convergence traces recorded by the solvers."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, List, Optional

import numpy as np

COLUMNS = ("passes", "k", "primal", "dual", "gap", "train_error", "test_error", "seconds")


@dataclass
class TraceRecord:
    """One checkpoint of a solver run.

    ``dual`` holds the objective minimized by the Frank-Wolfe solvers, which
    for structural SVMs is the dual objective ``lam/2 ||w||^2 - ell``.
    """

    effective_passes: float
    k: int
    primal: Optional[float] = None
    dual: Optional[float] = None
    gap: Optional[float] = None
    train_error: Optional[float] = None
    test_error: Optional[float] = None
    wall_seconds: float = 0.0

    def row(self) -> tuple:
        return (
            self.effective_passes,
            self.k,
            self.primal,
            self.dual,
            self.gap,
            self.train_error,
            self.test_error,
            self.wall_seconds,
        )

    def same_values(self, other: "TraceRecord") -> bool:
        """Equality ignoring wall-clock time."""
        return self.row()[:-1] == other.row()[:-1]


_FIELD = {
    "passes": "effective_passes",
    "k": "k",
    "primal": "primal",
    "dual": "dual",
    "gap": "gap",
    "train_error": "train_error",
    "test_error": "test_error",
    "seconds": "wall_seconds",
}


class ConvergenceTrace:
    """Ordered list of :class:`TraceRecord` with nondecreasing passes."""

    def __init__(self, records: Optional[List[TraceRecord]] = None):
        self.records: List[TraceRecord] = []
        for rec in records or []:
            self.append(rec)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.effective_passes < self.records[-1].effective_passes:
            raise ValueError(
                "effective passes must be nondecreasing: "
                f"{record.effective_passes} after {self.records[-1].effective_passes}"
            )
        if record.gap is not None and record.gap < -1e-9 * max(1.0, abs(record.dual or 0.0)):
            raise ValueError(f"negative duality gap {record.gap} at k={record.k}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    @property
    def last(self) -> TraceRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        """Column as a float array, ``nan`` where the value is absent."""
        attr = _FIELD.get(name, name)
        if attr not in {f.name for f in fields(TraceRecord)}:
            raise KeyError(name)
        vals = [getattr(r, attr) for r in self.records]
        return np.array([np.nan if v is None else float(v) for v in vals])

    def same_values(self, other: "ConvergenceTrace") -> bool:
        return len(self) == len(other) and all(
            a.same_values(b) for a, b in zip(self.records, other.records)
        )
