"""Per-iteration ELBO traces shared by the iterative methods."""

from __future__ import annotations

import time
from dataclasses import dataclass, field


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    elbo: float
    wall_ms: float


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)
    _start: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, elbo: float) -> None:
        wall = 1000.0 * (time.perf_counter() - self._start)
        self.records.append(TraceRecord(len(self.records), float(elbo), wall))

    @property
    def elbos(self) -> list[float]:
        return [r.elbo for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> TraceRecord:
        return self.records[i]
