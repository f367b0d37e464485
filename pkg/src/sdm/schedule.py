"""Mask schedules: cumulative fraction of hole pixels known after iteration t."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"
    CUBIC = "cubic"
    SQUARE_ROOT = "sqrt"

    @classmethod
    def parse(cls, name: str) -> ScheduleKind:
        key = name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {"squareroot": cls.SQUARE_ROOT, "sqrt": cls.SQUARE_ROOT}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown schedule kind {name!r}") from None


def _shape(kind: ScheduleKind, r: float) -> float:
    if kind is ScheduleKind.LINEAR:
        return r
    if kind is ScheduleKind.COSINE:
        return 0.5 * (1.0 - math.cos(math.pi * r))
    if kind is ScheduleKind.CUBIC:
        return r**3
    return math.sqrt(r)


@dataclass(frozen=True)
class MaskSchedule:
    kind: ScheduleKind = ScheduleKind.LINEAR
    total_iterations: int = 4

    def __post_init__(self):
        if isinstance(self.kind, str) and not isinstance(self.kind, ScheduleKind):
            object.__setattr__(self, "kind", ScheduleKind.parse(self.kind))
        if self.total_iterations < 1:
            raise ValueError(f"total_iterations must be >= 1, got {self.total_iterations}")

    def known_fraction(self, t: int) -> float:
        return known_fraction(self, t)

    def reveal_counts(self, n_hole: int) -> list[int]:
        return reveal_counts(self, n_hole)


ALL_KINDS = (ScheduleKind.CUBIC, ScheduleKind.COSINE, ScheduleKind.LINEAR, ScheduleKind.SQUARE_ROOT)


def known_fraction(schedule: MaskSchedule, t: int) -> float:
    T = schedule.total_iterations
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if t == T:
        return 1.0
    return min(1.0, max(0.0, _shape(schedule.kind, t / T)))


def reveal_counts(schedule: MaskSchedule, n_hole: int) -> list[int]:
    """Pixels to reveal at each of the T iterations; sums exactly to ``n_hole``.

    Uses cumulative ceilings so that rounding never leaves pixels behind.
    """
    if n_hole < 0:
        raise ValueError(f"n_hole must be >= 0, got {n_hole}")
    T = schedule.total_iterations
    cum = [min(n_hole, math.ceil(known_fraction(schedule, t) * n_hole - 1e-9)) for t in range(T + 1)]
    return [cum[t] - cum[t - 1] for t in range(1, T + 1)]
