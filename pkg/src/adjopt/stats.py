"""Phase timing and solver statistics.

Timing uses a stack so that nested phases attribute wall time to the
innermost active phase only; the per-phase numbers are disjoint and their
sum never exceeds the enclosing wall time.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

PHASES = (
    "tape_record",
    "sparsity",
    "coloring_seed",
    "forward_propagation",
    "recovery",
    "jacobian_assembly",
    "linear_solve",
    "residual_eval",
    "adjoint_transpose_solve",
    "reverse_propagation",
)


class PhaseTimer:
    """Accumulates wall seconds per named phase, innermost-wins."""

    def __init__(self):
        self.seconds: dict[str, float] = {name: 0.0 for name in PHASES}
        self.counts: dict[str, int] = {}
        self._stack: list[list] = []

    @contextmanager
    def phase(self, name: str):
        now = time.perf_counter()
        if self._stack:
            top = self._stack[-1]
            self.seconds[top[0]] = self.seconds.get(top[0], 0.0) + \
                (now - top[1])
            top[1] = now
        frame = [name, now]
        self._stack.append(frame)
        try:
            yield
        finally:
            now = time.perf_counter()
            self.seconds[name] = self.seconds.get(name, 0.0) + \
                (now - frame[1])
            self._stack.pop()
            if self._stack:
                self._stack[-1][1] = now

    def count(self, name: str, increment: int = 1) -> None:
        self.counts[name] = self.counts.get(name, 0) + increment

    def snapshot(self) -> dict[str, float]:
        return dict(self.seconds)


@dataclass
class SolveStats:
    """Bookkeeping for one forward time integration."""

    phase_seconds: dict = field(default_factory=dict)
    newton_iters: list = field(default_factory=list)
    linear_iters: list = field(default_factory=list)
    colors_used: Optional[int] = None
    counters: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def newton_total(self) -> int:
        return sum(self.newton_iters)

    @property
    def linear_total(self) -> int:
        return sum(self.linear_iters)

    def to_dict(self) -> dict:
        return {
            "phase_seconds": dict(self.phase_seconds),
            "newton_iters": list(self.newton_iters),
            "linear_iters": list(self.linear_iters),
            "colors_used": self.colors_used,
            "counters": dict(self.counters),
            "wall_seconds": self.wall_seconds,
        }


@dataclass
class AdjointStats:
    """Bookkeeping for one backward adjoint sweep."""

    phase_seconds: dict = field(default_factory=dict)
    linear_iters: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def linear_total(self) -> int:
        return sum(self.linear_iters)

    def to_dict(self) -> dict:
        return {
            "phase_seconds": dict(self.phase_seconds),
            "linear_iters": list(self.linear_iters),
            "counters": dict(self.counters),
            "wall_seconds": self.wall_seconds,
        }
