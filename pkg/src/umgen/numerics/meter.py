"""Accounting for live cached key/value scalars.

Benchmarks report memory as (peak live scalars) x (bytes per scalar): an
allocator-independent proxy that is exactly reproducible.
"""

from __future__ import annotations


class CacheMeter:
    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, scalars: int) -> None:
        self.current += scalars
        if self.current > self.peak:
            self.peak = self.current

    def free(self, scalars: int) -> None:
        self.current -= scalars

    def reset(self) -> None:
        self.current = 0
        self.peak = 0

    def bytes(self, itemsize: int = 4) -> int:
        return self.peak * itemsize
