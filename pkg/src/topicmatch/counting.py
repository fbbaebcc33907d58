"""Multiply-accumulate accounting for the network's dense operations.

Every matrix product in the matcher flows through :func:`counted_matmul`
or :class:`CountedLinear`. When a :class:`MacCounter` is active those
primitives tally one MAC per scalar multiply inside a matrix product
(``n * k * m`` for an ``n x k @ k x m`` product, times the batch size).
Bias additions, normalization layers, softmaxes, and elementwise ops are
not counted; the analytic cost model in :mod:`topicmatch.profiler` uses
the same convention, so its closed-form totals must match these tallies
exactly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
from torch import nn

_ACTIVE: "MacCounter | None" = None


class MacCounter:
    """Tally of multiply-accumulate counts, grouped by pipeline stage."""

    def __init__(self):
        self.by_stage: dict[str, int] = {}
        self._stage = "other"

    def add(self, macs: int) -> None:
        self.by_stage[self._stage] = self.by_stage.get(self._stage, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())

    @contextmanager
    def stage(self, name: str):
        previous = self._stage
        self._stage = name
        try:
            yield self
        finally:
            self._stage = previous


@contextmanager
def count_macs(counter: MacCounter):
    """Activate ``counter`` for all counted ops in this context."""
    global _ACTIVE
    previous = _ACTIVE
    _ACTIVE = counter
    try:
        yield counter
    finally:
        _ACTIVE = previous


def record_macs(macs: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.add(macs)


def counted_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a @ b`` with MAC accounting over broadcast batch dimensions."""
    if _ACTIVE is not None:
        n, k = a.shape[-2], a.shape[-1]
        m = b.shape[-1]
        batch_a = math.prod(a.shape[:-2])
        batch_b = math.prod(b.shape[:-2])
        record_macs(max(batch_a, batch_b) * n * k * m)
    return a @ b


class CountedLinear(nn.Linear):
    """nn.Linear that reports tokens * in_features * out_features MACs."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if _ACTIVE is not None:
            tokens = x.numel() // self.in_features
            record_macs(tokens * self.in_features * self.out_features)
        return super().forward(x)
