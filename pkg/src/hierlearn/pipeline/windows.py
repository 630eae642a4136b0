"""Rolling-origin partitioning with expanding training ranges."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sized


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class WindowPlan:
    """Chronological ``(train, test)`` row ranges; tests have equal size."""

    batches: tuple

    def __len__(self) -> int:
        return len(self.batches)

    @property
    def first_test_start(self) -> int:
        return self.batches[0][1].start

    def restrict_train(self, first_row: int) -> "WindowPlan":
        """Drop training rows before ``first_row`` (rows lacking lag history)."""
        out = []
        for tr, te in self.batches:
            if te.start < first_row:
                raise WindowError(f"test rows from {te.start} lack history (first usable row {first_row})")
            start = max(tr.start, first_row)
            if start >= tr.stop:
                raise WindowError(f"no usable training rows before {tr.stop}")
            out.append((range(start, tr.stop), te))
        return WindowPlan(tuple(out))


def plan_windows(data: int | Sized, n_batches: int, test_size: int) -> WindowPlan:
    """Split ``data`` rows into ``n_batches`` trailing test windows.

    Training always starts at row 0 and stops where its test window begins.
    """
    n = data if isinstance(data, int) else len(data)
    if n_batches < 1 or test_size < 1:
        raise WindowError("n_batches and test_size must be positive")
    first = n - n_batches * test_size
    if first < 1:
        raise WindowError(
            f"{n} rows cannot hold {n_batches} test windows of {test_size} plus training data"
        )
    batches = []
    for i in range(n_batches):
        start = first + i * test_size
        batches.append((range(0, start), range(start, start + test_size)))
    return WindowPlan(tuple(batches))
