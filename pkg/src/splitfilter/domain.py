"""Axis-aligned boxes used as truncated supports, and grids on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        if len(self.low) != len(self.high) or not self.low:
            raise ValueError("Box bounds must be non-empty and of equal length")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError(f"empty box: low={self.low}, high={self.high}")

    @classmethod
    def interval(cls, low: float, high: float) -> "Box":
        return cls((float(low),), (float(high),))

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.high, self.low)))

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Membership mask for points ``x`` of shape ``(n, d)`` (closed box)."""
        x = np.asarray(x)
        return np.all((x >= np.asarray(self.low)) & (x <= np.asarray(self.high)), axis=-1)

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    def grid(self, n: int) -> np.ndarray:
        """Uniform node grid including both endpoints (1-d boxes only)."""
        if self.dim != 1:
            raise NotImplementedError("grids are only provided for 1-d domains")
        return np.linspace(self.low[0], self.high[0], n)
