from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SufficientStats:
    """Per-Gaussian occupancy, first and second (element-wise) moments."""

    occ: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, dim: int) -> "SufficientStats":
        return cls(np.zeros(n_states), np.zeros((n_states, dim)), np.zeros((n_states, dim)))

    @classmethod
    def from_occupancy(cls, occ: np.ndarray, frames: np.ndarray) -> "SufficientStats":
        """occ: (T, J) per-frame state occupancies."""
        x = np.asarray(frames, dtype=float)
        return cls(occ.sum(axis=0), occ.T @ x, occ.T @ (x * x))

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(self.occ + other.occ, self.m1 + other.m1, self.m2 + other.m2)

    def __iadd__(self, other: "SufficientStats") -> "SufficientStats":
        self.occ += other.occ
        self.m1 += other.m1
        self.m2 += other.m2
        return self

    def scaled(self, c: float) -> "SufficientStats":
        return SufficientStats(self.occ * c, self.m1 * c, self.m2 * c)

    def copy(self) -> "SufficientStats":
        return SufficientStats(self.occ.copy(), self.m1.copy(), self.m2.copy())
