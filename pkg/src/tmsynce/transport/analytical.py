"""Exact transport maps of the banana/quartic benchmark.

Each map is lower triangular with a unit diagonal, so every log-determinant
is identically zero.
"""

from __future__ import annotations

import numpy as np

from .base import TransportMap


class AnalyticalBananaMap(TransportMap):
    """``(x1, x2) -> (x1 - s, x2 + (x1 - s)^2)``; pushes the banana onto N(0, I)."""

    def __init__(self, shift: float = -4.0):
        self.shift = shift
        self.dim = 2

    def _forward(self, x):
        u = x[:, 0] - self.shift
        return np.column_stack([u, x[:, 1] + u * u])

    def _inverse(self, r, hint):
        u = r[:, 0]
        return np.column_stack([u + self.shift, r[:, 1] - u * u])

    def _log_det(self, x):
        return np.zeros(x.shape[0])


class AnalyticalQuarticMap(TransportMap):
    """``(x1, x2) -> (x1 - s, x2 + (x1 - s)^2 + (x1 - s)^4)``."""

    def __init__(self, shift: float = 4.0):
        self.shift = shift
        self.dim = 2

    def _forward(self, x):
        u = x[:, 0] - self.shift
        u2 = u * u
        return np.column_stack([u, x[:, 1] + u2 + u2 * u2])

    def _inverse(self, r, hint):
        u = r[:, 0]
        u2 = u * u
        return np.column_stack([u + self.shift, r[:, 1] - u2 - u2 * u2])

    def _log_det(self, x):
        return np.zeros(x.shape[0])


class AnalyticalQuarticToBananaMap(TransportMap):
    """``(x1, x2) -> (x1 + s1 - s2, x2 + (x1 - s2)^4)``; quartic onto banana."""

    def __init__(self, banana_shift: float = -4.0, quartic_shift: float = 4.0):
        self.banana_shift = banana_shift
        self.quartic_shift = quartic_shift
        self.dim = 2

    def _forward(self, x):
        u = x[:, 0] - self.quartic_shift
        u2 = u * u
        return np.column_stack([x[:, 0] + self.banana_shift - self.quartic_shift,
                                x[:, 1] + u2 * u2])

    def _inverse(self, r, hint):
        x1 = r[:, 0] - self.banana_shift + self.quartic_shift
        u2 = (x1 - self.quartic_shift) ** 2
        return np.column_stack([x1, r[:, 1] - u2 * u2])

    def _log_det(self, x):
        return np.zeros(x.shape[0])
