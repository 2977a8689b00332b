"""Continuous piecewise-linear scalar functions given by sorted knots.

Evaluation interpolates between knots and extrapolates with slope 1 beyond
both ends, so a function that is the identity near its boundary knots stays
the identity far away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PiecewiseLinearFn", "KnotOrderError"]


class KnotOrderError(ValueError):
    """Knot abscissae not strictly increasing (or targets violate monotonicity)."""


@dataclass(frozen=True)
class PiecewiseLinearFn:
    xs: np.ndarray = field(repr=False)
    ys: np.ndarray = field(repr=False)
    monotone: bool = False

    def __post_init__(self):
        xs = np.atleast_1d(np.asarray(self.xs, dtype=float))
        ys = np.atleast_1d(np.asarray(self.ys, dtype=float))
        if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 1:
            raise KnotOrderError("knots must be two equal-length 1-d arrays")
        if xs.size > 1 and not np.all(np.diff(xs) > 0):
            raise KnotOrderError("knot abscissae must be strictly increasing")
        if self.monotone and xs.size > 1 and not np.all(np.diff(ys) >= 0):
            raise KnotOrderError("monotone flag set but knot values decrease")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @classmethod
    def identity(cls) -> "PiecewiseLinearFn":
        return cls(np.array([0.0]), np.array([0.0]), monotone=True)

    @classmethod
    def from_pairs(cls, pairs, monotone: bool = False) -> "PiecewiseLinearFn":
        pairs = sorted((float(x), float(y)) for x, y in pairs)
        xs = np.array([p[0] for p in pairs])
        ys = np.array([p[1] for p in pairs])
        return cls(xs, ys, monotone=monotone)

    @property
    def n_knots(self) -> int:
        return int(self.xs.size)

    @property
    def strictly_increasing(self) -> bool:
        return self.n_knots == 1 or bool(np.all(np.diff(self.ys) > 0))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xv = np.atleast_1d(x)
        out = np.interp(xv, self.xs, self.ys)
        # slope-1 extrapolation on both sides
        left = xv < self.xs[0]
        right = xv > self.xs[-1]
        if np.any(left):
            out[left] = self.ys[0] + (xv[left] - self.xs[0])
        if np.any(right):
            out[right] = self.ys[-1] + (xv[right] - self.xs[-1])
        return float(out[0]) if scalar else out.reshape(x.shape)

    def inverse(self) -> "PiecewiseLinearFn":
        """Inverse function; requires strictly increasing knot values."""
        if not self.strictly_increasing:
            raise KnotOrderError("only strictly increasing functions are invertible")
        return PiecewiseLinearFn(self.ys.copy(), self.xs.copy(), monotone=True)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.ys - self.xs) <= tol))

    def to_knot_list(self) -> list[list[float]]:
        return [[float(x), float(y)] for x, y in zip(self.xs, self.ys)]
