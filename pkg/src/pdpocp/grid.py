"""Time grids, trajectory containers, quadrature and vector norms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Array shapes do not agree with the grid or model."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, t_f]`` into ``N`` subintervals."""

    t_f: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not np.isfinite(self.t_f) or self.t_f <= 0:
            raise ValueError(f"t_f must be positive, got {self.t_f!r}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "t_f", float(self.t_f))

    @property
    def dt(self) -> float:
        return self.t_f / self.N

    @property
    def nodes(self) -> np.ndarray:
        """The ``N + 1`` node times ``t_0 = 0, ..., t_N = t_f``."""
        return np.arange(self.N + 1) * self.dt

    @property
    def control_times(self) -> np.ndarray:
        """Left endpoints ``t_0, ..., t_{N-1}`` carrying the control values."""
        return np.arange(self.N) * self.dt


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndim)
    if arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("trajectory values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Piecewise-constant controls, ``values[r, j]`` held on ``[t_j, t_{j+1})``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, 2))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        """Decision vector ordered interval by interval: ``(u_0, u_1, ...)``."""
        return self.values.T.reshape(-1).copy()

    @classmethod
    def from_flat(cls, z: np.ndarray, m: int) -> "ControlTrajectory":
        z = np.asarray(z, dtype=float)
        return cls(z.reshape(-1, m).T)

    def __eq__(self, other):
        return isinstance(other, ControlTrajectory) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    """Node states, ``values[p, i]`` approximating ``x_p(t_i)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, 2))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1] - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def __eq__(self, other):
        return isinstance(other, StateTrajectory) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.lower, 1)
        hi = _frozen(self.upper, 1)
        if lo.shape != hi.shape:
            raise DimensionError("lower and upper bounds differ in length")
        if not np.all(lo < hi):
            raise ValueError("every lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, a) -> "BoxBounds":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return cls(-a, a)

    @property
    def m(self) -> int:
        return self.lower.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, BoxBounds)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )


def quadrature_integral(g, grid: TimeGrid) -> float:
    """Integrate grid samples over ``[0, t_f]``.

    ``N`` samples are treated as interval values (rectangle rule), ``N + 1``
    samples as node values (trapezoid rule).
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 1:
        raise DimensionError(f"samples must be 1-d, got shape {g.shape}")
    if g.size == grid.N:
        return float(grid.dt * np.sum(g))
    if g.size == grid.N + 1:
        return float(grid.dt * (np.sum(g) - 0.5 * (g[0] + g[-1])))
    raise DimensionError(f"expected {grid.N} or {grid.N + 1} samples, got {g.size}")


def norm1(v) -> float:
    return float(np.sum(np.abs(v)))


def norm2(v) -> float:
    v = np.ravel(np.asarray(v, dtype=float))
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        return scale
    # scaled so tiny entries do not underflow when squared
    return scale * float(np.linalg.norm(v / scale))


def norm_inf(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.max(np.abs(v))) if v.size else 0.0


def project_box(u: ControlTrajectory, bounds: BoxBounds) -> ControlTrajectory:
    if u.m != bounds.m:
        raise DimensionError(f"control has {u.m} channels, bounds have {bounds.m}")
    clipped = np.clip(u.values, bounds.lower[:, None], bounds.upper[:, None])
    return ControlTrajectory(clipped)
