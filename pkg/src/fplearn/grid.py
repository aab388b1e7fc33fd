"""Rectangular mesh with column-major cell numbering.

Cells are indexed 0-based.  Axis 0 varies fastest, so the flat index of the
multi-index ``(k_0, ..., k_{d-1})`` is ``sum_i k_i * S_i`` with strides
``S_0 = 1`` and ``S_i = n_0 * ... * n_{i-1}``.  Cell ``k`` along axis ``i`` is
centred at ``a_i + k * dx_i`` and spans ``[center - dx_i/2, center + dx_i/2)``.

The outermost layer of cells is the boundary layer.  The finite-volume solver
keeps it at zero mass, so only faces joining two interior cells carry flux.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateDynamicsError, GridIndexError

UNIFORM_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    bounds: tuple
    counts: tuple

    def __post_init__(self):
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        counts = tuple(int(n) for n in self.counts)
        if len(bounds) != len(counts) or not bounds:
            raise ValueError("bounds and counts must have the same nonzero length")
        for (a, b), n in zip(bounds, counts):
            if not a < b:
                raise ValueError(f"empty axis [{a}, {b}]")
            if n < 2:
                raise ValueError(f"axis needs at least 2 points, got {n}")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def uniform(cls, lo, hi, n, dim):
        return cls(((lo, hi),) * dim, (n,) * dim)

    @classmethod
    def from_spacing(cls, bounds, dx):
        """Grid whose spacing is ``dx`` on every axis; upper bounds are extended
        to the next whole cell when ``dx`` does not divide the width."""
        new_bounds, counts = [], []
        for a, b in bounds:
            n = int(math.ceil((b - a) / dx - 1e-9)) + 1
            new_bounds.append((a, a + (n - 1) * dx))
            counts.append(n)
        return cls(tuple(new_bounds), tuple(counts))

    # -- geometry -----------------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.array([(b - a) / (n - 1) for (a, b), n in zip(self.bounds, self.counts)])

    @cached_property
    def strides(self) -> np.ndarray:
        return np.concatenate(([1], np.cumprod(self.counts[:-1]))).astype(np.int64)

    @property
    def is_uniform(self) -> bool:
        h = self.spacing
        return bool(np.all(np.abs(h - h[0]) <= UNIFORM_TOL * max(1.0, abs(h[0]))))

    @property
    def dx(self) -> float:
        """Common spacing; only meaningful on uniform grids."""
        if not self.is_uniform:
            raise ValueError(f"non-uniform spacing {self.spacing}")
        return float(self.spacing[0])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self) -> tuple:
        """Cell-centre coordinates along each axis."""
        return tuple(a + np.arange(n) * h for (a, _), n, h in zip(self.bounds, self.counts, self.spacing))

    @property
    def lower_edges(self) -> np.ndarray:
        return np.array([a for a, _ in self.bounds]) - self.spacing / 2

    @property
    def upper_edges(self) -> np.ndarray:
        return np.array([b for _, b in self.bounds]) + self.spacing / 2

    @property
    def diameter_sq(self) -> float:
        return float(sum((b - a) ** 2 for a, b in self.bounds))

    # -- indexing -----------------------------------------------------------
    def linear_index(self, k) -> int:
        k = tuple(int(x) for x in k)
        if len(k) != self.dim:
            raise GridIndexError(f"expected {self.dim} indices, got {len(k)}")
        for ki, n in zip(k, self.counts):
            if not 0 <= ki < n:
                raise GridIndexError(f"multi-index {k} outside counts {self.counts}")
        return int(np.dot(k, self.strides))

    def multi_index(self, j) -> tuple:
        j = int(j)
        if not 0 <= j < self.size:
            raise GridIndexError(f"cell {j} outside [0, {self.size})")
        return tuple(int(x) for x in np.unravel_index(j, self.counts, order="F"))

    @cached_property
    def multi_indices(self) -> np.ndarray:
        """(N, d) multi-index of every cell, in flat order."""
        idx = np.unravel_index(np.arange(self.size), self.counts, order="F")
        return np.stack(idx, axis=1)

    @cached_property
    def centers(self) -> np.ndarray:
        k = self.multi_indices
        lo = np.array([a for a, _ in self.bounds])
        return lo + k * self.spacing

    def center(self, j) -> np.ndarray:
        self.multi_index(j)
        return self.centers[int(j)].copy()

    def face_center(self, j, axis, side="low") -> np.ndarray:
        if not 0 <= axis < self.dim:
            raise GridIndexError(f"axis {axis} outside [0, {self.dim})")
        if side not in ("low", "high"):
            raise ValueError("side must be 'low' or 'high'")
        x = self.center(j)
        x[axis] += (-0.5 if side == "low" else 0.5) * self.spacing[axis]
        return x

    def face_points(self, axis) -> np.ndarray:
        """Low-face centres of every cell along ``axis``, shape (N, d)."""
        x = self.centers.copy()
        x[:, axis] -= 0.5 * self.spacing[axis]
        return x

    # -- boundary layer -----------------------------------------------------
    @cached_property
    def interior(self) -> np.ndarray:
        k = self.multi_indices
        n = np.asarray(self.counts)
        return np.all((k >= 1) & (k <= n - 2), axis=1)

    @cached_property
    def active_faces(self) -> np.ndarray:
        """(d, N) mask of low faces joining two interior cells."""
        k = self.multi_indices
        mask = np.zeros((self.dim, self.size), dtype=bool)
        for i in range(self.dim):
            mask[i] = self.interior & (k[:, i] >= 2)
        return mask

    @cached_property
    def inner_faces(self) -> np.ndarray:
        """(d, N) mask of every low face that has a neighbour cell below it."""
        k = self.multi_indices
        return np.stack([k[:, i] >= 1 for i in range(self.dim)])

    @property
    def interior_box(self):
        """Region covered by interior cells, as (lo, hi) arrays."""
        lo = np.array([a for a, _ in self.bounds]) + self.spacing / 2
        hi = np.array([b for _, b in self.bounds]) - self.spacing / 2
        return lo, hi

    def cell_of(self, points) -> np.ndarray:
        """Flat cell index for each point, -1 outside the cell union.

        Cells are half-open, so a point on a shared edge goes to the upper cell.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = np.floor((points - self.lower_edges) / self.spacing + 1e-12).astype(np.int64)
        n = np.asarray(self.counts)
        ok = np.all((k >= 0) & (k < n), axis=1)
        j = np.full(len(points), -1, dtype=np.int64)
        j[ok] = k[ok] @ self.strides
        return j

    def to_dict(self) -> dict:
        return {"dim": self.dim, "bounds": [list(b) for b in self.bounds], "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, data) -> "Grid":
        grid = cls(tuple(tuple(b) for b in data["bounds"]), tuple(data["counts"]))
        if "dim" in data and int(data["dim"]) != grid.dim:
            raise ValueError("grid dim does not match bounds")
        return grid

    def __repr__(self):
        return f"Grid(bounds={self.bounds}, counts={self.counts})"


def cfl_dt(grid: Grid, D: float, vmax: float, safety: float = 0.9) -> float:
    """Largest stable explicit step, scaled by ``safety``.

    With ``dt = safety * dx**2 / (2 d (D + dx vmax))`` every diagonal entry of
    the one-step Markov matrix stays nonnegative.
    """
    if D < 0 or vmax < 0:
        raise ValueError("D and vmax must be nonnegative")
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    if D == 0 and vmax == 0:
        raise DegenerateDynamicsError("zero velocity and zero diffusion: no dynamics to step")
    dx = grid.dx
    return safety * dx * dx / (2 * grid.dim * (D + dx * vmax))
