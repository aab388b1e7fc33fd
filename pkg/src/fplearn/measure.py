"""Occupation measures on a grid: binning, smoothing and support masks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from . import kernels
from .errors import DisjointSupportError, EmptyMeasureError
from .grid import Grid

log = logging.getLogger(__name__)

SUPPORT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class DensityField:
    """Probability mass per cell (not density per unit volume)."""

    grid: Grid
    mass: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float).reshape(-1)
        if mass.shape != (self.grid.size,):
            raise ValueError(f"mass has {mass.size} entries, grid has {self.grid.size} cells")
        object.__setattr__(self, "mass", mass)

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.grid.cell_volume

    def as_array(self) -> np.ndarray:
        """Mass reshaped to the grid shape (axis 0 first)."""
        return self.mass.reshape(self.grid.shape, order="F")

    def marginal(self, axis: int) -> np.ndarray:
        arr = self.as_array()
        other = tuple(i for i in range(self.grid.dim) if i != axis)
        return arr.sum(axis=other) if other else arr.copy()

    def total(self) -> float:
        return float(self.mass.sum())

    def check(self, tol: float = 1e-10) -> "DensityField":
        if np.any(self.mass < 0):
            raise ValueError("negative mass")
        if abs(self.total() - 1.0) > tol:
            raise ValueError(f"mass sums to {self.total()}, not 1")
        return self

    @classmethod
    def uniform(cls, grid: Grid, interior_only: bool = True) -> "DensityField":
        m = grid.interior.astype(float) if interior_only else np.ones(grid.size)
        return cls(grid, m / m.sum())


def bin_trajectory(points, grid: Grid, return_discarded: bool = False):
    """Fraction of samples falling in each cell.

    Samples outside the union of cells are dropped (and counted), never
    clamped onto the edge.
    """
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
    if pts.shape[1] != grid.dim:
        raise ValueError(f"points have {pts.shape[1]} columns, grid is {grid.dim}-D")
    counts, inside = kernels.bin_counts(
        pts, grid.lower_edges, grid.spacing.astype(float), np.asarray(grid.counts, dtype=np.int64), grid.strides
    )
    discarded = len(pts) - inside
    if inside == 0:
        raise EmptyMeasureError(f"all {len(pts)} samples lie outside the grid")
    if discarded:
        log.info("discarded %d of %d samples outside the grid", discarded, len(pts))
    rho = DensityField(grid, counts / inside)
    return (rho, discarded) if return_discarded else rho


def gaussian_kernel(sigma_cells: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma_cells))
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / sigma_cells) ** 2)
    return w / w.sum()


def gaussian_smooth(rho: DensityField, sigma_cells: float = 1.0) -> DensityField:
    """Separable truncated-Gaussian blur with reflecting edges.

    Each 1-D pass conserves mass, so smoothing commutes with taking marginals.
    """
    if sigma_cells < 0:
        raise ValueError("sigma_cells must be nonnegative")
    if sigma_cells == 0:
        return DensityField(rho.grid, rho.mass.copy())
    w = gaussian_kernel(sigma_cells)
    arr = rho.as_array()
    for axis in range(rho.grid.dim):
        arr = convolve1d(arr, w, axis=axis, mode="reflect")
    mass = np.clip(arr.reshape(-1, order="F"), 0.0, None)
    return DensityField(rho.grid, mass / mass.sum())


def positive_support_mask(rho: DensityField, rho_star: DensityField, floor: float = SUPPORT_FLOOR) -> np.ndarray:
    if rho.grid != rho_star.grid:
        raise ValueError("densities live on different grids")
    mask = (rho.mass > floor) & (rho_star.mass > floor)
    if not mask.any():
        raise DisjointSupportError("densities share no cell above the floor")
    return mask
