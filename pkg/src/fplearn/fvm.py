"""Upwind finite-volume Fokker-Planck operator and its stationary density.

One explicit step maps cell masses ``rho`` to ``M @ rho`` with ``M = I + K``.
Along axis ``i`` the face between cells ``p = j - S_i`` and ``q = j`` carries
the normal velocity ``u = v_j^i``; per step it moves

* ``c * (max(u, 0) + D/dx) * rho_p`` from ``p`` to ``q`` and
* ``c * (-min(u, 0) + D/dx) * rho_q`` from ``q`` to ``p``,

with ``c = dt/dx``.  Every face adds equal and opposite amounts to one column,
so columns of ``M`` sum to one by construction.

The stationary problem adds teleportation, ``M_eps = (1 - eps) M + eps U``
with ``U`` the uniform restart matrix over the unknowns.  ``U`` is never
formed: ``M_eps rho = rho`` with ``sum(rho) = 1`` is the nonsingular system
``((1 - eps) M - I) rho = -(eps / n) 1``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import InconsistentStateError, NumericalError, StabilityError
from .grid import Grid, cfl_dt
from .measure import DensityField

log = logging.getLogger(__name__)

BOUNDARY_MODES = ("reduce", "renormalize")
RESIDUAL_TOL = 1e-10
DIRECT_NNZ_BUDGET = 200_000


def default_eps(D: float) -> float:
    return 1e-6 if D > 0 else 1e-4


@dataclass(frozen=True, eq=False)
class FaceVelocity:
    """Normal velocity at the low face of every cell, shape (d, N).

    Faces that do not join two interior cells are forced to zero.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.grid.dim, self.grid.size)
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise NumericalError(f"non-finite face velocity on axis {bad[0]}, cell {bad[1]}")
        v[~self.grid.active_faces] = 0.0
        object.__setattr__(self, "values", v)

    @property
    def vmax(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def scaled(self, a: float) -> "FaceVelocity":
        return FaceVelocity(self.grid, a * self.values)

    @classmethod
    def zeros(cls, grid: Grid) -> "FaceVelocity":
        return cls(grid, np.zeros((grid.dim, grid.size)))


@dataclass(frozen=True, eq=False)
class MarkovOperator:
    grid: Grid
    matrix: sp.csc_matrix
    D: float
    dt: float
    velocity: FaceVelocity
    boundary: str = "reduce"

    @property
    def active_cells(self) -> np.ndarray:
        if self.boundary == "reduce":
            return np.flatnonzero(self.grid.interior)
        return np.arange(self.grid.size)

    @property
    def face_mask(self) -> np.ndarray:
        return self.grid.active_faces if self.boundary == "reduce" else self.grid.inner_faces

    @property
    def c(self) -> float:
        return self.dt / self.grid.dx

    def block(self) -> sp.csc_matrix:
        """Restriction of ``M`` to the unknowns."""
        idx = self.active_cells
        if len(idx) == self.grid.size:
            return self.matrix
        return self.matrix[idx][:, idx].tocsc()


def _face_arrays(grid: Grid, mask: np.ndarray, values: np.ndarray):
    p, q, u = [], [], []
    for i in range(grid.dim):
        qi = np.flatnonzero(mask[i])
        p.append(qi - grid.strides[i])
        q.append(qi)
        u.append(values[i, qi])
    return np.concatenate(p), np.concatenate(q), np.concatenate(u)


def assemble(fv: FaceVelocity, D: float, dt: float | None = None, safety: float = 0.9,
             boundary: str = "reduce") -> MarkovOperator:
    """Build ``M = I + K`` for the given face velocities and diffusion.

    ``dt`` defaults to the CFL step for ``safety``; an explicit ``dt`` above
    the CFL bound raises :class:`StabilityError`.
    """
    grid = fv.grid
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
    if not grid.is_uniform:
        raise ValueError(f"finite-volume scheme needs equal spacing on all axes, got {grid.spacing}")
    if min(grid.counts) < 3:
        raise ValueError("every axis needs at least 3 cells so an interior exists")
    if D < 0:
        raise ValueError("diffusion must be nonnegative")
    bound = cfl_dt(grid, D, fv.vmax, safety=1.0)
    if dt is None:
        dt = safety * bound
    elif dt <= 0:
        raise ValueError("dt must be positive")
    elif dt > bound * (1 + 1e-12):
        raise StabilityError(f"dt={dt:.6g} exceeds the CFL bound {bound:.6g}", admissible_dt=bound)
    mask = grid.active_faces if boundary == "reduce" else grid.inner_faces
    p, q, u = _face_arrays(grid, mask, fv.values)
    dx = grid.dx
    diag, rows, cols, vals = kernels.assemble_coo(p, q, u, D / dx, dt / dx, grid.size)
    n = grid.size
    M = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)) + sp.diags(diag)
    return MarkovOperator(grid, M.tocsc(), float(D), float(dt), fv, boundary)


def assemble_dense_reference(fv: FaceVelocity, D: float, dt: float) -> np.ndarray:
    """Dense ``I + K`` built stencil-by-stencil from the tridiagonal form.

    Kept deliberately naive; tests use it as an oracle for :func:`assemble`.
    """
    grid = fv.grid
    n, dx = grid.size, grid.dx
    K = np.zeros((n, n))
    for i in range(grid.dim):
        Ki = np.zeros((n, n))
        S = grid.strides[i]
        for j in range(n):
            vlo = fv.values[i, j] if grid.active_faces[i, j] else 0.0
            has_hi = j + S < n and grid.active_faces[i, j + S]
            whi = fv.values[i, j + S] if has_hi else 0.0
            dlo = D / dx if grid.active_faces[i, j] else 0.0
            dhi = D / dx if has_hi else 0.0
            Ki[j, j] = min(vlo, 0.0) - max(whi, 0.0) - dlo - dhi
            if grid.active_faces[i, j]:
                Ki[j - S, j] = -min(vlo, 0.0) + dlo
            if has_hi:
                Ki[j + S, j] = max(whi, 0.0) + dhi
        K += dt / dx * Ki
    return np.eye(n) + K


# -- stationary density ---------------------------------------------------------

@dataclass(eq=False)
class SteadyState:
    """Solution of ``M_eps rho = rho`` plus what the adjoint solve reuses."""

    op: MarkovOperator
    eps: float
    rho: DensityField
    rho_raw: np.ndarray
    residual: float
    _solve: object = field(repr=False, default=None)
    _solve_t: object = field(repr=False, default=None)

    def adjoint(self, dJdrho):
        return solve_adjoint(self.op, self.rho, dJdrho, self.eps, state=self)


def _system(op: MarkovOperator, eps: float):
    Mb = op.block()
    n = Mb.shape[0]
    A = ((1.0 - eps) * Mb - sp.identity(n, format="csc")).tocsc()
    return Mb, A


def _factor(A, method):
    if method == "auto":
        method = "direct" if A.nnz <= DIRECT_NNZ_BUDGET else "iterative"
    if method == "direct":
        lu = spla.splu(A.tocsc())
        return lambda b: lu.solve(b), lambda b: lu.solve(b, trans="T")
    if method != "iterative":
        raise ValueError(f"unknown solver method {method!r}")

    def krylov(mat):
        ilu = spla.spilu(mat.tocsc(), drop_tol=1e-5, fill_factor=20)
        pre = spla.LinearOperator(mat.shape, ilu.solve)

        def solve(b):
            x, info = spla.gmres(mat, b, M=pre, rtol=1e-12, atol=0.0, restart=100, maxiter=2000)
            if info != 0:
                r = np.linalg.norm(mat @ x - b) / max(np.linalg.norm(b), 1e-300)
                raise NumericalError(f"GMRES did not converge (info={info}, rel. residual {r:.3e})", residual=r)
            return x

        return solve

    return krylov(A), krylov(A.T)


def solve_steady(op: MarkovOperator, eps: float | None = None, method: str = "auto",
                 tol: float = RESIDUAL_TOL) -> SteadyState:
    if eps is None:
        eps = default_eps(op.D)
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    if eps == 0 and op.D == 0:
        raise NumericalError("eps = 0 with D = 0: the stationary density is not unique")
    idx = op.active_cells
    Mb, A = _system(op, eps)
    n = len(idx)
    if eps > 0:
        solve, solve_t = _factor(A, method)
        x = solve(np.full(n, -eps / n))
    else:
        B = A.tolil()
        B[0, :] = np.ones(n)
        solve, _ = _factor(B.tocsc(), method)
        b = np.zeros(n)
        b[0] = 1.0
        x = solve(b)
        At = A.T.tolil()
        At[0, :] = 0.0
        At[0, 0] = 1.0
        solve_t = _factor(At.tocsc(), method)[0]
    residual = float(np.abs((1 - eps) * (Mb @ x) + eps / n * x.sum() - x).sum())
    if not np.isfinite(residual) or residual > tol:
        raise NumericalError(f"stationary solve residual {residual:.3e} exceeds {tol:.1e}", residual=residual)
    lowest = x.min()
    if lowest < -1e-8:
        raise NumericalError(f"stationary density has negative entry {lowest:.3e}", residual=residual)
    if lowest < -1e-12:
        warnings.warn(f"clamping negative stationary mass {lowest:.3e}", RuntimeWarning, stacklevel=2)
    x = np.clip(x, 0.0, None)
    raw = np.zeros(op.grid.size)
    raw[idx] = x / x.sum()
    if op.boundary == "renormalize":
        out = np.where(op.grid.interior, raw, 0.0)
        out /= out.sum()
    else:
        out = raw
    return SteadyState(op, float(eps), DensityField(op.grid, out), raw, residual, solve, solve_t)


def steady_state(op: MarkovOperator, eps: float | None = None, **kwargs) -> DensityField:
    return solve_steady(op, eps, **kwargs).rho


# -- adjoint ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdjointSolution:
    lam: np.ndarray
    residual: float


def solve_adjoint(op: MarkovOperator, rho: DensityField, dJdrho, eps: float | None = None, *,
                  state: SteadyState | None = None, tol: float = RESIDUAL_TOL) -> AdjointSolution:
    """Solve ``(M_eps^T - I) lam = -g + (g . rho) 1`` for ``g = dJ/drho``.

    The operator is singular with null vector ``1``; the returned ``lam`` is
    one member of ``lam + c 1``, and gradients built from it do not depend on
    ``c``.
    """
    if eps is None:
        eps = state.eps if state is not None else default_eps(op.D)
    if state is None:
        state = solve_steady(op, eps)
    if state.op is not op or state.eps != eps:
        raise InconsistentStateError("steady-state cache belongs to a different operator")
    rho_mass = rho.mass if isinstance(rho, DensityField) else np.asarray(rho, dtype=float)
    gap = np.abs(rho_mass - state.rho.mass).sum()
    if gap > 1e-8:
        raise InconsistentStateError(f"rho is not the stationary density of this operator (l1 gap {gap:.3e})")
    g = np.asarray(dJdrho, dtype=float).reshape(-1)
    if g.shape != (op.grid.size,):
        raise ValueError("dJ/drho must have one entry per cell")
    idx = op.active_cells
    if op.boundary == "renormalize":
        # rho_out = P rho_raw / (1^T P rho_raw): pull g back through the renormalisation
        interior = op.grid.interior
        s = state.rho_raw[interior].sum()
        g = np.where(interior, g - g @ state.rho.mass, 0.0) / s
    ga = g[idx]
    ra = state.rho_raw[idx]
    rhs = -ga + (ga @ ra) * np.ones(len(idx))
    if abs(rhs @ ra) > 1e-10 * max(1.0, np.abs(ga).max()):
        raise InconsistentStateError("adjoint right-hand side is not orthogonal to rho")
    if eps > 0:
        lam_a = state._solve_t(rhs)
    else:
        rhs0 = rhs.copy()
        rhs0[0] = 0.0
        lam_a = state._solve_t(rhs0)
    Mb = op.block()
    n = len(idx)
    lhs = (1 - eps) * (Mb.T @ lam_a) + eps / n * lam_a.sum() - lam_a
    residual = float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))
    if np.linalg.norm(rhs) == 0:
        residual = float(np.linalg.norm(lhs))
    if not np.isfinite(residual) or residual > tol:
        raise NumericalError(f"adjoint residual {residual:.3e} exceeds {tol:.1e}", residual=residual)
    lam = np.zeros(op.grid.size)
    lam[idx] = lam_a
    return AdjointSolution(lam, residual)


def face_gradient(lam, rho_raw, fv: FaceVelocity, eps: float, dt: float, face_mask=None) -> np.ndarray:
    """dJ/dv_j^i for every face, shape (d, N); zero off ``face_mask``.

    ``(1 - eps) (dt/dx) (lam_j - lam_{j-S_i}) (H(v) rho_{j-S_i} + (1 - H(v)) rho_j)``
    with ``H(0) = 0``.
    """
    grid = fv.grid
    lam = np.asarray(lam, dtype=float)
    rho_raw = np.asarray(rho_raw, dtype=float)
    if face_mask is None:
        face_mask = grid.active_faces
    out = np.zeros((grid.dim, grid.size))
    scale = (1.0 - eps) * dt / grid.dx
    for i in range(grid.dim):
        q = np.flatnonzero(face_mask[i])
        p = q - grid.strides[i]
        u = fv.values[i, q]
        donor = np.where(u > 0, rho_raw[p], rho_raw[q])
        out[i, q] = scale * (lam[q] - lam[p]) * donor
    return out


# -- time stepping ----------------------------------------------------------------

def step_density(rho: DensityField, op: MarkovOperator, steps: int, record_every: int = 1) -> list:
    """Frames ``rho, M rho, M^2 rho, ...`` sampled every ``record_every`` steps."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if rho.grid != op.grid:
        raise ValueError("density and operator live on different grids")
    M = op.matrix.tocsr()
    x = rho.mass.copy()
    frames = [DensityField(rho.grid, x.copy())]
    for s in range(1, steps + 1):
        x = M @ x
        if s % record_every == 0:
            frames.append(DensityField(rho.grid, x.copy()))
    return frames


# -- scaling identity ---------------------------------------------------------------

def scaling_identity_gap(fv: FaceVelocity, D: float, a: float, eps: float | None = None,
                         scale_diffusion: bool = True, safety: float = 0.9) -> float:
    """l1 distance between the stationary densities of ``(v, D)`` and ``(a v, a D)``.

    Each case uses its own CFL step.  With ``scale_diffusion=False`` only the
    velocity is scaled, which in general changes the stationary density.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if eps is None:
        eps = default_eps(D)
    base = steady_state(assemble(fv, D, safety=safety), eps)
    D2 = a * D if scale_diffusion else D
    other = steady_state(assemble(fv.scaled(a), D2, safety=safety), eps)
    return float(np.abs(base.mass - other.mass).sum())


def scaling_identity_check(fv: FaceVelocity, D: float, a: float, tol: float = 1e-10, **kwargs) -> bool:
    return scaling_identity_gap(fv, D, a, **kwargs) <= tol


# -- time reversal ----------------------------------------------------------------

def reverse_velocity(fv: FaceVelocity, D: float, rho: DensityField | None = None,
                     floor: float = 1e-10) -> FaceVelocity:
    """Face velocity of the time-reversed chain, which has the same stationary density.

    A stationary density fixes the drift only up to time reversal, so the
    direction of circulation has to come from time-series data.  The reversed
    velocity ``u*`` carries the opposite stationary flux on every face:
    ``u*+ rho_p - u*- rho_q = 2 D (rho_q - rho_p) / dx - (u+ rho_p - u- rho_q)``,
    which has exactly one solution.  ``rho`` defaults to the ``eps = 0``
    stationary density (teleportation is not reversible in this form).  Faces
    whose cells hold less than ``floor`` times the peak mass keep ``u``.
    """
    grid = fv.grid
    if rho is None:
        rho = steady_state(assemble(fv, D), 0.0 if D > 0 else None)
    if rho.grid != grid:
        raise ValueError("density and velocity are on different grids")
    m = rho.mass
    tiny = floor * m.max()
    out = fv.values.copy()
    for i in range(grid.dim):
        q = np.flatnonzero(grid.active_faces[i])
        p = q - grid.strides[i]
        u, rp, rq = fv.values[i, q], m[p], m[q]
        G = 2 * D * (rq - rp) / grid.dx - np.maximum(u, 0.0) * rp + np.maximum(-u, 0.0) * rq
        ok = np.minimum(rp, rq) > tiny
        ustar = np.where(G >= 0, G / np.where(ok, rp, 1.0), G / np.where(ok, rq, 1.0))
        out[i, q] = np.where(ok, ustar, u)
    return FaceVelocity(grid, out)
