"""Data-misfit objectives and their derivatives with respect to cell masses.

All four objectives take two :class:`DensityField` instances and return an
:class:`ObjectiveResult` whose ``grad`` is ``dJ/drho`` in mass coordinates,
i.e. the vector the adjoint solve consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from . import kernels
from .errors import NumericalError
from .grid import Grid
from .measure import DensityField, positive_support_mask

KINDS = ("l2", "kl", "js", "w2")
W2_FLOOR = 1e-16


@dataclass(frozen=True, eq=False)
class ObjectiveResult:
    value: float
    grad: np.ndarray
    kind: str
    info: dict = field(default_factory=dict)


def _same_grid(rho: DensityField, rho_star: DensityField):
    if rho.grid != rho_star.grid:
        raise ValueError("densities live on different grids")


def l2(rho: DensityField, rho_star: DensityField) -> ObjectiveResult:
    """``1/2 * integral (p - p*)^2`` with ``p = mass / cell volume``."""
    _same_grid(rho, rho_star)
    vol = rho.grid.cell_volume
    diff = (rho.mass - rho_star.mass) / vol
    return ObjectiveResult(0.5 * float(diff @ diff) * vol, diff, "l2")


def kl(rho: DensityField, rho_star: DensityField, mask=None) -> ObjectiveResult:
    """``sum rho* log(rho*/rho)`` over the shared support ``mask``."""
    _same_grid(rho, rho_star)
    if mask is None:
        mask = positive_support_mask(rho, rho_star)
    m, s = rho.mass[mask], rho_star.mass[mask]
    grad = np.zeros(rho.grid.size)
    grad[mask] = -s / m
    return ObjectiveResult(float(np.sum(s * np.log(s / m))), grad, "kl")


def js(rho: DensityField, rho_star: DensityField, mask=None) -> ObjectiveResult:
    """Jensen-Shannon divergence against the midpoint ``(rho + rho*)/2``.

    The derivative in the first argument is ``1/2 log(2 rho / (rho + rho*))``.
    """
    _same_grid(rho, rho_star)
    if mask is None:
        mask = positive_support_mask(rho, rho_star)
    m, s = rho.mass[mask], rho_star.mass[mask]
    mid = 0.5 * (m + s)
    value = 0.5 * np.sum(m * np.log(m / mid)) + 0.5 * np.sum(s * np.log(s / mid))
    grad = np.zeros(rho.grid.size)
    grad[mask] = 0.5 * np.log(m / mid)
    return ObjectiveResult(float(max(value, 0.0)), grad, "js")


# -- entropic Wasserstein-2 ---------------------------------------------------------

def pool(grid: Grid, mass: np.ndarray, factor: int):
    """Sum masses over blocks of ``factor`` cells per axis.

    Partial blocks at the upper end are kept.  Returns the per-axis block
    centres (mean of member cell centres), the pooled mass array and the
    per-axis block label of every fine cell.
    """
    arr = mass.reshape(grid.shape, order="F")
    centers, labels = [], []
    for i, n in enumerate(grid.shape):
        lab = np.arange(n) // factor
        nb = lab[-1] + 1
        cnt = np.bincount(lab, minlength=nb)
        centers.append(np.bincount(lab, weights=grid.axes[i], minlength=nb) / cnt)
        labels.append(lab)
        moved = np.moveaxis(arr, i, 0)
        summed = np.zeros((nb,) + moved.shape[1:])
        np.add.at(summed, lab, moved)
        arr = np.moveaxis(summed, 0, i)
    return centers, arr, labels


def _softmin(h, logks):
    """``out[J] = log sum_K exp(h[K] + sum_i logk_i[J_i, K_i])`` over tensor grids."""
    out = h
    for i, lk in enumerate(logks):
        moved = np.moveaxis(out, i, 0)
        shape = moved.shape
        flat = np.ascontiguousarray(moved.reshape(shape[0], -1))
        res = kernels.logconv(flat, lk)
        out = np.moveaxis(res.reshape((lk.shape[0],) + shape[1:]), 0, i)
    return out


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    dual: float
    primal: float
    f: np.ndarray
    g: np.ndarray
    iterations: int
    marginal_error: float


def _stages(reg, diam, scaling):
    stages = [reg]
    while stages[-1] < diam:
        stages.append(stages[-1] / scaling)
    return stages[::-1]


def _primal_cost(F, G, cost, eps):
    """``<C, P>`` for ``P = exp(F + G - C/eps)`` without forming ``P``."""
    total = 0.0
    base = [-c / eps for c in cost]
    with np.errstate(divide="ignore"):
        for i, c in enumerate(cost):
            logks = list(base)
            logks[i] = np.log(c) - c / eps
            total += float(np.exp(F + _softmin(G, logks)).sum())
    return total


def sinkhorn(a, xs, b, ys, reg, tol=1e-9, max_iter=100_000, scaling=0.5) -> SinkhornResult:
    """Entropic OT between tensor-grid measures with squared-Euclidean cost.

    ``a`` and ``b`` are d-dimensional mass arrays; ``xs``, ``ys`` are their
    per-axis coordinates.  The cost separates over axes, so each soft-min is a
    sequence of 1-D log-sum-exp contractions.  ``reg`` is annealed down from
    the squared diameter by ``scaling`` per stage, carrying the potentials.

    Returns the dual value ``<f, a> + <g, b>``, the transport cost ``<C, P>``
    of the entropic plan, and the potentials.  When ``a is b`` and ``xs is
    ys`` the symmetric averaged update is used, which converges much faster.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("sinkhorn needs strictly positive masses")
    symmetric = a is b and xs is ys
    la, lb = np.log(a), np.log(b)
    cost = [(x[:, None] - y[None, :]) ** 2 for x, y in zip(xs, ys)]
    stages = _stages(reg, sum(max(c.max(), 1e-300) for c in cost), scaling)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    it = 0
    err = np.inf
    for k, eps in enumerate(stages):
        kab = [-c / eps for c in cost]
        kba = [k_.T.copy() for k_ in kab]
        final = k == len(stages) - 1
        for _ in range(max_iter if final else 50):
            if symmetric:
                f = 0.5 * (f - eps * _softmin(f / eps + la, kab))
                g = f
            else:
                f = -eps * _softmin(g / eps + lb, kab)
                g = -eps * _softmin(f / eps + la, kba)
            it += 1
            if final and it % 10 == 0:
                # b-marginal is exact after the g update; measure the a-marginal
                fa = -eps * _softmin(g / eps + lb, kab)
                err = float(np.abs(np.exp((f - fa) / eps) * a - a).sum())
                if err <= tol:
                    break
    if not err <= tol:
        raise NumericalError(f"Sinkhorn did not converge: marginal error {err:.3e} after {it} iterations",
                             residual=err)
    eps = stages[-1]
    dual = float(np.sum(f * a) + np.sum(g * b))
    primal = _primal_cost(f / eps + la, g / eps + lb, cost, eps)
    return SinkhornResult(dual, primal, f, g, it, err)


def _prepare(rho: DensityField, coarsen: int):
    m = np.maximum(rho.mass, W2_FLOOR)
    m = m / m.sum()
    return pool(rho.grid, m, coarsen)


def w2(rho: DensityField, rho_star: DensityField, coarsen: int = 2, ent_reg: float | None = None,
       debias: bool = False, tol: float = 1e-9, max_iter: int = 100_000) -> ObjectiveResult:
    """Entropic approximation of the squared 2-Wasserstein distance.

    Both measures are floored at 1e-16, renormalised and pooled over blocks of
    ``coarsen`` cells; they may live on different grids of the same dimension.
    ``ent_reg`` is absolute (units of length squared) and defaults to
    ``1e-3 * diam**2`` of the first grid.

    ``value`` is the regularised dual objective, whose exact derivative is
    ``grad``: the first dual potential, copied back to the fine cells of each
    block and mean-centred.  The dual carries an entropic bias of order
    ``ent_reg * log(N)``; ``info["primal"]``, the transport cost of the
    entropic plan, is the sharper estimate of W2 squared.  With ``debias``,
    ``info["debiased"]`` holds ``OT(a,b) - OT(a,a)/2 - OT(b,b)/2``.
    """
    if coarsen < 1:
        raise ValueError("coarsen must be a positive integer")
    if rho.grid.dim != rho_star.grid.dim:
        raise ValueError("densities have different dimensions")
    if ent_reg is None:
        ent_reg = 1e-3 * rho.grid.diameter_sq
    if ent_reg <= 0:
        raise ValueError("ent_reg must be positive")
    xs, a, lab_a = _prepare(rho, coarsen)
    ys, b, _ = _prepare(rho_star, coarsen)
    if rho.grid == rho_star.grid and np.array_equal(a, b):
        ys, b = xs, a  # identical inputs: take the symmetric update
    ab = sinkhorn(a, xs, b, ys, ent_reg, tol, max_iter)
    info = {"raw": ab.dual, "primal": ab.primal, "iterations": ab.iterations,
            "marginal_error": ab.marginal_error, "ent_reg": ent_reg}
    if debias:
        aa = sinkhorn(a, xs, a, xs, ent_reg, tol, max_iter)
        bb = sinkhorn(b, ys, b, ys, ent_reg, tol, max_iter)
        info["debiased"] = ab.dual - 0.5 * aa.dual - 0.5 * bb.dual
    grad = ab.f[np.ix_(*lab_a)].reshape(-1, order="F")
    return ObjectiveResult(ab.dual, grad - grad.mean(), "w2", info)


def w2_exact(rho: DensityField, rho_star: DensityField, coarsen: int = 1, max_vars: int = 4_000_000) -> float:
    """Squared 2-Wasserstein distance by linear programming between the supports.

    No flooring: only cells with positive mass enter, so the problem has
    ``|supp a| * |supp b|`` variables (refused above ``max_vars``).  Use this
    to score rollouts; :func:`w2` is the differentiable training objective.
    """
    if rho.grid.dim != rho_star.grid.dim:
        raise ValueError("densities have different dimensions")
    pts, wts = [], []
    for r in (rho, rho_star):
        centers, arr, _ = pool(r.grid, r.mass / r.total(), coarsen)
        X = np.stack(np.meshgrid(*centers, indexing="ij"), -1).reshape(-1, len(centers), order="F")
        m = arr.reshape(-1, order="F")
        keep = m > 0
        pts.append(X[keep])
        wts.append(m[keep] / m[keep].sum())
    n, k = len(wts[0]), len(wts[1])
    if n * k > max_vars:
        raise ValueError(f"transport problem too large ({n} x {k}); increase coarsen")
    cost = ((pts[0][:, None, :] - pts[1][None, :, :]) ** 2).sum(-1).ravel()
    idx = np.arange(n * k)
    # the last column constraint is implied by the others; keeping it lets
    # rounding in the two totals make the system infeasible
    col = idx % k
    last = col < k - 1
    A = sparse.vstack([sparse.coo_matrix((np.ones(n * k), (idx // k, idx)), shape=(n, n * k)),
                       sparse.coo_matrix((np.ones(last.sum()), (col[last], idx[last])), shape=(k - 1, n * k))])
    # HiGHS tolerances are absolute (~1e-7); rescale so the lightest cell has unit mass
    scale = 1.0 / min(wts[0].min(), wts[1].min())
    b_eq = scale * np.r_[wts[0], wts[1][:-1]]
    sol = linprog(cost, A_eq=A.tocsr(), b_eq=b_eq, bounds=(0, None), method="highs")
    if sol.status != 0:
        raise NumericalError(f"transport LP failed: {sol.message}")
    return float(sol.fun) / scale


def evaluate(kind: str, rho: DensityField, rho_star: DensityField, **options) -> ObjectiveResult:
    kind = kind.lower()
    if kind == "l2":
        return l2(rho, rho_star)
    if kind == "kl":
        return kl(rho, rho_star, options.get("mask"))
    if kind == "js":
        return js(rho, rho_star, options.get("mask"))
    if kind == "w2":
        return w2(rho, rho_star, **{k: v for k, v in options.items() if k != "mask"})
    raise ValueError(f"unknown objective {kind!r}; choose from {KINDS}")


__all__ = ["ObjectiveResult", "l2", "kl", "js", "w2", "sinkhorn", "pool", "evaluate", "KINDS"]
