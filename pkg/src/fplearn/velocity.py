"""Velocity parameterisations ``v(x; theta)`` with a flat parameter vector.

Layouts of ``theta``:

* ``PiecewiseConstant``: ``theta[i * Np + j] = v_j^i``, the axis-``i`` normal
  velocity on the low face of parameter cell ``j`` (``Np`` cells on the
  parameter mesh, which may be coarser than the solver mesh).
* ``Polynomial``: ``theta[i * M + l] = a_l^i``, coefficient of monomial ``l``
  in component ``i``; monomials are ordered by total degree, then
  lexicographically descending in the exponent of axis 0.
* ``NeuralNet``: ``[W1 (H x d, row-major), b1 (H), W2 (d x H, row-major),
  b2 (d)]`` for ``v(x) = W2 act(W1 x + b1) + b2``.

Every model is zero on faces that do not join two interior cells and, when
evaluated pointwise, zero outside the box spanned by interior cells.
"""
from __future__ import annotations

import itertools
import math
import warnings

import numpy as np

from . import kernels
from .errors import NumericalError
from .fvm import FaceVelocity, reverse_velocity
from .grid import Grid

FORMAT_VERSION = 1
VARIANTS = ("pc", "poly", "nn")
ACTIVATIONS = ("tanh", "sigmoid")


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


class VelocityModel:
    """Common interface; concrete models are immutable."""

    variant = ""
    grid: Grid
    theta: np.ndarray

    @property
    def n_params(self) -> int:
        return self.theta.size

    def hyperparameters(self) -> dict:
        return {}

    def with_theta(self, theta) -> "VelocityModel":
        raise NotImplementedError

    def regrid(self, grid: Grid) -> "VelocityModel":
        """Same velocity field, evaluated on another solver mesh."""
        raise NotImplementedError

    def scaled(self, a: float) -> "VelocityModel":
        """Model of ``a * v``."""
        return self.with_theta(a * self.theta)

    def _field(self, points) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, points) -> np.ndarray:
        """Pointwise velocity, zero outside the interior box."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = self.grid.interior_box
        inside = np.all((x >= lo) & (x < hi), axis=1)
        out = np.zeros_like(x)
        if inside.any():
            out[inside] = self._field(x[inside])
        return out

    def _face_values(self, points_by_axis) -> list:
        raise NotImplementedError

    def eval_faces(self) -> FaceVelocity:
        grid = self.grid
        mask = grid.active_faces
        pts = [grid.face_points(i)[mask[i]] for i in range(grid.dim)]
        vals = self._face_values(pts)
        out = np.zeros((grid.dim, grid.size))
        for i in range(grid.dim):
            v = vals[i]
            bad = ~np.isfinite(v)
            if bad.any():
                j = np.flatnonzero(mask[i])[np.argmax(bad)]
                raise NumericalError(f"non-finite velocity on the axis-{i} low face of cell {j} "
                                     f"at {grid.face_center(j, i)}")
            out[i, mask[i]] = v
        return FaceVelocity(grid, out)

    def pullback(self, face_sens) -> np.ndarray:
        """``dJ/dtheta`` from per-face sensitivities ``dJ/dv_j^i`` of shape (d, N)."""
        s = np.asarray(face_sens, dtype=float)
        if s.shape != (self.grid.dim, self.grid.size):
            raise ValueError(f"face sensitivities must have shape {(self.grid.dim, self.grid.size)}, got {s.shape}")
        mask = self.grid.active_faces
        pts = [self.grid.face_points(i)[mask[i]] for i in range(self.grid.dim)]
        return self._pullback(pts, [s[i, mask[i]] for i in range(self.grid.dim)])

    def _pullback(self, points_by_axis, sens_by_axis) -> np.ndarray:
        raise NotImplementedError

    def drift_kernel(self):
        """Euler-Maruyama kernel and its trailing arguments for this drift."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "variant": self.variant,
            "grid": self.grid.to_dict(),
            "hyperparameters": self.hyperparameters(),
            "theta": self.theta.tolist(),
        }


# -- piecewise constant ------------------------------------------------------------

class PiecewiseConstant(VelocityModel):
    variant = "pc"

    def __init__(self, grid: Grid, theta, param_grid: Grid | None = None):
        self.grid = grid
        self.param_grid = grid if param_grid is None else param_grid
        if self.param_grid.dim != grid.dim:
            raise ValueError("parameter mesh and solver mesh differ in dimension")
        theta = np.array(theta, dtype=float).reshape(-1)
        if theta.size != grid.dim * self.param_grid.size:
            raise ValueError(f"expected {grid.dim * self.param_grid.size} parameters, got {theta.size}")
        self.theta = theta
        self._map = self._injection()

    def _injection(self) -> np.ndarray:
        """Parameter cell that owns each solver cell."""
        if self.param_grid == self.grid:
            return np.arange(self.grid.size)
        pg = self.param_grid
        k = np.floor((self.grid.centers - pg.lower_edges) / pg.spacing + 1e-9).astype(np.int64)
        k = np.clip(k, 0, np.asarray(pg.counts) - 1)
        return k @ pg.strides

    def hyperparameters(self) -> dict:
        return {"param_grid": self.param_grid.to_dict()}

    def with_theta(self, theta):
        return PiecewiseConstant(self.grid, theta, self.param_grid)

    def regrid(self, grid):
        return PiecewiseConstant(grid, self.theta, self.param_grid)

    def _table(self) -> np.ndarray:
        return self.theta.reshape(self.grid.dim, self.param_grid.size)[:, self._map]

    def eval_faces(self) -> FaceVelocity:
        return FaceVelocity(self.grid, self._table())

    def _pullback(self, points_by_axis, sens_by_axis):
        mask = self.grid.active_faces
        g = np.zeros((self.grid.dim, self.param_grid.size))
        for i in range(self.grid.dim):
            np.add.at(g[i], self._map[mask[i]], sens_by_axis[i])
        return g.reshape(-1)

    def _field(self, points):
        table = self.eval_faces().values
        j = self.grid.cell_of(points)
        return table[:, j].T

    def drift_kernel(self):
        g = self.grid
        table = np.ascontiguousarray(self.eval_faces().values)
        return kernels.em_pc, (table, g.lower_edges, g.spacing.astype(float), np.asarray(g.counts, dtype=np.int64),
                               g.strides)


# -- polynomial --------------------------------------------------------------------

def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """All multi-indices with total degree <= ``degree``, graded order."""
    rows = []
    for total in range(degree + 1):
        for k in itertools.product(range(total, -1, -1), repeat=dim):
            if sum(k) == total:
                rows.append(k)
    return np.array(rows, dtype=np.int64).reshape(-1, dim)


class Polynomial(VelocityModel):
    """Raw monomial basis.  High degrees on wide domains are ill-conditioned."""

    variant = "poly"

    def __init__(self, grid: Grid, degree: int, theta):
        if degree < 0:
            raise ValueError("degree must be nonnegative")
        self.grid = grid
        self.degree = int(degree)
        self.exps = monomial_exponents(grid.dim, self.degree)
        theta = np.array(theta, dtype=float).reshape(-1)
        if theta.size != grid.dim * len(self.exps):
            raise ValueError(f"expected {grid.dim * len(self.exps)} parameters, got {theta.size}")
        self.theta = theta

    @property
    def n_terms(self) -> int:
        return len(self.exps)

    @property
    def coefs(self) -> np.ndarray:
        return self.theta.reshape(self.grid.dim, self.n_terms)

    def hyperparameters(self):
        return {"degree": self.degree}

    def with_theta(self, theta):
        return Polynomial(self.grid, self.degree, theta)

    def regrid(self, grid):
        return Polynomial(grid, self.degree, self.theta)

    def basis(self, points) -> np.ndarray:
        x = np.atleast_2d(points)
        with np.errstate(over="ignore", invalid="ignore"):
            return np.prod(x[:, None, :] ** self.exps[None, :, :], axis=2)

    def _field(self, points):
        return self.basis(points) @ self.coefs.T

    def _face_values(self, points_by_axis):
        c = self.coefs
        with np.errstate(over="ignore", invalid="ignore"):
            return [self.basis(p) @ c[i] for i, p in enumerate(points_by_axis)]

    def _pullback(self, points_by_axis, sens_by_axis):
        return np.concatenate([self.basis(p).T @ s for p, s in zip(points_by_axis, sens_by_axis)])

    def drift_kernel(self):
        return kernels.em_poly, (self.exps, np.ascontiguousarray(self.coefs))


# -- neural network ----------------------------------------------------------------

class NeuralNet(VelocityModel):
    variant = "nn"

    def __init__(self, grid: Grid, hidden: int, theta, activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.grid = grid
        self.hidden = int(hidden)
        self.activation = activation
        theta = np.array(theta, dtype=float).reshape(-1)
        if theta.size != self.size_for(grid.dim, self.hidden):
            raise ValueError(f"expected {self.size_for(grid.dim, self.hidden)} parameters, got {theta.size}")
        self.theta = theta

    @staticmethod
    def size_for(dim: int, hidden: int) -> int:
        return 2 * hidden * dim + hidden + dim

    def weights(self):
        d, H = self.grid.dim, self.hidden
        t = self.theta
        w1 = t[:H * d].reshape(H, d)
        b1 = t[H * d:H * d + H]
        w2 = t[H * d + H:2 * H * d + H].reshape(d, H)
        b2 = t[2 * H * d + H:]
        return w1, b1, w2, b2

    def hyperparameters(self):
        return {"hidden": self.hidden, "activation": self.activation}

    def with_theta(self, theta):
        return NeuralNet(self.grid, self.hidden, theta, self.activation)

    def regrid(self, grid):
        return NeuralNet(grid, self.hidden, self.theta, self.activation)

    def scaled(self, a):
        H, d = self.hidden, self.grid.dim
        theta = self.theta.copy()
        theta[H * d + H:] *= a
        return self.with_theta(theta)

    def _act(self, z):
        if self.activation == "tanh":
            h = np.tanh(z)
            return h, 1.0 - h * h
        h = 1.0 / (1.0 + np.exp(-z))
        return h, h * (1.0 - h)

    def _field(self, points):
        w1, b1, w2, b2 = self.weights()
        h, _ = self._act(points @ w1.T + b1)
        return h @ w2.T + b2

    def _face_values(self, points_by_axis):
        return [self._field(p)[:, i] for i, p in enumerate(points_by_axis)]

    def _pullback(self, points_by_axis, sens_by_axis):
        w1, b1, w2, _ = self.weights()
        d = self.grid.dim
        x = np.concatenate(points_by_axis)
        dout = np.zeros((len(x), d))
        start = 0
        for i, s in enumerate(sens_by_axis):
            dout[start:start + len(s), i] = s
            start += len(s)
        h, dh_dz = self._act(x @ w1.T + b1)
        g_w2 = dout.T @ h
        g_b2 = dout.sum(axis=0)
        dz = (dout @ w2) * dh_dz
        g_w1 = dz.T @ x
        g_b1 = dz.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def drift_kernel(self):
        w1, b1, w2, b2 = (np.ascontiguousarray(a) for a in self.weights())
        act = kernels.TANH if self.activation == "tanh" else kernels.SIGMOID
        return kernels.em_mlp, (w1, b1, w2, b2, act)


# -- construction -----------------------------------------------------------------

def _attracting_circle(model: Polynomial) -> np.ndarray:
    """Coefficients of ``(-y + x(0.1 - x^2 - y^2), x + y(0.1 - x^2 - y^2))``."""
    index = {tuple(k): l for l, k in enumerate(model.exps.tolist())}
    c = np.zeros((2, model.n_terms))
    terms = [
        (0, (0, 1), -1.0), (0, (1, 0), 0.1), (0, (3, 0), -1.0), (0, (1, 2), -1.0),
        (1, (1, 0), 1.0), (1, (0, 1), 0.1), (1, (2, 1), -1.0), (1, (0, 3), -1.0),
    ]
    for comp, k, val in terms:
        c[comp, index[k]] = val
    return c.reshape(-1)


def time_reversed(model: VelocityModel, D: float, floor: float = 1e-10) -> PiecewiseConstant:
    """PC model of the time-reversed dynamics on ``model.grid``.

    It has the same stationary density as ``(model, D)`` but circulates the
    other way; see :func:`fplearn.fvm.reverse_velocity`.
    """
    fv = reverse_velocity(model.eval_faces(), D, floor=floor)
    return PiecewiseConstant(model.grid, fv.values.reshape(-1))


def init(variant: str, grid: Grid, config: dict | None = None, seed: int = 0) -> VelocityModel:
    """Initial model.

    ``config`` keys: ``D`` (diffusion, default 0.1), ``init_scale`` (PC,
    default ``0.01 * D``), ``param_grid`` (PC, a :class:`Grid` or dict),
    ``degree`` (poly, default 3), ``hidden`` and ``activation`` (NN, defaults
    100 and tanh).
    """
    cfg = dict(config or {})
    D = float(cfg.get("D", 0.1))
    d = grid.dim
    if variant == "pc":
        pg = cfg.get("param_grid")
        if isinstance(pg, dict):
            pg = Grid.from_dict(pg)
        pg = grid if pg is None else pg
        scale = float(cfg.get("init_scale", 0.01 * D))
        return PiecewiseConstant(grid, np.full(d * pg.size, scale), pg)
    if variant == "poly":
        degree = int(cfg.get("degree", 3))
        model = Polynomial(grid, degree, np.zeros(d * math.comb(d + degree, degree)))
        if d == 2 and degree >= 3:
            return model.with_theta(_attracting_circle(model))
        if d >= 2 and degree >= 1:
            index = {tuple(k): l for l, k in enumerate(model.exps.tolist())}
            e0 = tuple(1 if a == 0 else 0 for a in range(d))
            e1 = tuple(1 if a == 1 else 0 for a in range(d))
            c = np.zeros((d, model.n_terms))
            c[0, index[e1]] = -1.0
            c[1, index[e0]] = 1.0
            return model.with_theta(c.reshape(-1))
        warnings.warn(f"no structured polynomial initialiser for d={d}, degree={degree}; using zeros",
                      RuntimeWarning, stacklevel=2)
        return model
    if variant == "nn":
        H = int(cfg.get("hidden", 100))
        act = cfg.get("activation", "tanh")
        rng = _rng(seed)
        s1, s2 = 1 / math.sqrt(d), 1 / math.sqrt(H)
        w1 = rng.uniform(-s1, s1, size=(H, d))
        w2 = rng.uniform(-s2, s2, size=(d, H))
        theta = np.concatenate([w1.ravel(), np.zeros(H), w2.ravel(), np.zeros(d)])
        return NeuralNet(grid, H, theta, act)
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def from_dict(data: dict) -> VelocityModel:
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version}")
    grid = Grid.from_dict(data["grid"])
    hp = data.get("hyperparameters", {})
    theta = np.asarray(data["theta"], dtype=float)
    variant = data["variant"]
    if variant == "pc":
        pg = hp.get("param_grid")
        return PiecewiseConstant(grid, theta, Grid.from_dict(pg) if pg else None)
    if variant == "poly":
        return Polynomial(grid, hp["degree"], theta)
    if variant == "nn":
        return NeuralNet(grid, hp["hidden"], theta, hp.get("activation", "tanh"))
    raise ValueError(f"unknown variant {variant!r}")
