"""Objective value and parameter gradient through the stationary constraint.

One evaluation assembles ``M`` from the model's face velocities, solves for
the regularised stationary density, evaluates the misfit, solves one
transposed system for the adjoint state and pulls the face sensitivities back
to ``theta``.  The time step is frozen at its CFL value for the current
``theta``: its dependence on ``max |v|`` is piecewise and not differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fvm import (AdjointSolution, FaceVelocity, MarkovOperator, SteadyState, assemble, default_eps,
                  face_gradient, solve_adjoint, solve_steady)
from .measure import DensityField
from .objective import ObjectiveResult, evaluate
from .velocity import VelocityModel


@dataclass(frozen=True)
class Problem:
    """Everything besides ``theta`` that defines the misfit."""

    target: DensityField
    D: float
    objective: str = "l2"
    eps: float | None = None
    safety: float = 0.9
    boundary: str = "reduce"
    objective_options: dict = field(default_factory=dict)

    @property
    def eps_value(self) -> float:
        return default_eps(self.D) if self.eps is None else self.eps


@dataclass(frozen=True, eq=False)
class Evaluation:
    value: float
    grad: np.ndarray | None
    rho: DensityField
    objective: ObjectiveResult
    op: MarkovOperator
    state: SteadyState
    adjoint: AdjointSolution | None = None
    face_sens: np.ndarray | None = None


def param_gradient(model: VelocityModel, lam, rho_raw, fv: FaceVelocity, eps: float, dt: float,
                   face_mask=None) -> np.ndarray:
    """``lam^T (d M_eps / d theta) rho`` via face sensitivities and the model pullback."""
    return model.pullback(face_gradient(lam, rho_raw, fv, eps, dt, face_mask))


def evaluate_model(model: VelocityModel, problem: Problem, gradient: bool = True,
                   dt: float | None = None) -> Evaluation:
    """Misfit of ``model`` and, optionally, its gradient in ``theta``.

    ``dt`` overrides the CFL step; finite-difference oracles pass the step of
    the unperturbed model so both sides see the same discretisation.
    """
    if model.grid != problem.target.grid:
        raise ValueError("model and target live on different grids")
    fv = model.eval_faces()
    eps = problem.eps_value
    op = assemble(fv, problem.D, dt=dt, safety=problem.safety, boundary=problem.boundary)
    state = solve_steady(op, eps)
    obj = evaluate(problem.objective, state.rho, problem.target, **problem.objective_options)
    if not gradient:
        return Evaluation(obj.value, None, state.rho, obj, op, state)
    adj = solve_adjoint(op, state.rho, obj.grad, eps, state=state)
    sens = face_gradient(adj.lam, state.rho_raw, fv, eps, op.dt)
    return Evaluation(obj.value, model.pullback(sens), state.rho, obj, op, state, adj, sens)


def finite_difference_gradient(model: VelocityModel, problem: Problem, coords=None, h: float = 1e-6,
                               dt: float | None = None) -> np.ndarray:
    """Central differences of the misfit in ``theta``, re-solving the steady state.

    Entries not in ``coords`` are left as NaN.
    """
    if dt is None:
        dt = assemble(model.eval_faces(), problem.D, safety=problem.safety, boundary=problem.boundary).dt
    theta = model.theta
    coords = range(theta.size) if coords is None else coords
    out = np.full(theta.size, np.nan)
    for k in coords:
        step = h * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += step
        tm[k] -= step
        fp = evaluate_model(model.with_theta(tp), problem, gradient=False, dt=dt).value
        fm = evaluate_model(model.with_theta(tm), problem, gradient=False, dt=dt).value
        out[k] = (fp - fm) / (2 * step)
    return out


@dataclass(frozen=True)
class GradCheck:
    rel_error: float
    grad: np.ndarray
    fd: np.ndarray
    coords: np.ndarray


def gradcheck(model: VelocityModel, problem: Problem, coords=None, h: float = 1e-6) -> GradCheck:
    """Compare the adjoint gradient with finite differences.

    The error is ``max |g - fd| / max |fd|`` over ``coords`` (all parameters by
    default).
    """
    ev = evaluate_model(model, problem)
    coords = np.arange(model.n_params) if coords is None else np.asarray(coords)
    fd = finite_difference_gradient(model, problem, coords, h, dt=ev.op.dt)
    g, f = ev.grad[coords], fd[coords]
    scale = np.abs(f).max()
    err = float(np.abs(g - f).max() / scale) if scale > 0 else float(np.abs(g).max())
    return GradCheck(err, ev.grad, fd, coords)
