"""First-order optimisers and the fitting loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import Problem, evaluate_model
from .errors import DivergenceError, FPLearnError
from .measure import DensityField
from .velocity import VelocityModel

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "objective", "value", "grad_norm", "wall_time")


class Adam:
    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class GradientDescent:
    def __init__(self, lr=0.1):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


OPTIMIZERS = {"adam": Adam, "gd": GradientDescent}


@dataclass
class TrainConfig:
    objective: str = "kl"
    optimizer: str = "adam"
    lr: float = 0.1
    max_iter: int = 2000
    stop_ratio: float = 0.005
    eps: float | None = None
    D: float = 0.1
    safety: float = 0.9
    boundary: str = "reduce"
    objective_options: dict = field(default_factory=dict)
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.stop_ratio <= 1:
            raise ValueError("stop_ratio must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")

    def problem(self, target: DensityField) -> Problem:
        return Problem(target, self.D, self.objective, self.eps, self.safety, self.boundary,
                       dict(self.objective_options))


@dataclass
class FitResult:
    model: VelocityModel
    log: list
    reason: str

    @property
    def initial_value(self) -> float:
        return self.log[0]["value"]

    @property
    def final_value(self) -> float:
        return self.log[-1]["value"]


def fit(target: DensityField, model0: VelocityModel, cfg: TrainConfig, checkpoint=None, callback=None) -> FitResult:
    """Minimise the misfit over ``theta``.

    Row 0 of the log holds the initial model; each later row is one optimiser
    step.  Stops after ``cfg.max_iter`` steps or once the value drops to
    ``cfg.stop_ratio`` times the initial value.  ``checkpoint(iteration,
    model)`` is called every ``cfg.checkpoint_every`` steps, ``callback(row)``
    after every row.  A non-finite value or a failed solve raises
    :class:`DivergenceError` carrying the last good model and the log so far.
    """
    problem = cfg.problem(target)
    opt = OPTIMIZERS[cfg.optimizer](lr=cfg.lr)
    start = time.perf_counter()
    rows = []

    def record(it, value, grad):
        row = {"iteration": it, "objective": cfg.objective, "value": value,
               "grad_norm": float(np.linalg.norm(grad)), "wall_time": time.perf_counter() - start}
        rows.append(row)
        if callback is not None:
            callback(row)

    model = model0
    ev = evaluate_model(model, problem)
    if not math.isfinite(ev.value):
        raise DivergenceError("initial objective is not finite", last_model=model0, log=rows)
    initial = ev.value
    record(0, ev.value, ev.grad)
    reason = "max_iter"
    for it in range(1, cfg.max_iter + 1):
        if ev.value <= cfg.stop_ratio * initial:
            reason = "stop_ratio"
            break
        candidate = model.with_theta(opt.step(model.theta, ev.grad))
        try:
            new = evaluate_model(candidate, problem)
        except FPLearnError as exc:
            raise DivergenceError(f"step {it} failed: {exc}", last_model=model, log=rows) from exc
        if not (math.isfinite(new.value) and np.all(np.isfinite(new.grad))):
            raise DivergenceError(f"objective became non-finite at step {it}", last_model=model, log=rows)
        model, ev = candidate, new
        record(it, ev.value, ev.grad)
        if checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoint(it, model)
    else:
        if ev.value <= cfg.stop_ratio * initial:
            reason = "stop_ratio"
    log.info("fit stopped (%s) after %d steps: %.4g -> %.4g", reason, len(rows) - 1, initial, ev.value)
    return FitResult(model, rows, reason)
