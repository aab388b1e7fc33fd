"""Euler-Maruyama simulation, benchmark systems and delay embedding."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BlowUpError
from .velocity import VelocityModel

log = logging.getLogger(__name__)

BUILTINS = {
    "vdp": (kernels.VDP, 2, ("c",), (1.0,)),
    "lorenz63": (kernels.LORENZ63, 3, ("c1", "c2", "c3"), (10.0, 28.0, 8.0 / 3.0)),
    "arctan_lorenz": (kernels.ARCTAN_LORENZ, 3, ("c1", "c2", "c3"), (10.0, 28.0, 8.0 / 3.0)),
}
NOISE_CHUNK = 4096


def _builtin_params(tag, params):
    if tag not in BUILTINS:
        raise ValueError(f"unknown system {tag!r}; choose from {sorted(BUILTINS)}")
    _, _, names, defaults = BUILTINS[tag]
    prm = defaults if params is None else tuple(float(p) for p in np.atleast_1d(params))
    if len(prm) != len(names):
        raise ValueError(f"{tag} takes parameters {names}, got {len(prm)} values")
    return np.asarray(prm, dtype=float)


def builtin_drift(tag: str, params, x) -> np.ndarray:
    """Drift of a benchmark system at one point (shape (d,)) or many (shape (n, d))."""
    prm = _builtin_params(tag, params)
    kind, dim = BUILTINS[tag][:2]
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    if pts.shape[1] != dim:
        raise ValueError(f"{tag} is {dim}-dimensional")
    v = kernels._numpy.builtin_drift(kind, prm, pts)
    return v[0] if x.ndim == 1 else v


@dataclass(frozen=True, eq=False)
class SdeSpec:
    """``dX = v(X) dt + sigma dW`` with isotropic diffusion ``D = sigma**2 / 2``.

    ``drift`` is a builtin tag or a :class:`VelocityModel`.
    """

    drift: object
    sigma: float = 0.0
    params: tuple | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if isinstance(self.drift, str):
            object.__setattr__(self, "params", tuple(_builtin_params(self.drift, self.params)))
        elif not isinstance(self.drift, VelocityModel):
            raise TypeError("drift must be a builtin tag or a VelocityModel")

    @classmethod
    def from_diffusion(cls, drift, D: float, params=None) -> "SdeSpec":
        if D < 0:
            raise ValueError("D must be nonnegative")
        return cls(drift, math.sqrt(2.0 * D), params)

    @property
    def D(self) -> float:
        return 0.5 * self.sigma ** 2

    @property
    def dim(self) -> int:
        if isinstance(self.drift, str):
            return BUILTINS[self.drift][1]
        return self.drift.grid.dim

    def _kernel(self):
        if isinstance(self.drift, str):
            kind = BUILTINS[self.drift][0]
            inf = np.full(self.dim, np.inf)
            return kernels.em_builtin, (kind, np.asarray(self.params)), -inf, inf
        fn, args = self.drift.drift_kernel()
        lo, hi = self.drift.grid.interior_box
        return fn, args, lo, hi


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded states; ``states`` has shape (T, d) for one path or (T, P, d)."""

    times: np.ndarray
    states: np.ndarray
    excursions: int = 0


def simulate(spec: SdeSpec, x0, dt: float, steps: int, seed: int = 0, record_every: int = 1) -> Trajectory:
    """Euler-Maruyama integration ``X += v(X) dt + sigma sqrt(dt) xi``.

    ``x0`` of shape (d,) gives one path, shape (P, d) gives P independent
    paths sharing the noise stream layout (step, path, axis).  The first
    recorded state is ``x0``.  Learned drifts are zero outside their interior
    box; each step a path spends there counts as one excursion.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 0 or record_every < 1:
        raise ValueError("steps must be >= 0 and record_every >= 1")
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    x = np.array(np.atleast_2d(x0), dtype=float)
    if x.shape[1] != spec.dim:
        raise ValueError(f"x0 has {x.shape[1]} components, system is {spec.dim}-D")
    fn, args, lo, hi = spec._kernel()
    n_rec = steps // record_every
    out = np.empty((n_rec + 1,) + x.shape)
    out[0] = x
    rec_pos = 1
    excursions = 0
    rng = np.random.Generator(np.random.Philox(seed))
    zeros = None
    done = 0
    while done < steps:
        n = min(NOISE_CHUNK, steps - done)
        if spec.sigma > 0:
            noise = rng.standard_normal((n,) + x.shape)
        else:
            if zeros is None or len(zeros) < n:
                zeros = np.zeros((n,) + x.shape)
            noise = zeros[:n]
        rec_pos, bad, exc = fn(x, noise, dt, spec.sigma, record_every, done, out, rec_pos, lo, hi, *args)
        excursions += exc
        if bad >= 0:
            raise BlowUpError(f"state became non-finite at step {bad}", step=int(bad))
        done += n
    if excursions:
        log.info("%d path-steps left the model's interior box", excursions)
    times = np.arange(n_rec + 1) * dt * record_every
    states = out[:, 0] if single else out
    return Trajectory(times, states, excursions)


def burn_in(states, fraction: float = 0.1) -> np.ndarray:
    """Drop the leading ``fraction`` of samples."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    return states[int(len(states) * fraction):]


# -- delay embedding ------------------------------------------------------------------

@dataclass(frozen=True)
class DelaySpec:
    dim: int
    tau: float
    h: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.tau <= 0 or self.h <= 0:
            raise ValueError("tau and h must be positive")
        m = self.tau / self.h
        if abs(m - round(m)) > 1e-9 * max(1.0, m) or round(m) < 1:
            raise ValueError(f"tau / h = {m} is not a positive integer")

    @property
    def lag(self) -> int:
        return int(round(self.tau / self.h))


def delay_embed(series, dim: int, lag: int = 1) -> np.ndarray:
    """Rows ``(psi(t), psi(t - lag), ..., psi(t - (dim-1) lag))`` for every valid ``t``."""
    psi = np.asarray(series, dtype=float).reshape(-1)
    if dim < 1 or lag < 1:
        raise ValueError("dim and lag must be >= 1")
    span = (dim - 1) * lag
    if len(psi) <= span:
        raise ValueError(f"series of length {len(psi)} is too short for dim={dim}, lag={lag}")
    n = len(psi) - span
    return np.stack([psi[span - k * lag:span - k * lag + n] for k in range(dim)], axis=1)


def delay_embed_spec(series, spec: DelaySpec) -> np.ndarray:
    return delay_embed(series, spec.dim, spec.lag)
