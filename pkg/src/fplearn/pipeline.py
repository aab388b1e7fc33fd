"""Three-step calibration against data, and density evolution with quantile bands."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adjoint import Problem, evaluate_model
from .dynamics import SdeSpec, simulate
from .errors import BlowUpError, EmptyMeasureError, FPLearnError
from .fvm import assemble, step_density
from .grid import Grid
from .measure import DensityField, bin_trajectory, gaussian_smooth
from .train import FitResult, TrainConfig, fit
from .velocity import VelocityModel, init, time_reversed

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2
LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


class BracketWarning(UserWarning):
    """A scalar search ended at the edge of its bracket."""


# -- scalar searches ------------------------------------------------------------------

def golden_section(f, lo: float, hi: float, tol: float = 1e-4, max_iter: int = 200):
    """Minimise a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x), n_evals)``."""
    if not lo < hi:
        raise ValueError("empty bracket")
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    n = 2
    while b - a > tol and n < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
        n += 1
    return (c, fc, n) if fc <= fd else (d, fd, n)


def log_search(f, lo: float, hi: float, n_scan: int = 9, tol: float = 1e-3, workers: int = 1, name: str = "x"):
    """Minimise ``f`` over ``[lo, hi]`` on a log scale.

    A log-spaced scan (evaluated concurrently with ``workers`` threads) picks
    the best bracket, which golden-section search then refines in ``log x``.
    Returns ``(x, f(x), scan_x, scan_f)``; warns if the minimum sits on a
    bracket end.
    """
    xs = np.geomspace(lo, hi, n_scan)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fs = np.array(list(pool.map(f, xs)))
    else:
        fs = np.array([f(x) for x in xs])
    k = int(np.nanargmin(np.where(np.isfinite(fs), fs, np.nan))) if np.isfinite(fs).any() else 0
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, n_scan - 1)]
    x, fx, _ = golden_section(lambda u: f(math.exp(u)), math.log(a), math.log(b), tol)
    x = math.exp(x)
    if fs[k] < fx:
        x, fx = xs[k], fs[k]
    if k in (0, n_scan - 1) and (abs(math.log(x / lo)) < 2 * tol or abs(math.log(x / hi)) < 2 * tol):
        warnings.warn(f"{name} search hit its bracket end ({x:.4g} in [{lo:.4g}, {hi:.4g}])", BracketWarning,
                      stacklevel=2)
    return x, float(fx), xs, fs


def dominant_period(series, dt: float) -> float:
    """Period of the largest non-constant Fourier mode of a scalar series."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), dt)
    if len(power) < 2 or not np.any(power[1:] > 0):
        raise ValueError("series has no oscillatory content")
    return 1.0 / freqs[1 + int(np.argmax(power[1:]))]


# -- calibration ---------------------------------------------------------------------

@dataclass
class CalibrationConfig:
    variant: str = "nn"
    model_config: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    sigma_cells: float = 1.0
    d_range: float = 100.0
    n_scan: int = 9
    n_scan_a: int = 81  # the orbit misfit has narrow basins from phase wrapping
    a_bracket: tuple = (0.01, 100.0)  # relative to the speed-ratio estimate
    window: float | None = None
    orient: bool = True  # also try the time-reversed drift in step 3
    substeps: int = 20
    workers: int = 1
    seed: int = 0


@dataclass
class CalibrationResult:
    model: VelocityModel
    D_tilde: float
    a: float
    diagnostics: dict

    @property
    def drift(self) -> VelocityModel:
        return self.model.scaled(self.a)

    @property
    def diffusion(self) -> float:
        return self.a * self.D_tilde


def _target(data, grid: Grid, sigma_cells: float) -> DensityField:
    rho = bin_trajectory(data, grid)
    return gaussian_smooth(rho, sigma_cells) if sigma_cells > 0 else rho


def orbit_mismatch(model: VelocityModel, data, dt: float, a: float, n_window: int, substeps: int = 20) -> float:
    """``sum_i |C_hat(t_i; a) - C(t_i)|^2`` over the first ``n_window`` samples.

    ``C_hat`` is the forward-Euler orbit of ``a v`` from ``data[0]``; since
    ``a v`` with step ``h`` is the same map as ``v`` with step ``a h``, the
    scaled model is never built.
    """
    spec = SdeSpec(model, 0.0)
    steps = (n_window - 1) * substeps
    try:
        traj = simulate(spec, data[0], a * dt / substeps, steps, record_every=substeps)
    except BlowUpError:
        return math.inf
    diff = traj.states - data[:n_window]
    return float(np.sum(diff * diff))


def speed_ratio(model: VelocityModel, data, dt: float) -> float:
    """Mean observed speed over mean model speed along the data.

    A first guess for the time scale that scales like ``1 / dt``.
    """
    observed = np.linalg.norm(np.diff(data, axis=0), axis=1).mean() / dt
    modelled = np.linalg.norm(model.velocity(data), axis=1).mean()
    if not (modelled > 0 and observed > 0):
        return 1.0
    return float(observed / modelled)


@dataclass
class TimeScaleFit:
    model: VelocityModel
    a: float
    reversed: bool
    diagnostics: dict


def fit_time_scale(model: VelocityModel, data, dt: float, D: float, window: float | None = None,
                   a_bracket=(0.01, 100.0), n_scan: int = 81, substeps: int = 20, orient: bool = True,
                   workers: int = 1) -> TimeScaleFit:
    """Pick ``a`` so the zero-noise orbit of ``a v`` from ``data[0]`` tracks ``data``.

    The misfit runs over ``window`` time units (default one dominant period
    of the first coordinate) and ``a`` is scanned over ``a_bracket`` times
    :func:`speed_ratio`.  A stationary density cannot tell ``v`` from its
    time reversal, so with ``orient`` the reversed drift (a PC model, see
    :func:`~fplearn.velocity.time_reversed`) is scanned as well and the
    better orbit fit wins.
    """
    data = np.asarray(data, dtype=float)
    window = window if window is not None else dominant_period(data[:, 0], dt)
    n_window = int(min(len(data), max(2, round(window / dt) + 1)))

    def scan(m):
        def mismatch(a):
            return orbit_mismatch(m, data, dt, float(a), n_window, substeps)

        a0 = speed_ratio(m, data, dt)
        lo, hi = (a0 * f for f in a_bracket)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", BracketWarning)
            a, r, a_scan, r_scan = log_search(mismatch, lo, hi, n_scan=n_scan, workers=workers, name="time-scale")
        return m, a0, a, r, a_scan, r_scan, caught

    best = scan(model)
    r_reversed = None
    if orient:
        other = scan(time_reversed(model, D))
        r_reversed = other[3]
        if other[3] < best[3]:
            best = other
    m, a0, a, r, a_scan, r_scan, caught = best
    for w in caught:  # only the chosen orientation's warnings matter
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    reversed_ = m is not model
    diagnostics = {"window": window, "speed_ratio": a0, "samples": n_window, "residual": r, "a_scan": a_scan.tolist(),
                   "residual_scan": r_scan.tolist(), "reversed": reversed_, "residual_reversed": r_reversed}
    return TimeScaleFit(m, float(a), reversed_, diagnostics)


def calibrate(data, dt: float, coarse: Grid, fine: Grid, D_assumed: float,
              cfg: CalibrationConfig | None = None) -> CalibrationResult:
    """Learn ``v`` on ``coarse``, refit ``D`` on ``fine``, then fit the time scale.

    ``data`` is a (T, d) trajectory sampled every ``dt``.  Step 1 fits the
    model to the (smoothed) occupation measure on ``coarse`` with diffusion
    ``D_assumed``.  Step 2 moves the model to ``fine`` and minimises the
    misfit over ``D`` in ``[D_assumed / d_range, D_assumed * d_range]``.
    Step 3 is :func:`fit_time_scale` on ``fine``; its bracket is relative to
    :func:`speed_ratio`, so rescaling time rescales ``a`` exactly.
    The calibrated drift and diffusion are ``a v`` and ``a D``.
    """
    cfg = cfg or CalibrationConfig()
    data = np.asarray(data, dtype=float)
    train = TrainConfig(**{**cfg.train.__dict__, "D": D_assumed})

    # step 1
    target_c = _target(data, coarse, cfg.sigma_cells)
    model0 = init(cfg.variant, coarse, {"D": D_assumed, **cfg.model_config}, seed=cfg.seed)
    try:
        res1: FitResult = fit(target_c, model0, train)
    except FPLearnError as exc:
        raise FPLearnError(f"calibration step 1 failed: {exc}") from exc

    # step 2
    model_f = res1.model.regrid(fine)
    target_f = _target(data, fine, cfg.sigma_cells)

    def misfit(D):
        problem = Problem(target_f, float(D), train.objective, train.eps, train.safety, train.boundary,
                          dict(train.objective_options))
        try:
            return evaluate_model(model_f, problem, gradient=False).value
        except FPLearnError:
            return math.inf

    j_initial = misfit(D_assumed)
    D_t, j_final, d_scan, j_scan = log_search(misfit, D_assumed / cfg.d_range, D_assumed * cfg.d_range,
                                              cfg.n_scan, workers=cfg.workers, name="diffusion")
    if j_initial < j_final:
        D_t, j_final = D_assumed, j_initial

    # step 3
    ts = fit_time_scale(model_f, data, dt, D_t, cfg.window, cfg.a_bracket, cfg.n_scan_a, cfg.substeps,
                        cfg.orient, cfg.workers)
    diagnostics = {
        "step1": {"grid": coarse.counts, "initial": res1.initial_value, "final": res1.final_value,
                  "iterations": len(res1.log) - 1, "reason": res1.reason},
        "step2": {"grid": fine.counts, "initial": j_initial, "final": j_final, "D_scan": d_scan.tolist(),
                  "J_scan": j_scan.tolist()},
        "step3": ts.diagnostics,
        "fit_log": res1.log,
    }
    return CalibrationResult(ts.model, float(D_t), ts.a, diagnostics)


# -- uncertainty quantification ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuantileBands:
    times: np.ndarray
    levels: tuple
    quantiles: np.ndarray
    mean: np.ndarray

    def band(self, lo: float, hi: float) -> tuple:
        return self.quantiles[:, self.levels.index(lo)], self.quantiles[:, self.levels.index(hi)]

    def width(self, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
        a, b = self.band(lo, hi)
        return b - a


@dataclass(frozen=True, eq=False)
class UQResult:
    bands: QuantileBands
    frames: list
    dt: float


def box_density(grid: Grid, center, half_widths) -> DensityField:
    """Uniform mass over interior cells that intersect ``center +- half_widths``."""
    c = np.asarray(center, dtype=float)
    hw = np.broadcast_to(np.asarray(half_widths, dtype=float), c.shape)
    if np.any(hw < 0):
        raise ValueError("half-widths must be nonnegative")
    lo_cell = grid.centers - grid.spacing / 2
    hi_cell = grid.centers + grid.spacing / 2
    hit = np.all((lo_cell <= c + hw) & (hi_cell > c - hw), axis=1) & grid.interior
    if not hit.any():
        raise EmptyMeasureError(f"box {c} +- {hw} covers no interior cell")
    return DensityField(grid, hit / hit.sum())


def marginal_quantiles(rho: DensityField, levels=LEVELS, axis: int = 0) -> np.ndarray:
    """Quantiles of one marginal, interpolating cumulative mass linearly within cells."""
    m = rho.marginal(axis)
    m = m / m.sum()
    h = rho.grid.spacing[axis]
    edges = rho.grid.axes[axis] - h / 2
    cum = np.concatenate(([0.0], np.cumsum(m)))
    out = np.empty(len(levels))
    for n, q in enumerate(levels):
        k = int(np.searchsorted(cum, q, side="left")) - 1
        k = min(max(k, 0), len(m) - 1)
        while m[k] <= 0 and k < len(m) - 1:
            k += 1
        frac = (q - cum[k]) / m[k] if m[k] > 0 else 0.0
        out[n] = edges[k] + h * min(max(frac, 0.0), 1.0)
    return np.maximum.accumulate(out)


def evolve_uq(model: VelocityModel, D: float, initial, steps: int, record_every: int = 1,
              dt: float | None = None, safety: float = 0.9, levels=LEVELS, axis: int = 0) -> UQResult:
    """Step the Fokker-Planck density forward and summarise one marginal.

    ``initial`` is a :class:`DensityField` on the model grid or a ``(center,
    half_widths)`` box.
    """
    grid = model.grid
    rho0 = initial if isinstance(initial, DensityField) else box_density(grid, *initial)
    if rho0.grid != grid:
        raise ValueError("initial density is not on the model grid")
    op = assemble(model.eval_faces(), D, dt=dt, safety=safety)
    frames = step_density(rho0, op, steps, record_every)
    levels = tuple(levels)
    q = np.array([marginal_quantiles(f, levels, axis) for f in frames])
    mean = np.array([f.marginal(axis) @ grid.axes[axis] for f in frames])
    times = np.arange(len(frames)) * record_every * op.dt
    return UQResult(QuantileBands(times, levels, q, mean), frames, op.dt)
