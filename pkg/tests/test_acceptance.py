"""End-to-end acceptance criteria.

Each test records one PASS/FAIL line (see ``report`` in conftest) before
asserting, and the lines are repeated in the pytest terminal summary.
"""
import time

import numpy as np
import pytest

from fplearn.adjoint import Problem, gradcheck
from fplearn.dynamics import SdeSpec, builtin_drift, burn_in, simulate
from fplearn.fvm import FaceVelocity, assemble, scaling_identity_gap, solve_steady, steady_state
from fplearn.grid import Grid, cfl_dt
from fplearn.measure import DensityField, bin_trajectory, gaussian_smooth
from fplearn.objective import w2_exact
from fplearn.pipeline import box_density, dominant_period, evolve_uq, fit_time_scale
from fplearn.train import TrainConfig, fit
from fplearn.velocity import NeuralNet, PiecewiseConstant, Polynomial, init

pytestmark = pytest.mark.acceptance


def true_faces(grid, system, params):
    return FaceVelocity(grid, np.stack([builtin_drift(system, params, grid.face_points(i))[:, i]
                                        for i in range(grid.dim)]))


def smooth_target(grid, seed):
    rng = np.random.default_rng(seed)
    m = np.where(grid.interior, rng.random(grid.size) + 0.5, 0.0)
    return DensityField(grid, m / m.sum())


# -- 1: adjoint gradient --------------------------------------------------------------

def test_c01_adjoint_gradient_oracle(report):
    t0 = time.perf_counter()
    g = Grid.uniform(-1, 1, 10, 2)
    rng = np.random.default_rng(11)
    models = {
        "pc": PiecewiseConstant(g, 0.3 * rng.standard_normal(2 * g.size)),
        "poly": Polynomial(g, 3, 0.3 * rng.standard_normal(20)),
        "nn": NeuralNet(g, 6, 0.5 * rng.standard_normal(NeuralNet.size_for(2, 6))),
    }
    worst = {}
    for name, model in models.items():
        for k, objective in enumerate(("l2", "kl", "js", "w2")):
            opts = {"coarsen": 1} if objective == "w2" else {}
            problem = Problem(smooth_target(g, k), 0.1, objective, objective_options=opts)
            coords = None
            if objective == "w2":
                coords = np.sort(rng.choice(model.n_params, 16, replace=False))
            worst[name, objective] = gradcheck(model, problem, coords).rel_error
    elapsed = time.perf_counter() - t0
    smooth = max(v for (_, o), v in worst.items() if o != "w2")
    wass = max(v for (_, o), v in worst.items() if o == "w2")
    ok = smooth <= 1e-4 and wass <= 1e-2 and elapsed <= 120
    report(1, ok, f"max rel err L2/KL/JS {smooth:.2e} (<=1e-4), W2 {wass:.2e} (<=1e-2), {elapsed:.0f}s (<=120s)")
    assert ok, worst


# -- 2: Markov structure --------------------------------------------------------------

def test_c02_markov_structure(report):
    rng = np.random.default_rng(2)
    worst_sum, lowest = 0.0, np.inf
    for _ in range(100):
        dim = int(rng.integers(1, 4))
        counts = tuple(int(c) for c in rng.integers(3, 12 if dim < 3 else 6, size=dim))
        g = Grid(tuple((-1.0, -1.0 + 0.2 * (c - 1)) for c in counts), counts)
        fv = FaceVelocity(g, rng.standard_normal((dim, g.size)) * 10 ** rng.uniform(-2, 2))
        D = float(rng.choice([0.0, 10 ** rng.uniform(-3, 1)]))
        if D == 0 and fv.vmax == 0:  # no active faces: pure transport has nothing to move
            D = 0.1
        M = assemble(fv, D, dt=cfl_dt(g, D, fv.vmax, safety=0.9)).matrix
        worst_sum = max(worst_sum, float(np.abs(np.asarray(M.sum(axis=0)).ravel() - 1).max()))
        lowest = min(lowest, float(M.min()))
    ok = worst_sum <= 1e-12 and lowest >= 0
    report(2, ok, f"100 random operators: max |colsum - 1| {worst_sum:.1e} (<=1e-12), min entry {lowest:.2e} (>=0)")
    assert ok


# -- 3: steady state vs power iteration ------------------------------------------------

def power_iteration(op, eps, max_steps=400_000, tol=1e-15):
    idx = op.active_cells
    Mb = op.block().tocsr()
    n = len(idx)
    x = np.full(n, 1.0 / n)
    for _ in range(max_steps):
        y = (1 - eps) * (Mb @ x) + eps / n
        if np.abs(y - x).sum() < tol:
            x = y
            break
        x = y
    out = np.zeros(op.grid.size)
    out[idx] = x / x.sum()
    return out


def test_c03_steady_state_matches_power_iteration(report):
    t0 = time.perf_counter()
    g = Grid.uniform(-1, 1, 12, 2)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        fv = FaceVelocity(g, rng.standard_normal((2, g.size)))
        D = float(rng.uniform(0.05, 0.5))
        eps = float(rng.choice([1e-2, 1e-3, 1e-4]))
        op = assemble(fv, D)
        worst = max(worst, float(np.abs(steady_state(op, eps).mass - power_iteration(op, eps)).sum()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed <= 60
    report(3, ok, f"20 seeds on 12x12: max l1 gap {worst:.1e} (<=1e-8), {elapsed:.0f}s (<=60s)")
    assert ok


# -- 4: scaling identity ----------------------------------------------------------------

def test_c04_scaling_identity(report):
    g = Grid.uniform(-1, 1, 10, 2)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(400 + seed)
        fv = FaceVelocity(g, rng.standard_normal((2, g.size)))
        D = float(rng.uniform(0.01, 0.5))
        for a in (0.5, 2.0):
            worst = max(worst, scaling_identity_gap(fv, D, a))
    ok = worst <= 1e-10
    report(4, ok, f"10 random 10x10 problems, a in {{0.5, 2}}: max l1 gap {worst:.1e} (<=1e-10)")
    assert ok


# -- 5: mesh refinement -----------------------------------------------------------------

def test_c05_mesh_refinement(report):
    t0 = time.perf_counter()
    D, L = 0.001, 3.2
    box = ((-L, L), (-L, L))
    tr = simulate(SdeSpec.from_diffusion("vdp", D, (1.0,)), [2.0, 0.0], 0.005, 4_000_000, seed=3, record_every=5)
    reference = bin_trajectory(burn_in(tr.states), Grid.from_spacing(box, 0.1))
    errors = []
    for dx in (0.4, 0.2, 0.1):
        g = Grid.from_spacing(box, dx)
        rho = steady_state(assemble(true_faces(g, "vdp", (1.0,)), D))
        errors.append(w2_exact(rho, reference))
    elapsed = time.perf_counter() - t0
    ok = errors[0] > errors[1] > errors[2] and elapsed <= 300
    report(5, ok, "W2^2 at dx 0.4/0.2/0.1: " + " > ".join(f"{e:.4f}" for e in errors)
           + f" (strictly decreasing), {elapsed:.0f}s (<=300s)")
    assert ok


# -- 6 and 9: Van der Pol workflow -------------------------------------------------------

VDP_D = 0.02
VDP_GRID = Grid.uniform(-4, 4, 50, 2)


@pytest.fixture(scope="module")
def vdp_fit():
    t0 = time.perf_counter()
    truth = SdeSpec.from_diffusion("vdp", VDP_D, (0.5,))
    states = simulate(truth, [1.0, 1.0], 0.01, 2_000_000, seed=1, record_every=10).states
    target = bin_trajectory(burn_in(states), VDP_GRID)
    model0 = init("nn", VDP_GRID, {"D": VDP_D}, seed=0)
    cfg = TrainConfig(objective="kl", optimizer="adam", lr=0.1, max_iter=2000, stop_ratio=0.003, D=VDP_D)
    res = fit(target, model0, cfg)
    return states, target, res, time.perf_counter() - t0


def test_c06_van_der_pol_workflow(report, vdp_fit):
    t0 = time.perf_counter()
    states, target, res, fit_time = vdp_fit
    ratio = res.final_value / res.initial_value
    iterations = len(res.log) - 1
    M = assemble(res.model.eval_faces(), VDP_D).matrix
    rollout = simulate(SdeSpec.from_diffusion(res.model, VDP_D), [1.0, 1.0], 0.01, 2_000_000, seed=2,
                       record_every=10)
    rho_hat = bin_trajectory(burn_in(rollout.states), VDP_GRID)
    err = w2_exact(rho_hat, target)
    elapsed = fit_time + time.perf_counter() - t0
    ok = ratio <= 0.005 and iterations <= 2000 and err <= 5e-2 and M.min() >= 0 and elapsed <= 900
    report(6, ok, f"KL at {100 * ratio:.2f}% of initial after {iterations} iterations (<=0.5%, <=2000); "
                  f"rollout W2^2 {err:.3e} (<=5e-2); min M entry {M.min():.1e}; {elapsed:.0f}s (<=900s)")
    assert ok


def test_c09_uq_coverage(report, vdp_fit):
    t0 = time.perf_counter()
    states, _, res, _ = vdp_fit
    h = 0.1
    data = states[:2000]
    ts = fit_time_scale(res.model, data, h, VDP_D)
    model, D = ts.model.scaled(ts.a), ts.a * VDP_D
    period = dominant_period(states[:, 0], h)
    center, hw = states[1000], 0.2
    dt = assemble(model.eval_faces(), D).dt
    every = 5
    steps = int(np.ceil(period / dt / every)) * every
    # held-out ground-truth paths started uniformly in the same box of cells
    box = box_density(VDP_GRID, center, hw)
    cells = VDP_GRID.centers[box.mass > 0]
    rng = np.random.default_rng(9)
    x0 = cells[rng.integers(len(cells), size=200)] + rng.uniform(-0.5, 0.5, (200, 2)) * VDP_GRID.spacing
    sub = 20
    paths = simulate(SdeSpec.from_diffusion("vdp", VDP_D, (0.5,)), x0, dt / sub, steps * sub, seed=19,
                     record_every=every * sub).states
    coverage = []
    for axis in (0, 1):
        bands = evolve_uq(model, D, (center, np.array([hw, hw])), steps, every, axis=axis).bands
        lo, hi = bands.band(0.05, 0.95)
        x = paths[:, :, axis]
        coverage.append(float(((x >= lo[:, None]) & (x <= hi[:, None])).mean()))
    elapsed = time.perf_counter() - t0
    ok = min(coverage) >= 0.9 and elapsed <= 600
    report(9, ok, f"5-95% band coverage over one period {period:.2f}: axis 0 {coverage[0]:.3f}, axis 1 "
                  f"{coverage[1]:.3f} (>=0.90); time scale a={ts.a:.3f}, reversed={ts.reversed}; {elapsed:.0f}s")
    assert ok


# -- 7: slow sampling ---------------------------------------------------------------------

def test_c07_slow_sampling_robustness(report):
    t0 = time.perf_counter()
    D_assumed = 1e-3
    g = Grid.uniform(-5, 5, 51, 2)
    truth = SdeSpec.from_diffusion("vdp", 0.0, (2.0,))
    errors = {}
    for hz in (10.0, 0.25):
        sub = int(round(1 / hz / 0.001))
        obs = simulate(truth, [2.0, 0.0], 0.001, 2550 * sub, record_every=sub).states[50:]
        observed = bin_trajectory(obs, g)
        model0 = init("nn", g, {"D": D_assumed, "hidden": 100}, seed=0)
        cfg = TrainConfig(objective="kl", lr=0.1, max_iter=1000, stop_ratio=0.005, D=D_assumed)
        res = fit(gaussian_smooth(observed, 1.0), model0, cfg)
        rollout = simulate(SdeSpec.from_diffusion(res.model, D_assumed), [2.0, 0.0], 0.005, 400_000, seed=1,
                           record_every=10)
        errors[hz] = w2_exact(bin_trajectory(burn_in(rollout.states), g), observed)
    factor = max(errors.values()) / min(errors.values())
    elapsed = time.perf_counter() - t0
    ok = factor <= 3 and elapsed <= 1200
    report(7, ok, f"rollout W2^2 at 10 Hz {errors[10.0]:.3e}, at 0.25 Hz {errors[0.25]:.3e}: "
                  f"factor {factor:.2f} (<=3); {elapsed:.0f}s (<=1200s)")
    assert ok


# -- 8: self-consistency ------------------------------------------------------------------

def test_c08_self_consistency(report):
    t0 = time.perf_counter()
    g = Grid.uniform(-2, 2, 33, 1)
    D = 0.5
    theta = -g.face_points(0)[:, 0]
    target = steady_state(assemble(PiecewiseConstant(g, theta).eval_faces(), D))
    cfg = TrainConfig(objective="l2", lr=0.05, max_iter=20_000, stop_ratio=1e-7, D=D)
    res = fit(target, init("pc", g, {"D": D}), cfg)
    ratio = res.final_value / res.initial_value
    # faces joining two cells that each carry more than 1e-4 of the mass
    q = np.flatnonzero(g.active_faces[0])
    sel = q[(target.mass[q - 1] > 1e-4) & (target.mass[q] > 1e-4)]
    rel = np.abs(res.model.theta[sel] - theta[sel]) / np.abs(theta[sel])
    elapsed = time.perf_counter() - t0
    ok = ratio <= 1e-3 and rel.max() <= 0.05 and elapsed <= 300
    report(8, ok, f"L2 at {ratio:.1e} of initial (<=1e-3); max theta rel err {rel.max():.3f} on {len(sel)} "
                  f"faces (<=0.05); {elapsed:.0f}s (<=300s)")
    assert ok


# -- 10: diffusion scaling of band width -----------------------------------------------------

def test_c10_diffusion_band_growth(report):
    t0 = time.perf_counter()
    g = Grid.uniform(-10, 10, 401, 1)
    model = PiecewiseConstant(g, np.zeros(g.size))
    D = 0.1
    dt = assemble(model.eval_faces(), D).dt
    steps = int(np.ceil(10.0 / dt))
    bands = evolve_uq(model, D, (np.zeros(1), np.zeros(1)), steps, record_every=1).bands
    t, w = bands.times, bands.width()
    window = (t >= 1.0) & (t <= 10.0)
    slope = float(np.polyfit(np.log(t[window]), np.log(w[window]), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = abs(slope - 0.5) <= 0.1 and elapsed <= 60
    report(10, ok, f"width exponent {slope:.3f} over t in [1, 10] (0.5 +- 0.1); {elapsed:.0f}s (<=60s)")
    assert ok
