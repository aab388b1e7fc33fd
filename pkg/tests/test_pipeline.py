import math
import warnings

import numpy as np
import pytest

from fplearn.dynamics import SdeSpec, builtin_drift, burn_in, simulate
from fplearn.errors import EmptyMeasureError
from fplearn.grid import Grid
from fplearn.measure import DensityField, bin_trajectory
from fplearn.pipeline import (LEVELS, BracketWarning, CalibrationConfig, box_density, calibrate, dominant_period,
                              evolve_uq, fit_time_scale, golden_section, log_search, marginal_quantiles,
                              orbit_mismatch)
from fplearn.train import TrainConfig
from fplearn.velocity import PiecewiseConstant, Polynomial, init, monomial_exponents, time_reversed


def test_golden_section_quadratic():
    x, fx, n = golden_section(lambda u: (u - 0.3) ** 2 + 1, -2, 5, tol=1e-8)
    assert x == pytest.approx(0.3, abs=1e-7)
    assert fx == pytest.approx(1.0)
    assert n < 60
    with pytest.raises(ValueError):
        golden_section(abs, 1, 1)


def test_log_search_interior_and_edge():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        x, fx, xs, fs = log_search(lambda u: math.log(u / 3.7) ** 2, 0.01, 100)
    assert x == pytest.approx(3.7, rel=1e-3)
    assert len(xs) == len(fs) == 9
    with pytest.warns(BracketWarning):
        x, *_ = log_search(lambda u: u, 0.01, 100)
    assert x == pytest.approx(0.01, rel=1e-2)


def test_log_search_threads_match_serial():
    f = lambda u: (math.log(u) - 1.0) ** 2  # noqa: E731
    assert log_search(f, 0.1, 10, workers=3)[0] == log_search(f, 0.1, 10)[0]


def test_dominant_period():
    t = np.arange(0, 100, 0.05)
    assert dominant_period(np.sin(2 * np.pi * t / 2.5) + 0.2 * np.sin(2 * np.pi * t / 0.7), 0.05) == \
        pytest.approx(2.5, rel=1e-9)
    with pytest.raises(ValueError):
        dominant_period(np.ones(10), 0.1)


def test_box_density():
    g = Grid.uniform(0, 1, 11, 2)
    rho = box_density(g, [0.5, 0.5], [0.1, 0.0])
    # x-cells [0.35,0.45) ... [0.55,0.65) touch [0.4, 0.6]; the y line 0.5 lies in one cell
    assert np.count_nonzero(rho.mass) == 3
    assert rho.total() == pytest.approx(1.0)
    with pytest.raises(EmptyMeasureError):
        box_density(g, [5.0, 5.0], [0.1, 0.1])
    with pytest.raises(ValueError):
        box_density(g, [0.5, 0.5], [-0.1, 0.1])


def test_marginal_quantiles_uniform():
    g = Grid.uniform(0, 1, 11, 1)
    m = np.zeros(11)
    m[3:7] = 0.25  # uniform on [0.25, 0.65)
    q = marginal_quantiles(DensityField(g, m))
    np.testing.assert_allclose(q, 0.25 + 0.4 * np.array(LEVELS), atol=1e-14)


def test_marginal_quantiles_monotone_with_gaps():
    g = Grid.uniform(0, 1, 11, 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random(g.size) * (rng.random(g.size) > 0.7)
        m[0] += 1e-3
        q = marginal_quantiles(DensityField(g, m / m.sum()), levels=np.linspace(0.01, 0.99, 30))
        assert np.all(np.diff(q) >= 0)


def test_evolve_horizon_zero():
    g = Grid.uniform(-1, 1, 21, 2)
    model = PiecewiseConstant(g, np.zeros(2 * g.size))
    res = evolve_uq(model, 0.1, ([0.0, 0.0], [0.2, 0.2]), 0)
    start = box_density(g, [0.0, 0.0], [0.2, 0.2])
    np.testing.assert_allclose(res.bands.quantiles[0], marginal_quantiles(start))
    assert len(res.frames) == 1 and res.bands.times[0] == 0


def test_evolve_diffusion_keeps_mean_and_spreads():
    g = Grid.uniform(-2, 2, 41, 2)
    model = PiecewiseConstant(g, np.zeros(2 * g.size))
    res = evolve_uq(model, 0.05, ([0.0, 0.0], [0.0, 0.0]), 200, record_every=50)
    np.testing.assert_allclose(res.bands.mean, 0, atol=1e-12)
    w = res.bands.width()
    assert np.all(np.diff(w) > 0)
    lo, hi = res.bands.band(0.25, 0.75)
    assert np.all(hi >= lo)
    with pytest.raises(ValueError):
        evolve_uq(model, 0.05, box_density(Grid.uniform(-2, 2, 21, 2), [0, 0], [0.1, 0.1]), 1)


def test_orbit_mismatch_time_rescaling():
    g = Grid.uniform(-4, 4, 17, 2)
    model = init("nn", g, {"hidden": 8}, seed=2)
    data = simulate(SdeSpec("vdp", 0.0), [2.0, 0.0], 0.01, 400, record_every=10).states
    base = orbit_mismatch(model, data, 0.1, 1.5, 30)
    assert orbit_mismatch(model, data, 0.05, 3.0, 30) == pytest.approx(base, rel=1e-12)


def vdp_polynomial(grid, c):
    exps = [tuple(e) for e in monomial_exponents(2, 3)]
    coefs = np.zeros((2, len(exps)))
    coefs[0, exps.index((0, 1))] = 1.0
    coefs[1, exps.index((0, 1))] = c
    coefs[1, exps.index((1, 0))] = -1.0
    coefs[1, exps.index((2, 1))] = -c
    return Polynomial(grid, 3, coefs)


@pytest.mark.parametrize("flip", [False, True])
def test_fit_time_scale_resolves_orientation(flip):
    D, h = 0.02, 0.05
    grid = Grid.uniform(-4, 4, 41, 2)
    truth = vdp_polynomial(grid, 0.5)
    pts = np.random.default_rng(0).uniform(-3, 3, (20, 2))
    np.testing.assert_allclose(truth.velocity(pts), builtin_drift("vdp", (0.5,), pts), atol=1e-12)
    data = simulate(SdeSpec.from_diffusion("vdp", D, (0.5,)), [2.0, 0.0], 0.005, 20_000, seed=4,
                    record_every=10).states
    start = time_reversed(truth, D) if flip else truth
    res = fit_time_scale(start, data, h, D)
    assert res.reversed == flip
    assert res.a == pytest.approx(1.0, rel=0.1)
    assert fit_time_scale(start, data, h, D, orient=False).reversed is False


@pytest.fixture(scope="module")
def vdp_data():
    tr = simulate(SdeSpec.from_diffusion("vdp", 0.05, (1.0,)), [2.0, 0.0], 0.002, 300_000, seed=1, record_every=10)
    return burn_in(tr.states)


def small_calibration(data, dt):
    cfg = CalibrationConfig(variant="nn", model_config={"hidden": 10},
                            train=TrainConfig(objective="kl", max_iter=60, stop_ratio=0.01))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BracketWarning)
        return calibrate(data, dt, Grid.uniform(-4, 4, 17, 2), Grid.uniform(-4, 4, 25, 2), 0.1, cfg)


def test_calibrate_diagnostics(vdp_data):
    res = small_calibration(vdp_data, 0.02)
    d = res.diagnostics
    assert d["step1"]["grid"] == (17, 17) and d["step2"]["grid"] == (25, 25)
    assert d["step2"]["final"] <= d["step2"]["initial"]
    assert res.a > 0 and res.D_tilde > 0
    assert res.diffusion == pytest.approx(res.a * res.D_tilde)
    assert res.model.grid == Grid.uniform(-4, 4, 25, 2)
    assert len(d["fit_log"]) == d["step1"]["iterations"] + 1


def test_calibrate_time_rescaling_doubles_a(vdp_data):
    a1 = small_calibration(vdp_data, 0.02)
    a2 = small_calibration(vdp_data, 0.01)
    assert a2.a == pytest.approx(2 * a1.a, rel=1e-2)
    assert a2.D_tilde == pytest.approx(a1.D_tilde, rel=1e-12)


def test_calibrate_closed_loop_recovery():
    """Synthetic Van der Pol data, assumed diffusion four times too large."""
    D_star, dt = 0.05, 0.02
    tr = simulate(SdeSpec.from_diffusion("vdp", D_star, (1.0,)), [2.0, 0.0], 0.002, 2_000_000, seed=1,
                  record_every=10)
    data = burn_in(tr.states)
    fine = Grid.uniform(-4, 4, 129, 2)
    cfg = CalibrationConfig(variant="nn", model_config={"hidden": 40},
                            train=TrainConfig(objective="kl", max_iter=1000))
    res = calibrate(data, dt, Grid.uniform(-4, 4, 33, 2), fine, 4 * D_star, cfg)
    support = bin_trajectory(data, fine).mass > 1e-4
    pts = fine.centers[support]
    truth = builtin_drift("vdp", (1.0,), pts)
    rel = np.linalg.norm(res.drift.velocity(pts) - truth) / np.linalg.norm(truth)
    print(f"a={res.a:.4f} D_tilde={res.D_tilde:.4f} aD/D*={res.diffusion / D_star:.3f} drift rel l2={rel:.3f}")
    assert 0.5 <= res.diffusion / D_star <= 2.0
    assert rel <= 0.25
