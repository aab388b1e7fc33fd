import numpy as np
import pytest

from fplearn.adjoint import Problem, evaluate_model
from fplearn.errors import DivergenceError
from fplearn.grid import Grid
from fplearn.measure import DensityField
from fplearn.train import Adam, GradientDescent, TrainConfig, fit
from fplearn.velocity import PiecewiseConstant, init


def target_from(model, D):
    return evaluate_model(model, Problem(DensityField.uniform(model.grid), D), gradient=False).rho


def test_adam_first_step_is_lr_sign():
    opt = Adam(lr=0.1)
    out = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(out, [-0.1, 0.1, 0.0], atol=1e-8)


def test_gradient_descent_step():
    out = GradientDescent(lr=0.5).step(np.ones(2), np.array([1.0, -2.0]))
    np.testing.assert_allclose(out, [0.5, 2.0])


@pytest.mark.parametrize("bad", [{"stop_ratio": 0.0}, {"stop_ratio": 1.5}, {"lr": 0.0}, {"optimizer": "lbfgs"},
                                 {"max_iter": -1}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_zero_iterations():
    g = Grid.uniform(-1, 1, 6, 2)
    m0 = init("nn", g, {"hidden": 3})
    res = fit(DensityField.uniform(g), m0, TrainConfig(max_iter=0, objective="l2"))
    assert res.model is m0
    assert len(res.log) == 1 and res.log[0]["iteration"] == 0
    assert set(res.log[0]) == {"iteration", "objective", "value", "grad_norm", "wall_time"}


def test_pc_self_consistency_and_trend():
    g = Grid.uniform(-1, 1, 8, 2)
    rng = np.random.default_rng(0)
    truth = PiecewiseConstant(g, 0.5 * rng.standard_normal(2 * g.size))
    D = 0.1
    target = target_from(truth, D)
    cfg = TrainConfig(objective="l2", lr=0.02, max_iter=1500, stop_ratio=1e-3, D=D)
    res = fit(target, init("pc", g, {"D": D}), cfg)
    assert res.reason == "stop_ratio"
    assert res.final_value <= 1e-3 * res.initial_value
    values = np.array([r["value"] for r in res.log])
    avg = np.convolve(values, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(avg) <= 1e-12 * values[0])


def test_checkpoint_and_callback():
    g = Grid.uniform(-1, 1, 6, 2)
    seen, rows = [], []
    cfg = TrainConfig(objective="kl", max_iter=6, checkpoint_every=2, stop_ratio=1e-9, D=0.1)
    fit(DensityField.uniform(g), init("nn", g, {"hidden": 3}), cfg,
        checkpoint=lambda it, m: seen.append(it), callback=rows.append)
    assert seen == [2, 4, 6]
    assert [r["iteration"] for r in rows] == list(range(7))


@pytest.mark.parametrize("failure", ["raise", "nan"])
def test_divergence_keeps_last_good_model(monkeypatch, failure):
    import fplearn.train as train
    from fplearn.errors import NumericalError

    g = Grid.uniform(-1, 1, 6, 2)
    m0 = init("nn", g, {"hidden": 3})
    real = train.evaluate_model
    calls = []

    def flaky(model, problem, **kw):
        calls.append(model)
        ev = real(model, problem, **kw)
        if len(calls) == 3:
            if failure == "raise":
                raise NumericalError("solver blew up")
            return type(ev)(float("nan"), ev.grad, ev.rho, ev.objective, ev.op, ev.state)
        return ev

    monkeypatch.setattr(train, "evaluate_model", flaky)
    with pytest.raises(DivergenceError) as info:
        fit(DensityField.uniform(g), m0, TrainConfig(objective="kl", max_iter=10, stop_ratio=1e-9, D=0.1))
    assert info.value.last_model is calls[1]
    assert [r["iteration"] for r in info.value.log] == [0, 1]
