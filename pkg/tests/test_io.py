import json

import numpy as np
import pytest

from fplearn import io
from fplearn.grid import Grid
from fplearn.measure import DensityField
from fplearn.pipeline import QuantileBands
from fplearn.velocity import init


@pytest.fixture
def rho(grid8, rng):
    m = rng.random(grid8.size)
    return DensityField(grid8, m / m.sum())


def test_csv_round_trip_keeps_floats_exact(tmp_path):
    rows = [[0, 0.1, 1 / 3], [1, -2.5e-17, np.pi]]
    io.write_csv(tmp_path / "t.csv", ["k", "a", "b"], rows, meta=[("note", "x")])
    meta, cols, back = io.read_csv(tmp_path / "t.csv")
    assert cols == ["k", "a", "b"]
    assert meta["format_version"] == "1" and meta["note"] == "x"
    np.testing.assert_array_equal(np.array(back, dtype=float), np.array(rows, dtype=float))


def test_csv_without_timestamp_is_deterministic(tmp_path):
    a = io.write_csv(tmp_path / "a.csv", ["x"], [[1.0]], timestamp=False).read_bytes()
    b = io.write_csv(tmp_path / "b.csv", ["x"], [[1.0]], timestamp=False).read_bytes()
    assert a == b and b"created" not in a
    assert b"created" in io.write_csv(tmp_path / "c.csv", ["x"], [[1.0]]).read_bytes()


def test_json_carries_format_version(tmp_path):
    io.write_json(tmp_path / "a.json", {"k": 1})
    data = json.loads((tmp_path / "a.json").read_text())
    assert data == {"format_version": io.FORMAT_VERSION, "k": 1}
    assert io.read_json(tmp_path / "a.json")["k"] == 1


@pytest.mark.parametrize("text", ["{not json", "[1, 2]", '{"format_version": 99}'])
def test_bad_json(tmp_path, text):
    (tmp_path / "bad.json").write_text(text)
    with pytest.raises(io.FormatError):
        io.read_json(tmp_path / "bad.json")


def test_csv_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("# format_version: 1\n")
    with pytest.raises(io.FormatError, match="no header"):
        io.read_csv(tmp_path / "empty.csv")
    (tmp_path / "v.csv").write_text("# format_version: 7\nx\n1\n")
    with pytest.raises(io.FormatError, match="format_version"):
        io.read_csv(tmp_path / "v.csv")
    (tmp_path / "r.csv").write_text("x0,x1\n1,2\n3\n")
    with pytest.raises(io.FormatError, match="ragged"):
        io.read_trajectory(tmp_path / "r.csv")


def test_trajectory_round_trip(tmp_path, rng):
    states = rng.standard_normal((20, 3))
    times = np.arange(20) * 0.1
    io.write_trajectory(tmp_path / "a.csv", states, times)
    t, s = io.read_trajectory(tmp_path / "a.csv")
    np.testing.assert_array_equal(t, times)
    np.testing.assert_array_equal(s, states)
    io.write_trajectory(tmp_path / "b.csv", states[:, 0])
    t, s = io.read_trajectory(tmp_path / "b.csv")
    assert t is None and s.shape == (20, 1)


def test_trajectory_time_column_by_name(tmp_path):
    (tmp_path / "a.csv").write_text("time,u\n0,1\n1,2\n")
    t, s = io.read_trajectory(tmp_path / "a.csv")
    np.testing.assert_array_equal(t, [0, 1])
    t, s = io.read_trajectory(tmp_path / "a.csv", time_column=False)
    assert t is None and s.shape == (2, 2)


@pytest.mark.parametrize("suffix", [".json", ".csv"])
def test_density_round_trip(tmp_path, rho, suffix):
    path = io.write_density(tmp_path / f"d{suffix}", rho)
    back = io.read_density(path)
    assert back.grid == rho.grid
    np.testing.assert_array_equal(back.mass, rho.mass)


def test_density_errors(tmp_path):
    (tmp_path / "d.csv").write_text("mass\n1\n")
    with pytest.raises(io.FormatError, match="grid"):
        io.read_density(tmp_path / "d.csv")
    (tmp_path / "d.json").write_text('{"mass": [1]}')
    with pytest.raises(io.FormatError, match="malformed"):
        io.read_density(tmp_path / "d.json")


@pytest.mark.parametrize("variant", ["pc", "poly", "nn"])
def test_model_round_trip(tmp_path, grid8, rng, variant):
    model = init(variant, grid8, {"D": 0.1, "hidden": 4}, seed=3)
    model = model.with_theta(model.theta + rng.standard_normal(model.n_params))
    io.write_model(tmp_path / "m.json", model, {"D": 0.1})
    back = io.read_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.theta, model.theta)
    pts = rng.uniform(-0.9, 0.9, (10, 2))
    np.testing.assert_array_equal(back.velocity(pts), model.velocity(pts))


def test_malformed_model(tmp_path):
    io.write_json(tmp_path / "m.json", {"variant": "nn"})
    with pytest.raises(io.FormatError, match="malformed model"):
        io.read_model(tmp_path / "m.json")


def test_loss_table_zeroes_wall_time_without_timestamp(tmp_path):
    rows = [{"iteration": 0, "objective": "kl", "value": 1.5, "grad_norm": 2.0, "wall_time": 0.37}]
    io.write_loss(tmp_path / "l.csv", rows, timestamp=False)
    _, cols, back = io.read_csv(tmp_path / "l.csv")
    assert cols == ["iteration", "objective", "value", "grad_norm", "wall_time"]
    assert back == [["0", "kl", "1.5", "2.0", "0.0"]]


def test_bands_and_frames(tmp_path, rho):
    times = np.array([0.0, 0.5])
    bands = QuantileBands(times=times, levels=(0.05, 0.5, 0.95), quantiles=np.array([[-1, 0, 1], [-2, 0, 2.0]]),
                  mean=np.array([0.0, 0.1]))
    io.write_bands(tmp_path / "b.csv", bands)
    _, cols, rows = io.read_csv(tmp_path / "b.csv")
    assert cols == ["time", "q05", "q50", "q95", "mean"]
    assert np.array(rows, dtype=float).shape == (2, 5)
    io.write_frames(tmp_path / "f.csv", [rho, rho], times)
    meta, cols, rows = io.read_csv(tmp_path / "f.csv")
    assert Grid.from_dict(json.loads(meta["grid"])) == rho.grid
    np.testing.assert_array_equal(np.array(rows[1][2:], dtype=float), rho.mass)
