"""Readers and writers for the on-disk formats.

Every file carries ``format_version``: JSON files as a key, CSV files as a
``# format_version: 1`` comment line.  CSV files may also start with a
``# created: <ISO time>`` line, which is the only non-deterministic content.
"""
from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .grid import Grid
from .measure import DensityField
from .velocity import VelocityModel, from_dict

FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file exists but does not match the expected layout."""


def _header_lines(timestamp: bool, extra=()) -> list:
    lines = []
    if timestamp:
        lines.append(f"# created: {datetime.now(timezone.utc).isoformat(timespec='seconds')}")
    lines.append(f"# format_version: {FORMAT_VERSION}")
    lines.extend(f"# {k}: {v}" for k, v in extra)
    return lines


def write_csv(path, columns, rows, timestamp: bool = True, meta=()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in _header_lines(timestamp, meta):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return path


def read_csv(path):
    """Return ``(meta, columns, rows)``; ``meta`` holds the ``# key: value`` comments."""
    path = Path(path)
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    if not body:
        raise FormatError(f"{path}: no header row")
    reader = csv.reader(body)
    columns = next(reader)
    rows = [r for r in reader]
    version = meta.get("format_version")
    if version is not None and int(version) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {version}")
    return meta, columns, rows


def write_json(path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": FORMAT_VERSION, **data}
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {version}")
    return data


# -- trajectories ---------------------------------------------------------------------

def write_trajectory(path, states, times=None, timestamp: bool = True) -> Path:
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    cols = [f"x{i}" for i in range(states.shape[1])]
    if times is None:
        return write_csv(path, cols, states.tolist(), timestamp)
    rows = np.column_stack([np.asarray(times, dtype=float), states]).tolist()
    return write_csv(path, ["t"] + cols, rows, timestamp)


def read_trajectory(path, time_column: bool | None = None):
    """Return ``(times or None, states)``.

    With ``time_column=None`` a first column named ``t`` or ``time`` is taken
    as time.
    """
    _, columns, rows = read_csv(path)
    try:
        arr = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric or ragged rows") from exc
    if time_column is None:
        time_column = columns[0].strip().lower() in ("t", "time")
    if time_column:
        return arr[:, 0], arr[:, 1:]
    return None, arr


# -- densities -------------------------------------------------------------------------

def write_density(path, rho: DensityField, timestamp: bool = True) -> Path:
    path = Path(path)
    if path.suffix == ".csv":
        meta = [("grid", json.dumps(rho.grid.to_dict()))]
        return write_csv(path, ["mass"], [[float(m)] for m in rho.mass], timestamp, meta)
    return write_json(path, {"grid": rho.grid.to_dict(), "mass": rho.mass.tolist()})


def read_density(path) -> DensityField:
    path = Path(path)
    try:
        if path.suffix == ".csv":
            meta, _, rows = read_csv(path)
            if "grid" not in meta:
                raise FormatError(f"{path}: missing '# grid:' header")
            grid = Grid.from_dict(json.loads(meta["grid"]))
            mass = np.array([float(r[0]) for r in rows])
        else:
            data = read_json(path)
            grid = Grid.from_dict(data["grid"])
            mass = np.asarray(data["mass"], dtype=float)
        return DensityField(grid, mass)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed density ({exc})") from exc


# -- models ---------------------------------------------------------------------------

def write_model(path, model: VelocityModel, extra: dict | None = None) -> Path:
    data = model.to_dict()
    if extra:
        data.update(extra)
    return write_json(path, data)


def read_model(path) -> VelocityModel:
    data = read_json(path)
    try:
        return from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model ({exc})") from exc


# -- tables ---------------------------------------------------------------------------

def write_loss(path, rows, timestamp: bool = True) -> Path:
    cols = ["iteration", "objective", "value", "grad_norm", "wall_time"]
    out = [[r["iteration"], r["objective"], float(r["value"]), float(r["grad_norm"]),
            float(r["wall_time"]) if timestamp else 0.0] for r in rows]
    return write_csv(path, cols, out, timestamp)


def write_bands(path, bands, timestamp: bool = True) -> Path:
    cols = ["time"] + [f"q{round(100 * q):02d}" for q in bands.levels] + ["mean"]
    rows = np.column_stack([bands.times, bands.quantiles, bands.mean]).tolist()
    return write_csv(path, cols, rows, timestamp)


def write_frames(path, frames, times, timestamp: bool = True) -> Path:
    n = frames[0].grid.size
    cols = ["frame", "time"] + [f"m{j}" for j in range(n)]
    rows = [[k, float(t)] + f.mass.tolist() for k, (f, t) in enumerate(zip(frames, times))]
    meta = [("grid", json.dumps(frames[0].grid.to_dict()))]
    return write_csv(path, cols, rows, timestamp, meta)
