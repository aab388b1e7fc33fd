"""Command-line entry point: ``fplearn <command> [flags]``.

Every command writes into ``--out-dir`` and echoes its effective settings to
``config.json`` there.  ``--config FILE`` supplies defaults for any flag
(keys are the flag names with dashes replaced by underscores).  Exit status
is 0 on success, 2 for usage or file errors and 1 for numerical failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .adjoint import Problem, gradcheck
from .dynamics import BUILTINS, SdeSpec, burn_in, delay_embed, simulate
from .errors import FPLearnError
from .grid import Grid
from .measure import DensityField, bin_trajectory, gaussian_smooth
from .objective import w2_exact
from .pipeline import CalibrationConfig, calibrate, evolve_uq
from .train import TrainConfig, fit
from .velocity import VARIANTS, init

log = logging.getLogger("fplearn")


class UsageError(Exception):
    pass


# -- argument helpers -------------------------------------------------------------------

def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _counts(text):
    try:
        return [int(x) for x in str(text).lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected counts like 50x50, got {text!r}")


def make_grid(counts, bounds) -> Grid:
    """``bounds`` is ``"lo,hi"`` (all axes) or ``"lo,hi;lo,hi;..."``."""
    parts = [p for p in str(bounds).split(";") if p.strip()]
    pairs = [tuple(_floats(p)) for p in parts]
    if any(len(p) != 2 for p in pairs):
        raise UsageError(f"bounds must be lo,hi pairs, got {bounds!r}")
    if len(pairs) == 1:
        pairs = pairs * len(counts)
    if len(pairs) != len(counts):
        raise UsageError(f"{len(counts)} counts but {len(pairs)} bound pairs")
    try:
        return Grid(tuple(pairs), tuple(counts))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _add_common(p):
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="directory for all outputs")
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit wall-clock content so reruns are byte-identical")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train(p):
    p.add_argument("--variant", choices=VARIANTS, default="nn")
    p.add_argument("--objective", choices=("l2", "kl", "js", "w2"), default="kl")
    p.add_argument("--optimizer", choices=("adam", "gd"), default="adam")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--stop-ratio", type=float, default=0.005)
    p.add_argument("--eps", type=float, default=None, help="teleportation weight")
    p.add_argument("--hidden", type=int, default=100)
    p.add_argument("--activation", choices=("tanh", "sigmoid"), default="tanh")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--coarsen", type=int, default=2, help="W2 pooling factor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fplearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Euler-Maruyama path of a benchmark system")
    p.add_argument("--system", choices=sorted(BUILTINS), required=True)
    p.add_argument("--c", type=_floats, default=None, help="system parameters, comma-separated")
    p.add_argument("--D", type=float, default=0.0, help="diffusion; sigma = sqrt(2 D)")
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--x0", type=_floats, default=None)
    _add_common(p)

    p = sub.add_parser("embed", help="time-delay embedding of one column")
    p.add_argument("--input", required=True)
    p.add_argument("--column", type=int, default=0, help="state column to embed")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--lag", type=int, default=None, help="delay in samples")
    p.add_argument("--tau", type=float, default=None, help="delay in time units (needs --h)")
    p.add_argument("--h", type=float, default=None, help="sample step in time units")
    _add_common(p)

    p = sub.add_parser("bin", help="occupation measure of a trajectory")
    p.add_argument("--input", required=True)
    p.add_argument("--grid", type=_counts, required=True, help="cell counts, e.g. 50x50")
    p.add_argument("--bounds", default="-4,4", help="lo,hi or lo,hi;lo,hi per axis")
    p.add_argument("--sigma-cells", type=float, default=0.0)
    p.add_argument("--burn-in", type=float, default=0.1)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _add_common(p)

    p = sub.add_parser("fit", help="learn a velocity field from a density")
    p.add_argument("--density", required=True)
    p.add_argument("--D", type=float, required=True)
    p.add_argument("--init-model", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("rollout", help="simulate a learned model")
    p.add_argument("--model", required=True)
    p.add_argument("--D", type=float, default=0.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--x0", type=_floats, default=None)
    p.add_argument("--burn-in", type=float, default=0.1)
    p.add_argument("--target", default=None, help="density to compare the rollout measure against (W2)")
    p.add_argument("--coarsen", type=int, default=1, help="pooling factor for the exact W2")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="adjoint gradient against finite differences")
    p.add_argument("--grid", type=_counts, default=[8, 8])
    p.add_argument("--bounds", default="-2,2")
    p.add_argument("--D", type=float, default=0.2)
    p.add_argument("--tol", type=float, default=None, help="default 1e-4, or 1e-2 for w2")
    p.add_argument("--max-coords", type=int, default=None)
    _add_train(p)
    p.set_defaults(hidden=5)
    _add_common(p)

    p = sub.add_parser("calibrate", help="three-step calibration against a trajectory")
    p.add_argument("--input", required=True)
    p.add_argument("--dt", type=float, default=None, help="sample step if the file has no time column")
    p.add_argument("--coarse", type=_counts, required=True)
    p.add_argument("--fine", type=_counts, required=True)
    p.add_argument("--bounds", default="-4,4")
    p.add_argument("--D", type=float, required=True, help="assumed diffusion for step 1")
    p.add_argument("--sigma-cells", type=float, default=1.0)
    p.add_argument("--window", type=float, default=None)
    p.add_argument("--a-bracket", type=_floats, default=[0.01, 100.0],
                   help="search range for the time scale, as multiples of the observed/model speed ratio")
    p.add_argument("--no-orient", action="store_true",
                   help="skip the time-reversed drift when fitting the time scale")
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("evolve", help="density evolution and quantile bands")
    p.add_argument("--model", required=True)
    p.add_argument("--D", type=float, required=True)
    p.add_argument("--initial", default=None, help="density file")
    p.add_argument("--center", type=_floats, default=None, help="box centre")
    p.add_argument("--half-width", type=_floats, default=None, help="box half-widths")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--record-every", type=int, default=10)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--frames", action="store_true", help="also write every recorded density")
    _add_common(p)
    return parser


# flags whose values may start with a minus sign, e.g. ``--bounds -4,4``
SIGNED_FLAGS = ("--bounds", "--c", "--x0", "--center", "--a-bracket")


def _join_signed(argv):
    out, it = [], iter(argv)
    for tok in it:
        if tok in SIGNED_FLAGS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def _parse(parser, argv):
    argv = _join_signed(sys.argv[1:] if argv is None else list(argv))
    args = parser.parse_args(argv)
    if args.config:
        path = _existing(args.config)
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        cfg.pop("command", None)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"{path}: unknown keys {unknown}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _echo(args, out_dir: Path):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _train_config(args) -> TrainConfig:
    opts = {"coarsen": args.coarsen} if args.objective == "w2" else {}
    return TrainConfig(objective=args.objective, optimizer=args.optimizer, lr=args.lr, max_iter=args.max_iter,
                       stop_ratio=args.stop_ratio, eps=args.eps, D=args.D, objective_options=opts,
                       checkpoint_every=getattr(args, "checkpoint_every", 0), seed=args.seed)


def _model_config(args) -> dict:
    return {"D": args.D, "hidden": args.hidden, "activation": args.activation, "degree": args.degree}


# -- commands ---------------------------------------------------------------------------

def cmd_simulate(args, out: Path):
    spec = SdeSpec.from_diffusion(args.system, args.D, args.c)
    x0 = np.asarray(args.x0 if args.x0 else [1.0] * spec.dim)
    traj = simulate(spec, x0, args.dt, args.steps, seed=args.seed, record_every=args.record_every)
    io.write_trajectory(out / "trajectory.csv", traj.states, traj.times, not args.no_timestamp)
    print(f"wrote {len(traj.times)} states to {out / 'trajectory.csv'}")


def cmd_embed(args, out: Path):
    times, states = io.read_trajectory(_existing(args.input))
    if not 0 <= args.column < states.shape[1]:
        raise UsageError(f"column {args.column} out of range for {states.shape[1]} columns")
    if args.lag is not None:
        lag = args.lag
    elif args.tau is not None and args.h is not None:
        lag = int(round(args.tau / args.h))
        if lag < 1 or abs(lag * args.h - args.tau) > 1e-9 * max(1.0, args.tau):
            raise UsageError(f"tau / h = {args.tau / args.h} is not a positive integer")
    else:
        lag = 1
    emb = delay_embed(states[:, args.column], args.dim, lag)
    t = None if times is None else times[(args.dim - 1) * lag:]
    io.write_trajectory(out / "embedding.csv", emb, t, not args.no_timestamp)
    print(f"wrote {len(emb)} delay vectors to {out / 'embedding.csv'}")


def cmd_bin(args, out: Path):
    _, states = io.read_trajectory(_existing(args.input))
    grid = make_grid(args.grid, args.bounds)
    if states.shape[1] != grid.dim:
        raise UsageError(f"trajectory has {states.shape[1]} columns, grid is {grid.dim}-D")
    rho, dropped = bin_trajectory(burn_in(states, args.burn_in), grid, return_discarded=True)
    if args.sigma_cells > 0:
        rho = gaussian_smooth(rho, args.sigma_cells)
    path = out / f"density.{args.format}"
    io.write_density(path, rho, not args.no_timestamp)
    print(f"wrote {path} ({dropped} samples outside the grid)")


def cmd_fit(args, out: Path):
    target = io.read_density(_existing(args.density))
    if args.init_model:
        model0 = io.read_model(_existing(args.init_model))
        if model0.grid != target.grid:
            raise UsageError("initial model and density are on different grids")
    else:
        model0 = init(args.variant, target.grid, _model_config(args), seed=args.seed)
    ckpt_dir = out / "checkpoints"

    def checkpoint(it, model):
        io.write_model(ckpt_dir / f"model_{it:06d}.json", model)

    try:
        res = fit(target, model0, _train_config(args), checkpoint=checkpoint)
    except FPLearnError as exc:
        if getattr(exc, "last_model", None) is not None:
            io.write_model(out / "model_last_good.json", exc.last_model)
            io.write_loss(out / "loss.csv", exc.log or [], not args.no_timestamp)
        raise
    io.write_model(out / "model.json", res.model, {"D": args.D})
    io.write_loss(out / "loss.csv", res.log, not args.no_timestamp)
    print(f"objective {res.initial_value:.6g} -> {res.final_value:.6g} "
          f"({100 * res.final_value / res.initial_value:.3g}% of initial) after {len(res.log) - 1} steps; "
          f"stopped on {res.reason}")


def cmd_rollout(args, out: Path):
    model = io.read_model(_existing(args.model))
    spec = SdeSpec.from_diffusion(model, args.D)
    x0 = np.asarray(args.x0) if args.x0 else model.grid.centers[model.grid.size // 2] + 0.5 * model.grid.spacing
    traj = simulate(spec, x0, args.dt, args.steps, seed=args.seed, record_every=args.record_every)
    io.write_trajectory(out / "trajectory.csv", traj.states, traj.times, not args.no_timestamp)
    rho = bin_trajectory(burn_in(traj.states, args.burn_in), model.grid)
    io.write_density(out / "density.json", rho, not args.no_timestamp)
    msg = f"wrote {len(traj.times)} states; {traj.excursions} path-steps outside the model box"
    if args.target:
        target = io.read_density(_existing(args.target))
        msg += f"; W2^2 to target {w2_exact(rho, target, args.coarsen):.6g}"
    print(msg)


def _random_target(grid: Grid, rng) -> DensityField:
    m = np.where(grid.interior, rng.random(grid.size) + 0.2, 0.0)
    m = np.where(grid.interior, gaussian_smooth(DensityField(grid, m / m.sum()), 1.0).mass, 0.0)
    return DensityField(grid, m / m.sum())


def cmd_gradcheck(args, out: Path):
    grid = make_grid(args.grid, args.bounds)
    rng = np.random.Generator(np.random.Philox(args.seed))
    target = _random_target(grid, rng)
    model = init(args.variant, grid, _model_config(args), seed=args.seed)
    model = model.with_theta(model.theta + 0.3 * rng.standard_normal(model.n_params))
    opts = {"coarsen": args.coarsen} if args.objective == "w2" else {}
    problem = Problem(target, args.D, args.objective, args.eps, objective_options=opts)
    coords = None
    limit = args.max_coords if args.max_coords is not None else (16 if args.objective == "w2" else None)
    if limit is not None and limit < model.n_params:
        coords = np.sort(rng.choice(model.n_params, limit, replace=False))
    res = gradcheck(model, problem, coords)
    tol = args.tol if args.tol is not None else (1e-2 if args.objective == "w2" else 1e-4)
    io.write_json(out / "gradcheck.json", {"variant": args.variant, "objective": args.objective,
                                           "max_relative_error": res.rel_error, "tolerance": tol,
                                           "coords": res.coords.tolist()})
    print(f"max relative error: {res.rel_error:.3e} (tolerance {tol:g})")
    return 0 if res.rel_error <= tol else 1


def cmd_calibrate(args, out: Path):
    times, states = io.read_trajectory(_existing(args.input))
    if times is not None and len(times) > 1:
        dt = float(np.median(np.diff(times)))
    elif args.dt is not None:
        dt = args.dt
    else:
        raise UsageError("trajectory has no time column; pass --dt")
    coarse = make_grid(args.coarse, args.bounds)
    fine = make_grid(args.fine, args.bounds)
    if len(args.a_bracket) != 2:
        raise UsageError("--a-bracket takes lo,hi")
    cfg = CalibrationConfig(variant=args.variant, model_config=_model_config(args), train=_train_config(args),
                            sigma_cells=args.sigma_cells, a_bracket=tuple(args.a_bracket), window=args.window,
                            orient=not args.no_orient, seed=args.seed)
    res = calibrate(states, dt, coarse, fine, args.D, cfg)
    io.write_model(out / "model.json", res.drift, {"D": res.diffusion})
    diag = {k: v for k, v in res.diagnostics.items() if k != "fit_log"}
    io.write_json(out / "calibration.json", {"D_tilde": res.D_tilde, "a": res.a, "drift_scale": res.a,
                                             "diffusion": res.diffusion, "diagnostics": diag})
    io.write_loss(out / "loss.csv", res.diagnostics["fit_log"], not args.no_timestamp)
    flip = " (time-reversed drift)" if res.diagnostics["step3"]["reversed"] else ""
    print(f"D_tilde = {res.D_tilde:.6g}, a = {res.a:.6g}, final diffusion = {res.diffusion:.6g}{flip}")


def cmd_evolve(args, out: Path):
    model = io.read_model(_existing(args.model))
    if args.initial:
        initial = io.read_density(_existing(args.initial))
    elif args.center is not None:
        hw = args.half_width if args.half_width is not None else [0.0]
        initial = (np.asarray(args.center), np.asarray(hw if len(hw) > 1 else hw * len(args.center)))
    else:
        raise UsageError("give --initial or --center/--half-width")
    res = evolve_uq(model, args.D, initial, args.steps, args.record_every, dt=args.dt, axis=args.axis)
    ts = not args.no_timestamp
    io.write_bands(out / "bands.csv", res.bands, ts)
    if args.frames:
        io.write_frames(out / "frames.csv", res.frames, res.bands.times, ts)
    print(f"wrote {len(res.frames)} frames (dt = {res.dt:.6g})")


COMMANDS = {
    "simulate": cmd_simulate, "embed": cmd_embed, "bin": cmd_bin, "fit": cmd_fit, "rollout": cmd_rollout,
    "gradcheck": cmd_gradcheck, "calibrate": cmd_calibrate, "evolve": cmd_evolve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = Path(args.out_dir)
        _echo(args, out)
        status = COMMANDS[args.command](args, out)
        return int(status or 0)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fplearn: error: {exc}", file=sys.stderr)
        return 2
    except FPLearnError as exc:
        print(f"fplearn: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (io.FormatError, ValueError, OSError) as exc:
        print(f"fplearn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
