"""Command-line entry points: simulate, calibrate, fd, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical failure (``gradcheck`` also returns 1 when the check fails).
Every command that writes files writes ``manifest.json`` first; passing that
manifest back as ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import calibrate
from .config import (
    ConfigError,
    calibration_config,
    load_config,
    model_params,
    scenario_from_config,
    scenario_to_dict,
)
from .data_io import (
    ArchiveFormatError,
    ArchiveTrajectory,
    direction_groups,
    estimate_mean_velocity,
    export_csv,
    export_trajectory,
    parse_archive,
    read_trajectory,
    resample,
)
from .density import cells_to_json, fundamental_diagram
from .gradcheck import MAX_AGENTS, run_gradcheck
from .model import ControlVector
from .simulator import Rect, Trajectory, init_scenario, integrate, lane_count, n_steps_for, seed_streams

logger = logging.getLogger("anisocrowd")

GRADCHECK_TOLERANCE = 1e-4
TRAJECTORY_HEADER = ["t", "agent", "x", "y", "vx", "vy"]


class UsageError(Exception):
    """Bad command-line input; maps to exit status 1."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")
    return path


class Manifest:
    """Run record written before any output and completed at the end."""

    def __init__(self, out: Path, command: str, argv, config: dict, seed: int, inputs: dict | None = None):
        self.path = out / "manifest.json"
        self.payload = {
            "manifest_version": 1,
            "command": command,
            "argv": list(argv),
            "package_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": seed,
            "seed_derivation": "numpy SeedSequence(seed).spawn(2): [0] initial positions, [1] batch sampling",
            "config": config,
            "inputs": inputs or {},
            "output_dir": str(out),
            "started": _now(),
        }
        _write_json(self.path, self.payload)

    def finish(self, outputs: list[Path], **extra):
        self.payload["outputs"] = [p.name for p in outputs]
        self.payload["finished"] = _now()
        self.payload.update(extra)
        _write_json(self.path, self.payload)


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load(args, command: str) -> tuple[dict, dict]:
    """Config dict (unwrapping manifests) and recorded inputs of a previous run."""
    if args.config is None:
        return {}, {}
    cfg = load_config(args.config)
    if "manifest_version" in cfg:
        if cfg.get("command") != command:
            raise ConfigError(f"{args.config} is a manifest of '{cfg.get('command')}', not '{command}'")
        inputs = dict(cfg.get("inputs") or {})
        body = dict(cfg.get("config") or {})
        body.setdefault("seed", cfg.get("seed", 0))
        return body, inputs
    return cfg, {}


def _seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    try:
        return int(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer, got {seed!r}") from exc


def _floats(cfg: dict, key: str, default):
    value = cfg.get(key, default)
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be a number, got {value!r}") from exc


# ---------------------------------------------------------------------------
# simulate


def lane_summary(traj: Trajectory, scenario, gap: float) -> dict:
    """Lane count per group from the coordinate transverse to its desired direction."""
    out = {}
    X = traj.positions[-1]
    for gi, g in enumerate(scenario.groups):
        axis = 1 if abs(g.desired[0]) >= abs(g.desired[1]) else 0
        out[g.color or f"group{gi}"] = lane_count(X[traj.groups == gi, axis], gap)
    return out


def cmd_simulate(args) -> int:
    cfg, _ = _load(args, "simulate")
    if not cfg:
        raise UsageError("simulate needs --config")
    seed = _seed(args, cfg)
    scenario = scenario_from_config(cfg, seed=seed)
    params = model_params(cfg, d=scenario.d)
    T, dt = _floats(cfg, "T", 35.0), _floats(cfg, "dt", 0.00625)
    kick_sign = _floats(cfg, "kick_sign", -1.0)
    try:
        n_steps_for(T, dt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args.out)
    resolved = dict(cfg, seed=seed, T=T, dt=dt, kick_sign=kick_sign,
                    params=vars(params).copy(), scenario=scenario_to_dict(scenario))
    manifest = Manifest(out, "simulate", args.argv, resolved, seed)

    init_rng, _ = seed_streams(seed)
    X0, V0 = init_scenario(scenario, init_rng)
    traj = integrate(X0, V0, scenario.desired_velocities(), params, T, dt, scenario=scenario, kick_sign=kick_sign)
    gap = 0.5 * scenario.d
    summary = {
        "final_time": float(traj.times[-1]),
        "n_agents": traj.n_agents,
        "n_frames": len(traj.times),
        "lane_gap": gap,
        "lane_count": lane_summary(traj, scenario, gap),
    }
    outputs = [export_trajectory(traj, out / "trajectory.csv"), _write_json(out / "summary.json", summary)]
    manifest.finish(outputs)
    print(f"simulated {traj.n_agents} agents to t={summary['final_time']:g} "
          f"({summary['n_frames']} frames); lanes {summary['lane_count']}")
    return 0


# ---------------------------------------------------------------------------
# calibrate


def _csv_as_archive(traj: Trajectory) -> ArchiveTrajectory:
    """Wrap a trajectory CSV as per-agent tracks on integer frames."""
    if traj.n_steps < 1:
        raise ConfigError("trajectory file needs at least two frames")
    dt = traj.dt
    frames = np.rint(traj.times / dt).astype(int)
    if np.max(np.abs(frames * dt - traj.times)) > 1e-9 * max(1.0, abs(traj.times[-1])):
        raise ConfigError("trajectory times are not multiples of their step")
    arch = ArchiveTrajectory(frame_rate=1.0 / dt, unit_scale=1.0)
    for i in range(traj.n_agents):
        arch.frames[i] = frames.copy()
        arch.positions[i] = traj.positions[:, i, :].copy()
    return arch


def _parse_column_map(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        values = text
    else:
        values = str(text).replace(" ", "").split(",")
    try:
        cols = tuple(int(v) for v in values)
    except ValueError as exc:
        raise UsageError(f"--column-map expects comma-separated integers, got {text!r}") from exc
    if len(cols) != 4 or min(cols) < 0:
        raise UsageError(f"--column-map needs four non-negative columns (id,frame,x,y), got {text!r}")
    return cols


def _is_trajectory_csv(path: Path) -> bool:
    with path.open() as fh:
        return fh.readline().strip().split(",") == TRAJECTORY_HEADER


def _data_settings(args, cfg: dict, inputs: dict) -> dict:
    """Data options: command-line flags over manifest inputs over the config's ``data`` block."""
    block = dict(cfg.get("data") or {})
    block.update({k: v for k, v in inputs.items() if k != "data"})
    settings = {
        "path": args.data or inputs.get("data") or block.get("path"),
        "column_map": _parse_column_map(args.column_map or block.get("column_map", (0, 1, 2, 3))),
        "unit_scale": args.unit_scale if args.unit_scale is not None else block.get("unit_scale", 0.01),
        "frame_rate": args.frame_rate if args.frame_rate is not None else block.get("frame_rate", 16.0),
        "t0": args.t0 if args.t0 is not None else block.get("t0", cfg.get("t0", 0.0)),
        "window": args.window if args.window is not None else block.get("window", cfg.get("T", 8.0)),
        "agents": block.get("agents"),
    }
    if settings["path"] is None:
        raise UsageError("calibrate needs --data")
    for key in ("unit_scale", "frame_rate", "t0", "window"):
        settings[key] = float(settings[key])
    if settings["window"] <= 0:
        raise UsageError("--window must be positive")
    return settings


def _desired_velocities(cfg: dict, arch: ArchiveTrajectory, kept: list[int], window, csv_traj: Trajectory | None):
    """Per-agent desired velocities for the retained agents."""
    desired = cfg.get("desired")
    if csv_traj is not None and desired is None:
        t0 = window[0]
        return np.array([[np.interp(t0, csv_traj.times, csv_traj.velocities[:, i, c]) for c in range(2)]
                         for i in kept])
    labels = direction_groups(arch, window)
    if desired is None:
        means = estimate_mean_velocity(arch, window, {i: labels[i] for i in kept if i in labels})
    else:
        means = {str(k): np.asarray(v, dtype=float) for k, v in desired.items()}
    try:
        return np.array([means[labels[i]] for i in kept])
    except KeyError as exc:
        raise ConfigError(f"no desired velocity for direction group {exc}") from exc


def cmd_calibrate(args) -> int:
    cfg, inputs = _load(args, "calibrate")
    data_opts = _data_settings(args, cfg, inputs)
    seed = _seed(args, cfg)
    path = Path(data_opts["path"])
    if not path.is_file():
        raise UsageError(f"data file not found: {path}")
    dt = _floats(cfg, "dt", 0.00625)
    t0, T = data_opts["t0"], data_opts["window"]
    try:
        n_steps_for(T, dt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ccfg = calibration_config(cfg, seed=seed)
    u0 = ControlVector.from_array(cfg.get("u0", (0.0, 0.0, 40.0)))
    base = model_params(cfg, lam=u0.lam, A=u0.A, R=u0.R)

    csv_traj = None
    if _is_trajectory_csv(path):
        csv_traj = read_trajectory(path)
        arch = _csv_as_archive(csv_traj)
    else:
        arch = parse_archive(path, data_opts["column_map"], data_opts["frame_rate"], data_opts["unit_scale"])
    try:
        sampled = resample(arch, t0, T, dt, data_opts["agents"])
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    W = _desired_velocities(cfg, arch, sampled.agent_ids, (t0, t0 + T), csv_traj)

    out = _out_dir(args.out)
    resolved = dict(cfg, seed=seed, dt=dt, u0=list(u0), params=vars(base).copy(),
                    calibration={**{k: getattr(ccfg, k) for k in ("sigma1", "sigma2", "epsilon_rel", "m",
                                                                  "batch_length", "max_iters", "adjoint")},
                                 "u_ref": list(ccfg.u_ref), "beta": list(ccfg.beta), "box": vars(ccfg.box).copy()})
    recorded = {"data": str(path), **{k: v for k, v in data_opts.items() if k != "path"}}
    manifest = Manifest(out, "calibrate", args.argv, resolved, seed, recorded)

    _, batch_rng = seed_streams(seed)
    result = calibrate(sampled.trajectory, u0, base, ccfg, W=W, rng=batch_rng)
    rows = [(k, float(u.lam), float(u.A), float(u.R), float(J)) for k, (u, J) in enumerate(result.history)]
    history = export_csv(rows, out / "history.csv", ["iteration", "lam", "A", "R", "J"])
    final = {
        "lam": result.u.lam,
        "A": result.u.A,
        "R": result.u.R,
        "initial_cost": rows[0][-1],
        "final_cost": rows[-1][-1],
        "iterations": len(rows) - 1,
        "converged": result.converged,
        "n_agents": len(sampled.agent_ids),
        "agent_ids": sampled.agent_ids,
        "dropped_agents": sampled.dropped,
    }
    manifest.finish([history, _write_json(out / "params.json", final)])
    print(f"calibrated on {final['n_agents']} agents: lam={result.u.lam:.6g} A={result.u.A:.6g} "
          f"R={result.u.R:.6g}; cost {final['initial_cost']:.6g} -> {final['final_cost']:.6g} "
          f"in {final['iterations']} iterations")
    return 0


# ---------------------------------------------------------------------------
# fd


def _region(args, cfg: dict) -> Rect:
    raw = args.region if args.region is not None else (cfg.get("fd") or {}).get("region")
    if raw is None:
        raise UsageError("fd needs a region (--region or fd.region in the config)")
    try:
        return Rect.coerce(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid region {raw!r}: {exc}") from exc


def cmd_fd(args) -> int:
    cfg, inputs = _load(args, "fd")
    data_path = args.data or inputs.get("data")
    if not cfg and data_path is None:
        raise UsageError("fd needs --config (scenario) or --data (trajectory CSV)")
    seed = _seed(args, cfg)
    region = _region(args, cfg)
    fd_cfg = dict(cfg.get("fd") or {})
    every = float(fd_cfg.get("sample_every", 0.5))
    if every <= 0:
        raise ConfigError("fd.sample_every must be positive")

    scenario = None
    if data_path is None:
        scenario = scenario_from_config(cfg, seed=seed)
        params = model_params(cfg, d=scenario.d)
        T, dt = _floats(cfg, "T", 20.0), _floats(cfg, "dt", 0.00625)
        try:
            n_steps_for(T, dt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not region.inside(scenario.domain):
            raise UsageError(f"region {region.as_tuple()} is outside the domain {scenario.domain.as_tuple()}")
    else:
        data_path = Path(data_path)
        if not data_path.is_file():
            raise UsageError(f"trajectory file not found: {data_path}")
        traj = read_trajectory(data_path)
        if traj.n_steps < 0 or traj.n_agents == 0:
            raise UsageError(f"{data_path} holds no states")
        lo, hi = traj.positions.reshape(-1, 2).min(axis=0), traj.positions.reshape(-1, 2).max(axis=0)
        domain = Rect.coerce(cfg["domain"]) if "domain" in cfg else Rect(lo[0], hi[0], lo[1], hi[1])
        overlap = region.xmax > domain.xmin and region.xmin < domain.xmax and \
            region.ymax > domain.ymin and region.ymin < domain.ymax
        if not overlap or ("domain" in cfg and not region.inside(domain)):
            raise UsageError(f"region {region.as_tuple()} is outside the data domain {domain.as_tuple()}")

    out = _out_dir(args.out)
    resolved = dict(cfg, seed=seed, fd=dict(fd_cfg, region=list(region.as_tuple()), sample_every=every))
    if scenario is not None:
        resolved.update(T=T, dt=dt, params=vars(params).copy(), scenario=scenario_to_dict(scenario))
    manifest = Manifest(out, "fd", args.argv, resolved, seed,
                        {"data": str(data_path)} if data_path is not None else {})
    outputs = []
    if scenario is not None:
        init_rng, _ = seed_streams(seed)
        X0, V0 = init_scenario(scenario, init_rng)
        traj = integrate(X0, V0, scenario.desired_velocities(), params, T, dt, scenario=scenario)
        outputs.append(export_trajectory(traj, out / "trajectory.csv"))
    t_start = float(fd_cfg.get("t_start", traj.times[0]))
    times = traj.times[0] + np.arange(0.0, traj.duration + 1e-9, every)
    times = times[times >= t_start - 1e-12]
    fd = fundamental_diagram(traj, region, times, keep_cells=True)
    rows = [(s.t, s.agent, s.density, s.speed) for s in fd.samples]
    outputs.append(export_csv(rows, out / "fd_samples.csv", ["t", "agent", "density", "speed"]))
    frames = [{"t": t, "cells": cells_to_json(cells)} for t, cells in fd.frames]
    outputs.append(_write_json(out / "voronoi.json", frames))
    corr = fd.correlation()
    summary = {"samples": len(fd.samples), "frames": len(fd.frames), "skipped_frames": len(fd.skipped),
               "pearson_density_speed": None if np.isnan(corr) else corr}
    outputs.append(_write_json(out / "fd_summary.json", summary))
    manifest.finish(outputs)
    print(f"fundamental diagram: {summary['samples']} samples from {summary['frames']} frames "
          f"({summary['skipped_frames']} skipped); pearson(density, speed) = {corr:.4f}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cfg, _ = _load(args, "gradcheck")
    seed = _seed(args, cfg)
    n_agents = int(cfg.get("n_agents", 3))
    if not 2 <= n_agents <= MAX_AGENTS:
        raise ConfigError(f"gradcheck needs 2..{MAX_AGENTS} agents, got {n_agents}")
    T, dt = _floats(cfg, "T", 0.5), _floats(cfg, "dt", 1e-3)
    instances = int(cfg.get("instances", 3))
    adjoint = str(cfg.get("adjoint", "discrete"))
    if instances < 1:
        raise ConfigError("instances must be at least 1")
    try:
        n_steps_for(T, dt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    coupling = -1.0 if args.corrupt_sign else 1.0
    resolved = dict(cfg, seed=seed, n_agents=n_agents, T=T, dt=dt, instances=instances, adjoint=adjoint)
    manifest = None
    if args.out is not None:
        manifest = Manifest(_out_dir(args.out), "gradcheck", args.argv, resolved, seed)

    try:
        rows = run_gradcheck(seed, instances, n_agents, T, dt, adjoint, coupling)
        coarse = run_gradcheck(seed, instances, n_agents, T, 2 * dt, adjoint, coupling)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    table = []
    print(f"{'inst':>4} {'param':>5} {'adjoint':>14} {'finite diff':>14} {'rel err':>10}")
    for k, row in enumerate(rows):
        for p, name in enumerate(("lam", "A", "R")):
            err = float(row.relative_error[p])
            table.append((k, name, float(row.adjoint[p]), float(row.finite_difference[p]), err))
            print(f"{k:>4} {name:>5} {row.adjoint[p]:>14.6e} {row.finite_difference[p]:>14.6e} {err:>10.2e}")
    worst = max(r.max_relative_error for r in rows)
    worst_coarse = max(r.max_relative_error for r in coarse)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error: {worst:.3e} at dt={dt:g} ({worst_coarse:.3e} at dt={2 * dt:g}); "
          f"tolerance {GRADCHECK_TOLERANCE:g}: {'PASS' if ok else 'FAIL'}")
    if manifest is not None:
        out = Path(args.out)
        path = export_csv(table, out / "gradcheck.csv", ["instance", "param", "adjoint", "finite_difference", "rel_err"])
        manifest.finish([path], max_relative_error=worst, max_relative_error_coarse=worst_coarse, passed=ok)
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anisocrowd", description="Anisotropic crowd model toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML/JSON config file, or a manifest.json of an earlier run")
        p.add_argument("--out", required=False, help="output directory" + ("" if out_required else " (optional)"))
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")

    p = sub.add_parser("simulate", help="run a scenario and write its trajectory")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit (lambda, A, R) to trajectory data")
    common(p)
    p.add_argument("--data", help="archive text file or trajectory CSV")
    p.add_argument("--column-map", help="columns of id,frame,x,y (default 0,1,2,3)")
    p.add_argument("--unit-scale", type=float, help="multiplier to meters (default 0.01)")
    p.add_argument("--frame-rate", type=float, help="frames per second (default 16)")
    p.add_argument("--t0", type=float, help="window start in seconds")
    p.add_argument("--window", type=float, help="window length T in seconds")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fd", help="Voronoi density / speed samples of a run or a trajectory CSV")
    common(p)
    p.add_argument("--data", help="trajectory CSV (instead of simulating the config)")
    p.add_argument("--region", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.set_defaults(func=cmd_fd)

    p = sub.add_parser("gradcheck", help="adjoint gradient versus finite differences")
    common(p, out_required=False)
    p.add_argument("--corrupt-sign", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ArchiveFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numerical or I/O failure during the run
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
