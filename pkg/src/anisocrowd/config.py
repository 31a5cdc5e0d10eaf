"""YAML/JSON configuration files for scenarios, calibration and gradient checks.

Scenario keys::

    preset: corridor | crossing      # optional shortcut, other keys override
    n_per_group: 40                  # preset only
    domain: [xmin, xmax, ymin, ymax]
    groups:
      - {count: 40, desired: [0.7, 0.0], color: blue,
         spawn: [x0, x1, y0, y1], bounds: [x0, x1, y0, y1],
         boundary: {x: periodic, y: reflective}}
    d: 0.4
    seed: 0
    dt: 0.00625
    T: 35
    kick_sign: -1
    params: {lam: 0.25, tau: 1, A: 5, R: 20, a: 2, r: 0.5}
    fd: {region: [-2, 2, 0, 4], sample_every: 0.5, t_start: 0}

Calibration keys::

    dt, T (window length), t0, seed
    params: {tau, a, r, d}
    u0: [lam, A, R]
    data: {column_map: [0, 1, 2, 3], unit_scale: 0.01, frame_rate: 16, agents: [...]}
    desired: {"+x": [0.7, 0], "-x": [-0.7, 0]}   # per direction group, optional
    calibration: {sigma1, sigma2, u_ref, beta, epsilon_rel, m, batch_length,
                  max_iters, box: {eps, A_max, R_max}}
"""
from __future__ import annotations

import json
from pathlib import Path

import yaml

from .adjoint import CalibrationConfig
from .model import AdmissibleBox, ControlVector, ModelParams
from .simulator import GroupSpec, Rect, Scenario, corridor_scenario, crossing_scenario


class ConfigError(ValueError):
    """A configuration file is missing, unreadable or inconsistent."""


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open() as fh:
            # YAML 1.1 reads exponents without a dot (1e-09) as strings, so JSON goes to json
            cfg = json.load(fh) if path.suffix.lower() == ".json" else yaml.safe_load(fh)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _rect(value, what: str) -> Rect | None:
    if value is None:
        return None
    try:
        return Rect.coerce(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid rectangle for {what}: {value!r} ({exc})") from exc


def model_params(cfg: dict, **overrides) -> ModelParams:
    raw = dict(cfg.get("params") or {})
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    raw.update(overrides)
    unknown = set(raw) - {"lam", "tau", "A", "R", "a", "r", "d"}
    if unknown:
        raise ConfigError(f"unknown model parameters: {sorted(unknown)}")
    try:
        return ModelParams(**{k: float(v) for k, v in raw.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def scenario_from_config(cfg: dict, seed: int | None = None) -> Scenario:
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    d = float(cfg.get("d", (cfg.get("params") or {}).get("d", 0.4)))
    preset = cfg.get("preset")
    try:
        if preset == "corridor":
            base = corridor_scenario(int(cfg.get("n_per_group", 40)), d=d, seed=seed,
                                     length=float(cfg.get("length", 12.0)), width=float(cfg.get("width", 4.2)),
                                     speed=float(cfg.get("speed", 0.7)), mixed=bool(cfg.get("mixed", True)))
        elif preset == "crossing":
            base = crossing_scenario(int(cfg.get("n_per_group", 40)), d=d, seed=seed,
                                     speed=float(cfg.get("speed", 0.7)))
        elif preset is not None:
            raise ConfigError(f"unknown scenario preset {preset!r}")
        else:
            base = None
        domain = _rect(cfg.get("domain"), "domain") or (base.domain if base else None)
        if domain is None:
            raise ConfigError("scenario needs a domain or a preset")
        if "groups" in cfg:
            groups = []
            for k, g in enumerate(cfg["groups"]):
                desired = tuple(float(v) for v in g["desired"])
                if len(desired) != 2:
                    raise ConfigError(f"group {k}: desired velocity must have two components")
                groups.append(GroupSpec(
                    count=int(g["count"]),
                    desired=desired,
                    spawn=_rect(g.get("spawn"), f"group {k} spawn"),
                    bounds=_rect(g.get("bounds"), f"group {k} bounds"),
                    boundary=dict(g.get("boundary") or {"x": "periodic", "y": "reflective"}),
                    color=str(g.get("color", "")),
                ))
        elif base is not None:
            groups = list(base.groups)
        else:
            raise ConfigError("scenario needs groups or a preset")
        return Scenario(domain=domain, groups=tuple(groups), d=d, seed=seed)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed scenario config: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def calibration_config(cfg: dict, seed: int | None = None) -> CalibrationConfig:
    raw = dict(cfg.get("calibration") or {})
    box = raw.pop("box", None) or {}
    try:
        if "u_ref" in raw:
            raw["u_ref"] = ControlVector.from_array(raw["u_ref"])
        if "beta" in raw:
            raw["beta"] = tuple(float(b) for b in raw["beta"])
        return CalibrationConfig(
            box=AdmissibleBox(**{k: float(v) for k, v in box.items()}),
            seed=int(cfg.get("seed", 0) if seed is None else seed),
            **raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid calibration settings: {exc}") from exc


def scenario_to_dict(scenario: Scenario) -> dict:
    """Plain-data form of a scenario, suitable for a manifest."""
    return {
        "domain": list(scenario.domain.as_tuple()),
        "d": scenario.d,
        "seed": scenario.seed,
        "groups": [
            {
                "count": g.count,
                "desired": list(g.desired),
                "color": g.color,
                "spawn": list(g.spawn.as_tuple()) if g.spawn else None,
                "bounds": list(g.bounds.as_tuple()) if g.bounds else None,
                "boundary": dict(g.boundary),
            }
            for g in scenario.groups
        ],
    }
