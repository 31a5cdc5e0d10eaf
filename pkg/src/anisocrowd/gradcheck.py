"""Adjoint gradient versus central finite differences on small random instances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import CalibrationConfig, finite_difference_gradient, weighted_gradient
from .model import ControlVector, ModelParams
from .simulator import Trajectory, integrate

MAX_AGENTS = 5
MIN_SEPARATION = 1.0
# smallest |sin| of the angle between two agents' velocities along an instance;
# the reduced cost has a kink wherever two headings pass through (anti)parallel
MIN_HEADING_SIN = 1e-2
MAX_DRAWS = 1000


@dataclass
class GradCheckInstance:
    X0: np.ndarray
    V0: np.ndarray
    W: np.ndarray
    data: Trajectory
    params: ModelParams  # evaluation point, control included
    state: Trajectory  # simulated at ``params``


@dataclass
class GradCheckRow:
    adjoint: np.ndarray
    finite_difference: np.ndarray

    @property
    def relative_error(self) -> np.ndarray:
        return np.abs(self.adjoint - self.finite_difference) / np.maximum(np.abs(self.finite_difference), 1e-300)

    @property
    def max_relative_error(self) -> float:
        return float(np.max(self.relative_error))


def make_instance(rng: np.random.Generator, n_agents: int = 5, T: float = 0.5, dt: float = 1e-3,
                  speed: float = 0.8, box: float = 3.5) -> GradCheckInstance:
    """Random positions at least ``MIN_SEPARATION`` apart, headings spread around the circle.

    Velocities start at the desired ones and the data are simulated from the
    same start with a different control. Draws in which two velocities become
    (anti)parallel along the trajectory are rejected, since the cost is not
    differentiable there.
    """
    if not 2 <= n_agents <= MAX_AGENTS:
        raise ValueError(f"gradient checks use 2..{MAX_AGENTS} agents, got {n_agents}")
    for _ in range(MAX_DRAWS):
        X0 = rng.uniform(0.0, box, (n_agents, 2))
        gaps = np.hypot(*(X0[:, None] - X0[None]).transpose(2, 0, 1))
        if gaps[~np.eye(n_agents, dtype=bool)].min() <= MIN_SEPARATION:
            continue
        # evenly spread, jittered headings keep pairs far from (anti)parallel
        spread = 2 * np.pi * np.arange(n_agents) / n_agents + rng.uniform(-0.15, 0.15, n_agents)
        heading = rng.uniform(0.0, 2 * np.pi) + rng.permutation(spread)
        W = speed * np.column_stack((np.cos(heading), np.sin(heading)))
        params = ModelParams(lam=rng.uniform(-0.5, 0.5), A=rng.uniform(2.0, 8.0), R=rng.uniform(10.0, 30.0),
                             a=2.0, r=0.5, d=0.4)
        truth = params.with_control(ControlVector(rng.uniform(-0.5, 0.5), rng.uniform(2.0, 8.0),
                                                  rng.uniform(10.0, 30.0)))
        state = integrate(X0, W, W, params, T, dt)
        if min_heading_sin(state) < MIN_HEADING_SIN:
            continue
        data = integrate(X0, W, W, truth, T, dt)
        return GradCheckInstance(X0, W.copy(), W, data, params, state)
    raise RuntimeError(f"no non-degenerate instance in {MAX_DRAWS} draws")


def min_heading_sin(traj: Trajectory) -> float:
    """Smallest ``|sin|`` of the angle between any two velocities over the trajectory."""
    V = traj.velocities
    n = V.shape[1]
    if n < 2:
        return 1.0
    speed = np.hypot(V[..., 0], V[..., 1])
    cross = V[:, :, None, 0] * V[:, None, :, 1] - V[:, :, None, 1] * V[:, None, :, 0]
    sines = np.abs(cross) / np.maximum(speed[:, :, None] * speed[:, None, :], 1e-300)
    iu = np.triu_indices(n, 1)
    return float(sines[:, iu[0], iu[1]].min())


def check_instance(inst: GradCheckInstance, cfg: CalibrationConfig | None = None,
                   coupling_sign: float = 1.0) -> GradCheckRow:
    cfg = CalibrationConfig() if cfg is None else cfg
    u = inst.params.control
    grad = weighted_gradient(inst.state, inst.data, inst.params, cfg, W=inst.W, coupling_sign=coupling_sign)
    fd = finite_difference_gradient(u, inst.X0, inst.V0, inst.W, inst.data, inst.params, cfg)
    return GradCheckRow(grad, fd)


def run_gradcheck(seed, n_instances: int, n_agents: int, T: float, dt: float, adjoint: str = "discrete",
                  coupling_sign: float = 1.0) -> list[GradCheckRow]:
    """Check ``n_instances`` random instances; the same seed gives the same instances for any ``dt``."""
    rng = np.random.default_rng(seed)
    cfg = CalibrationConfig(adjoint=adjoint)
    return [check_instance(make_instance(rng, n_agents, T, dt), cfg, coupling_sign=coupling_sign)
            for _ in range(n_instances)]
