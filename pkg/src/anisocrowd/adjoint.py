"""Tracking cost, backward adjoint solve, reduced gradient and mini-batch descent.

The adjoint ``(xi1, xi2)`` of the position and velocity equations satisfies

    xi1_i' = s_k sigma1/N (x_i - x_i^data) + 1/N sum_j (M_ij dK_ij/dx_i)^T (xi2_i - xi2_j)
    xi2_i' = -xi1_i + tau xi2_i + 1/N sum_j [(xi2_i - xi2_j)^T dM/dalpha K_ij] dalpha_ij/dv_i

with ``xi(T) = 0``; ``s_k`` masks the tracking source to the active time
window. The gradient of the reduced cost is

    grad J(u) = sigma2 (u - u_ref) - int_0^T sum_i (dF_i/du)^T xi2_i dt.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (
    AdmissibleBox,
    ControlVector,
    ModelParams,
    control_derivatives,
    interaction_vjp,
    pairwise_geometry,
)
from .simulator import Trajectory, integrate, seed_streams

logger = logging.getLogger(__name__)

ADJOINT_METHODS = ("discrete", "rk2")


class GridMismatchError(ValueError):
    """State and data trajectories do not share the time grid or agent set."""


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings of the tracking cost and the descent loop.

    ``batch_length=None`` gives full-horizon (deterministic) gradients.
    ``adjoint`` picks the gradient: ``"discrete"`` differentiates the
    leap-frog steps exactly, ``"rk2"`` integrates the continuous adjoint
    equations with the midpoint rule (consistent to first order in ``dt``).
    """

    sigma1: float = 1.0
    sigma2: float = 0.0
    u_ref: ControlVector = ControlVector(0.0, 0.0, 0.0)
    beta: tuple[float, float, float] = (20.0, 4000.0, 4000.0)
    epsilon_rel: float = 1e-2
    m: int = 50
    batch_length: float | None = None
    max_iters: int = 100
    box: AdmissibleBox = field(default_factory=AdmissibleBox)
    seed: int = 0
    adjoint: str = "discrete"

    def __post_init__(self):
        if self.adjoint not in ADJOINT_METHODS:
            raise ValueError(f"adjoint must be one of {ADJOINT_METHODS}, got {self.adjoint!r}")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("cost weights must be non-negative")
        if len(self.beta) != 3 or min(self.beta) <= 0:
            raise ValueError(f"beta must be three positive step sizes, got {self.beta}")
        if not 0 < self.epsilon_rel < 1:
            raise ValueError(f"epsilon_rel must lie in (0, 1), got {self.epsilon_rel}")
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")
        if self.batch_length is not None and self.batch_length <= 0:
            raise ValueError("batch_length must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass(frozen=True)
class MiniBatch:
    """Steps ``[start, stop)``, i.e. the time window ``[t_start, t_stop]``."""

    start: int
    stop: int

    def __post_init__(self):
        if not 0 <= self.start < self.stop:
            raise ValueError(f"empty or negative batch [{self.start}, {self.stop})")

    def weights(self, n_steps: int) -> np.ndarray:
        if self.stop > n_steps:
            raise ValueError(f"batch [{self.start}, {self.stop}) exceeds {n_steps} steps")
        w = np.zeros(n_steps)
        w[self.start:self.stop] = 1.0
        return w


@dataclass
class AdjointTrajectory:
    times: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray


@dataclass
class CalibrationResult:
    history: list[tuple[ControlVector, float]]
    u: ControlVector
    trajectory: Trajectory
    converged: bool = False

    @property
    def costs(self) -> np.ndarray:
        return np.array([J for _, J in self.history])

    @property
    def controls(self) -> np.ndarray:
        return np.array([u.to_array() for u, _ in self.history])


def _check_grids(traj: Trajectory, data: Trajectory) -> None:
    if traj.positions.shape != data.positions.shape:
        raise GridMismatchError(
            f"state has shape {traj.positions.shape}, data has {data.positions.shape}"
        )
    if not np.allclose(traj.times - traj.times[0], data.times - data.times[0], rtol=0, atol=1e-9):
        raise GridMismatchError("state and data use different time grids")


def _trapezoid(values: np.ndarray, dt: float, axis: int = 0) -> np.ndarray:
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    if len(values) < 2:
        return np.zeros(values.shape[1:])
    return dt * (values.sum(axis=0) - 0.5 * (values[0] + values[-1]))


def cost_functional(traj: Trajectory, data: Trajectory, u: ControlVector, cfg: CalibrationConfig,
                    batch: MiniBatch | None = None) -> float:
    """Trapezoidal tracking cost plus Tikhonov term; ``batch`` restricts the tracking window."""
    _check_grids(traj, data)
    n = traj.n_agents
    mismatch = np.sum((traj.positions - data.positions) ** 2, axis=(1, 2))
    if batch is not None:
        mismatch = mismatch[batch.start:batch.stop + 1]
    tracking = cfg.sigma1 / (2 * n) * float(_trapezoid(mismatch, traj.dt)) if n else 0.0
    du = u.to_array() - cfg.u_ref.to_array()
    return tracking + 0.5 * cfg.sigma2 * float(du @ du)


def adjoint_rhs(X, V, X_data, xi1, xi2, params: ModelParams, sigma1: float, weight: float = 1.0,
                geom=None, coupling_sign: float = 1.0):
    """Time derivatives ``(xi1', xi2')`` at one instant.

    ``coupling_sign`` multiplies the velocity-coupling sum of the second
    equation; anything other than ``+1`` yields a wrong gradient and exists as
    a negative control for the gradient check.
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    xi1 = np.asarray(xi1, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    n = len(X)
    d_xi1 = (weight * sigma1 / n) * (X - np.asarray(X_data, dtype=float))
    d_xi2 = -xi1 + params.tau * xi2
    if n < 2:
        return d_xi1, d_xi2
    if geom is None:
        geom = pairwise_geometry(X, V, params, with_gradient=True)
    gx, gv = interaction_vjp(geom, xi2, coupling_sign)
    d_xi1 = d_xi1 + gx
    d_xi2 = d_xi2 + gv
    return d_xi1, d_xi2


def solve_adjoint(state: Trajectory, data: Trajectory, params: ModelParams, cfg: CalibrationConfig,
                  batch: MiniBatch | None = None, step_weights: np.ndarray | None = None,
                  coupling_sign: float = 1.0) -> AdjointTrajectory:
    """Integrate the adjoint backward from ``xi(T) = 0`` with the explicit midpoint rule.

    State and data at half steps are linear interpolants of the grid values.
    The tracking source of step ``k`` (between ``t_k`` and ``t_{k+1}``) is
    scaled by ``step_weights[k]``; ``batch`` sets those weights to its window.
    """
    _check_grids(state, data)
    K = state.n_steps
    if step_weights is None:
        step_weights = batch.weights(K) if batch is not None else np.ones(K)
    step_weights = np.asarray(step_weights, dtype=float)
    if step_weights.shape != (K,):
        raise ValueError(f"step_weights must have shape ({K},)")
    n = state.n_agents
    h = state.dt
    xi1 = np.zeros((K + 1, n, 2))
    xi2 = np.zeros((K + 1, n, 2))
    active = np.nonzero(step_weights)[0]
    last = active.max() + 1 if active.size else 0
    Xs, Vs, Xd = state.positions, state.velocities, data.positions

    def rhs(X, V, Xdat, a1, a2, w):
        geom = pairwise_geometry(X, V, params, with_gradient=True) if n > 1 else None
        return adjoint_rhs(X, V, Xdat, a1, a2, params, cfg.sigma1, w, geom, coupling_sign)

    # xi vanishes after the last step carrying a source term
    for k in range(last - 1, -1, -1):
        w = step_weights[k]
        a1, a2 = xi1[k + 1], xi2[k + 1]
        k1_1, k1_2 = rhs(Xs[k + 1], Vs[k + 1], Xd[k + 1], a1, a2, w)
        m1, m2 = a1 - 0.5 * h * k1_1, a2 - 0.5 * h * k1_2
        Xm = 0.5 * (Xs[k] + Xs[k + 1])
        Vm = 0.5 * (Vs[k] + Vs[k + 1])
        Xdm = 0.5 * (Xd[k] + Xd[k + 1])
        k2_1, k2_2 = rhs(Xm, Vm, Xdm, m1, m2, w)
        xi1[k] = a1 - h * k2_1
        xi2[k] = a2 - h * k2_2
    return AdjointTrajectory(state.times.copy(), xi1, xi2)


def reduced_gradient(state: Trajectory, adjoint: AdjointTrajectory, params: ModelParams,
                     cfg: CalibrationConfig) -> np.ndarray:
    """Gradient of the reduced cost with respect to ``(lam, A, R)``."""
    if adjoint.xi2.shape != state.positions.shape:
        raise GridMismatchError("adjoint and state grids differ")
    u = params.control.to_array()
    grad = cfg.sigma2 * (u - cfg.u_ref.to_array())
    if state.n_agents < 2 or state.n_steps == 0:
        return grad
    integrand = np.zeros((state.n_steps + 1, 3))
    for k in range(state.n_steps + 1):
        if not np.any(adjoint.xi2[k]):
            continue
        geom = pairwise_geometry(state.positions[k], state.velocities[k], params)
        integrand[k] = np.einsum("pic,ic->p", control_derivatives(geom, params), adjoint.xi2[k])
    return grad - _trapezoid(integrand, state.dt)


def tracking_weights(n_steps: int, step_weights: np.ndarray) -> np.ndarray:
    """Trapezoid weight (in units of ``dt``) of each grid point under per-step source weights."""
    node = np.zeros(n_steps + 1)
    node[:-1] += 0.5 * step_weights
    node[1:] += 0.5 * step_weights
    return node


def discrete_gradient(state: Trajectory, data: Trajectory, params: ModelParams, cfg: CalibrationConfig,
                      W, step_weights: np.ndarray | None = None, kick_sign: float = -1.0,
                      coupling_sign: float = 1.0) -> np.ndarray:
    """Exact gradient of the discrete reduced cost, by reverse sweep over the leap-frog steps.

    Each step ``X_h = X + dt/2 V``, ``V_r = (V + dt tau W)/(1 + dt tau)``,
    ``V' = V_r + s dt S(X_h, V_r)``, ``X' = X_h + dt/2 V'`` is transposed in
    reverse order; the cotangent of ``V'`` plays the role of ``dt xi2``.
    Boundary rules are not part of the differentiated map.
    """
    _check_grids(state, data)
    K, n, h = state.n_steps, state.n_agents, state.dt
    if step_weights is None:
        step_weights = np.ones(K)
    step_weights = np.asarray(step_weights, dtype=float)
    if step_weights.shape != (K,):
        raise ValueError(f"step_weights must have shape ({K},)")
    grad = cfg.sigma2 * (params.control.to_array() - cfg.u_ref.to_array())
    node = tracking_weights(K, step_weights)
    hot = np.nonzero(node)[0]
    if n < 2 or K == 0 or hot.size == 0:
        return grad
    W = np.broadcast_to(np.asarray(W, dtype=float), (n, 2))
    src = (cfg.sigma1 / n) * h * node[:, None, None] * (state.positions - data.positions)
    damp = 1.0 + h * params.tau
    last = int(hot.max())
    pX = src[last].copy()
    pV = np.zeros((n, 2))
    for k in range(last - 1, -1, -1):
        X, V = state.positions[k], state.velocities[k]
        Xh = X + 0.5 * h * V
        Vr = (V + h * params.tau * W) / damp
        q = pV + 0.5 * h * pX
        geom = pairwise_geometry(Xh, Vr, params, with_gradient=True)
        gx, gv = interaction_vjp(geom, q, coupling_sign)
        # dV'/du = -s dt dF/du with F = -S
        grad = grad - kick_sign * h * np.einsum("pic,ic->p", control_derivatives(geom, params), q)
        pXh = pX + kick_sign * h * gx
        pV = (q + kick_sign * h * gv) / damp + 0.5 * h * pXh
        pX = pXh + src[k]
    return grad


def batch_partition(n_steps: int, dt: float, batch_length: float | None) -> list[MiniBatch]:
    """Contiguous, near-equal blocks of steps covering ``[0, n_steps)``."""
    if n_steps < 1:
        raise ValueError("need at least one time step to form batches")
    if batch_length is None:
        return [MiniBatch(0, n_steps)]
    per = max(1, int(round(batch_length / dt)))
    n_batches = max(1, n_steps // per)
    edges = np.linspace(0, n_steps, n_batches + 1).round().astype(int)
    return [MiniBatch(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def sample_batches(n_steps: int, dt: float, cfg: CalibrationConfig, rng: np.random.Generator) -> list[MiniBatch]:
    """Draw ``cfg.m`` distinct batches (all of them if fewer exist)."""
    pool = batch_partition(n_steps, dt, cfg.batch_length)
    if cfg.m >= len(pool):
        return pool
    picks = np.sort(rng.choice(len(pool), size=cfg.m, replace=False))
    return [pool[i] for i in picks]


def weighted_gradient(state: Trajectory, data: Trajectory, params: ModelParams, cfg: CalibrationConfig,
                      step_weights: np.ndarray | None = None, W=None, coupling_sign: float = 1.0) -> np.ndarray:
    """Reduced gradient with the tracking source scaled per step, by ``cfg.adjoint``."""
    if cfg.adjoint == "discrete":
        if W is None:
            raise ValueError("the discrete adjoint needs the desired velocities W")
        return discrete_gradient(state, data, params, cfg, W, step_weights, coupling_sign=coupling_sign)
    adj = solve_adjoint(state, data, params, cfg, step_weights=step_weights, coupling_sign=coupling_sign)
    return reduced_gradient(state, adj, params, cfg)


def minibatch_gradient(state: Trajectory, data: Trajectory, params: ModelParams, cfg: CalibrationConfig,
                       batches: list[MiniBatch], W=None, coupling_sign: float = 1.0) -> np.ndarray:
    """Mean of the per-batch reduced gradients.

    The adjoint is linear in its source term, so the mean over batches equals
    one backward solve whose source weights are the averaged batch masks.
    """
    if not batches:
        raise ValueError("at least one mini-batch is required")
    K = state.n_steps
    weights = np.mean([b.weights(K) for b in batches], axis=0)
    return weighted_gradient(state, data, params, cfg, weights, W, coupling_sign)


def descent_step(u: ControlVector, gradient, beta, box: AdmissibleBox) -> ControlVector:
    """Scaled steepest-descent update projected onto the admissible box."""
    raw = u.to_array() - np.asarray(beta, dtype=float) * np.asarray(gradient, dtype=float)
    return ControlVector.from_array(box.project(raw))


def reduced_cost(u: ControlVector, X0, V0, W, data: Trajectory, params: ModelParams,
                 cfg: CalibrationConfig, kick_sign: float = -1.0) -> float:
    """Simulate with control ``u`` and evaluate the cost against ``data``."""
    traj = integrate(X0, V0, W, params.with_control(u), data.duration, data.dt, kick_sign=kick_sign,
                     t0=float(data.times[0]))
    return cost_functional(traj, data, u, cfg)


def full_gradient(u: ControlVector, X0, V0, W, data: Trajectory, params: ModelParams,
                  cfg: CalibrationConfig, coupling_sign: float = 1.0) -> tuple[float, np.ndarray]:
    """Reduced cost and its full-horizon adjoint gradient at ``u``."""
    p = params.with_control(u)
    traj = integrate(X0, V0, W, p, data.duration, data.dt, t0=float(data.times[0]))
    grad = weighted_gradient(traj, data, p, cfg, W=W, coupling_sign=coupling_sign)
    return cost_functional(traj, data, u, cfg), grad


def finite_difference_gradient(u: ControlVector, X0, V0, W, data: Trajectory, params: ModelParams,
                               cfg: CalibrationConfig, steps=(1e-5, 1e-4, 1e-4)) -> np.ndarray:
    """Central differences of the discrete reduced cost."""
    base = u.to_array()
    grad = np.zeros(3)
    for p, h in enumerate(steps):
        up, um = base.copy(), base.copy()
        up[p] += h
        um[p] -= h
        Jp = reduced_cost(ControlVector.from_array(up), X0, V0, W, data, params, cfg)
        Jm = reduced_cost(ControlVector.from_array(um), X0, V0, W, data, params, cfg)
        grad[p] = (Jp - Jm) / (2 * h)
    return grad


def calibrate(data: Trajectory, u0: ControlVector, params: ModelParams, cfg: CalibrationConfig,
              W=None, X0=None, V0=None, rng: np.random.Generator | None = None,
              callback=None) -> CalibrationResult:
    """Projected mini-batch steepest descent on ``(lam, A, R)``.

    Positions start at the first data frame unless ``X0`` is given; velocities
    default to the desired ones. The loop stops when the relative change of
    the cost drops below ``cfg.epsilon_rel`` or after ``cfg.max_iters`` updates.
    """
    X0 = data.positions[0] if X0 is None else np.asarray(X0, dtype=float)
    if W is None:
        W = data.velocities[0]
    W = np.asarray(W, dtype=float)
    V0 = W.copy() if V0 is None else np.asarray(V0, dtype=float)
    if rng is None:
        rng = seed_streams(cfg.seed)[1]
    beta = np.asarray(cfg.beta, dtype=float)

    u = ControlVector.from_array(cfg.box.project(u0.to_array()))
    t0 = float(data.times[0])

    def evaluate(ctrl):
        p = params.with_control(ctrl)
        traj = integrate(X0, V0, W, p, data.duration, data.dt, t0=t0)
        J = cost_functional(traj, data, ctrl, cfg)
        if not np.isfinite(J):
            raise FloatingPointError(f"non-finite cost {J} at u={ctrl}")
        return p, traj, J

    p, traj, J = evaluate(u)
    history = [(u, J)]
    converged = False
    for it in range(cfg.max_iters):
        batches = sample_batches(traj.n_steps, traj.dt, cfg, rng)
        grad = minibatch_gradient(traj, data, p, cfg, batches, W=W)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient {grad} at u={u}")
        u = descent_step(u, grad, beta, cfg.box)
        J_prev = J
        p, traj, J = evaluate(u)
        history.append((u, J))
        logger.info("iter %d: lam=%.5f A=%.5f R=%.5f J=%.6g", it + 1, u.lam, u.A, u.R, J)
        if callback is not None:
            callback(it + 1, u, J, grad)
        if abs(J_prev - J) <= cfg.epsilon_rel * abs(J_prev):
            converged = True
            break
    return CalibrationResult(history, u, traj, converged)
