"""Leap-frog integration of the agent system, scenarios and boundary handling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelParams, interaction_field

logger = logging.getLogger(__name__)

BOUNDARY_KINDS = ("reflective", "periodic", "open")
MAX_SPAWN_RETRIES = 10_000


@dataclass(frozen=True)
class Rect:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"rectangle must have positive area: {self}")

    @classmethod
    def coerce(cls, value) -> "Rect":
        if isinstance(value, Rect):
            return value
        return cls(*(float(v) for v in value))

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.xmax, self.ymax])

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((P >= self.lower - tol) & (P <= self.upper + tol), axis=1)

    def inside(self, other: "Rect") -> bool:
        return (
            self.xmin >= other.xmin
            and self.xmax <= other.xmax
            and self.ymin >= other.ymin
            and self.ymax <= other.ymax
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)


@dataclass(frozen=True)
class GroupSpec:
    """A group of agents sharing a desired velocity.

    ``bounds`` is the region the group lives in (defaults to the scenario
    domain). ``boundary`` maps each axis to ``reflective``, ``periodic``
    (leave through one edge, re-enter through the opposite one) or ``open``.
    """

    count: int
    desired: tuple[float, float]
    spawn: Rect | None = None
    bounds: Rect | None = None
    boundary: dict = field(default_factory=lambda: {"x": "periodic", "y": "reflective"})
    color: str = ""

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"group count must be non-negative, got {self.count}")
        for axis, kind in self.boundary.items():
            if axis not in ("x", "y") or kind not in BOUNDARY_KINDS:
                raise ValueError(f"invalid boundary entry {axis}={kind!r}")


@dataclass(frozen=True)
class Scenario:
    domain: Rect
    groups: tuple[GroupSpec, ...]
    d: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "domain", Rect.coerce(self.domain))
        object.__setattr__(self, "groups", tuple(self.groups))
        for g in self.groups:
            if g.bounds is not None and not g.bounds.inside(self.domain):
                raise ValueError(f"group bounds {g.bounds} leave the domain {self.domain}")

    @property
    def n_agents(self) -> int:
        return sum(g.count for g in self.groups)

    def group_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.groups)), [g.count for g in self.groups])

    def desired_velocities(self) -> np.ndarray:
        if not self.groups:
            return np.zeros((0, 2))
        return np.repeat(
            np.array([g.desired for g in self.groups], dtype=float), [g.count for g in self.groups], axis=0
        )

    def group_bounds(self, g: GroupSpec) -> Rect:
        return g.bounds if g.bounds is not None else self.domain


@dataclass
class Trajectory:
    """States on the uniform grid ``t_k = t0 + k dt``.

    ``positions`` and ``velocities`` have shape ``(K+1, N, 2)``.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        k = len(self.times)
        if self.positions.ndim != 3 or self.positions.shape[0] != k or self.positions.shape[2] != 2:
            raise ValueError(f"positions must have shape ({k}, N, 2), got {self.positions.shape}")
        if self.velocities.shape != self.positions.shape:
            raise ValueError("velocities and positions must have the same shape")
        if k > 2 and not np.allclose(np.diff(self.times), self.times[1] - self.times[0], rtol=1e-9, atol=1e-12):
            raise ValueError("time grid must be uniform")

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def n_steps_for(T: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if T < 0:
        raise ValueError(f"T must be non-negative, got {T}")
    k = int(round(T / dt))
    if abs(k * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return k


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for initial positions and for batch sampling.

    Both derive from ``np.random.SeedSequence(seed).spawn(2)``: child 0 drives
    initialisation, child 1 drives mini-batch sampling.
    """
    init, batches = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(batches)


def init_scenario(scenario: Scenario, rng: np.random.Generator | None = None):
    """Draw non-overlapping uniform positions; velocities start at the desired ones.

    Each agent is resampled until it is at least ``d`` away from every agent
    already placed. Without ``rng`` the initialisation stream of
    ``seed_streams(scenario.seed)`` is used.
    """
    if rng is None:
        rng = seed_streams(scenario.seed)[0]
    placed: list[np.ndarray] = []
    for gi, g in enumerate(scenario.groups):
        region = g.spawn or scenario.group_bounds(g)
        for _ in range(g.count):
            for _attempt in range(MAX_SPAWN_RETRIES):
                p = rng.uniform(region.lower, region.upper)
                if not placed or np.min(np.hypot(*(np.asarray(placed) - p).T)) >= scenario.d:
                    placed.append(p)
                    break
            else:
                raise RuntimeError(
                    f"could not place agent {len(placed)} of group {gi} in {region} "
                    f"with separation {scenario.d} after {MAX_SPAWN_RETRIES} tries"
                )
    X = np.asarray(placed, dtype=float).reshape(-1, 2)
    return X, scenario.desired_velocities().copy()


def leapfrog_step(X, V, W, params: ModelParams, dt: float, kick_sign: float = -1.0):
    """One step of the split leap-frog scheme.

    Half drift, implicit relaxation toward ``W``, explicit interaction kick,
    half drift. ``kick_sign=-1`` matches the model's velocity equation; pass
    ``+1`` to reproduce the scheme with the sign flipped.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    W = np.asarray(W, dtype=float)
    X_half = X + 0.5 * dt * V
    V_relax = (V + dt * params.tau * W) / (1.0 + dt * params.tau)
    if len(X) > 1:
        V_new = V_relax + kick_sign * dt * interaction_field(X_half, V_relax, params)
    else:
        V_new = V_relax
    return X_half + 0.5 * dt * V_new, V_new


def enforce_boundaries(X, V, scenario: Scenario, dt: float = 0.0):
    """Apply per-group reflective then periodic rules; returns new arrays.

    Reflective: an agent outside its bounds, or about to leave within ``dt``,
    gets its wall-normal velocity turned inward; a position already past the
    wall is mirrored back. Periodic: the position is shifted by the period so
    the overshoot past the exit edge is kept.
    """
    X = np.array(X, dtype=float)
    V = np.array(V, dtype=float)
    gidx = scenario.group_index()
    for gi, g in enumerate(scenario.groups):
        rows = gidx == gi
        if not rows.any():
            continue
        bounds = scenario.group_bounds(g)
        for axis, name in enumerate("xy"):
            kind = g.boundary.get(name, "reflective")
            lo, hi = bounds.lower[axis], bounds.upper[axis]
            x, v = X[rows, axis], V[rows, axis]
            if kind == "reflective":
                ahead = x + dt * v
                leaving_hi = ((x > hi) | (ahead > hi)) & (v > 0)
                leaving_lo = ((x < lo) | (ahead < lo)) & (v < 0)
                v = np.where(leaving_hi | leaving_lo, -v, v)
                x = np.where(x > hi, 2 * hi - x, x)
                x = np.where(x < lo, 2 * lo - x, x)
                x = np.clip(x, lo, hi)
            elif kind == "periodic":
                period = hi - lo
                x = np.where(x > hi, x - period, x)
                x = np.where(x < lo, x + period, x)
                # overshoot longer than one period
                x = np.where((x < lo) | (x > hi), lo + np.mod(x - lo, period), x)
            X[rows, axis], V[rows, axis] = x, v
    return X, V


def integrate(X0, V0, W, params: ModelParams, T: float, dt: float, scenario: Scenario | None = None,
              kick_sign: float = -1.0, t0: float = 0.0) -> Trajectory:
    """Run the leap-frog loop from ``(X0, V0)`` over ``[t0, t0+T]``.

    Without a scenario no boundary rules are applied (free space).
    """
    k_total = n_steps_for(T, dt)
    X = np.array(X0, dtype=float)
    V = np.array(V0, dtype=float)
    W = np.asarray(W, dtype=float)
    n = len(X)
    positions = np.empty((k_total + 1, n, 2))
    velocities = np.empty((k_total + 1, n, 2))
    positions[0], velocities[0] = X, V
    for k in range(k_total):
        X, V = leapfrog_step(X, V, W, params, dt, kick_sign=kick_sign)
        if scenario is not None:
            X, V = enforce_boundaries(X, V, scenario, dt)
        positions[k + 1], velocities[k + 1] = X, V
    if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(velocities))):
        raise FloatingPointError("simulation produced non-finite states")
    times = t0 + dt * np.arange(k_total + 1)
    groups = scenario.group_index() if scenario is not None else None
    return Trajectory(times, positions, velocities, groups)


def simulate(scenario: Scenario, params: ModelParams, T: float, dt: float, kick_sign: float = -1.0) -> Trajectory:
    """Initialise ``scenario`` from its seed and integrate with boundary handling."""
    if scenario.d != params.d:
        logger.debug("scenario body size %s overrides params.d=%s", scenario.d, params.d)
        params = replace(params, d=scenario.d)
    X0, V0 = init_scenario(scenario)
    return integrate(X0, V0, scenario.desired_velocities(), params, T, dt, scenario=scenario, kick_sign=kick_sign)


def lane_count(y, gap: float) -> int:
    """Number of clusters in the 1-D sample ``y`` separated by gaps larger than ``gap``."""
    y = np.sort(np.asarray(y, dtype=float).ravel())
    if y.size == 0:
        return 0
    return int(np.count_nonzero(np.diff(y) > gap)) + 1


def relaxation_velocity(v0, w, dt: float, k: int, tau: float = 1.0) -> np.ndarray:
    """Closed-form velocity after ``k`` force-free steps of the scheme."""
    v0, w = np.asarray(v0, dtype=float), np.asarray(w, dtype=float)
    return w + (v0 - w) / (1.0 + dt * tau) ** k


def corridor_scenario(n_per_group: int = 40, d: float = 0.4, seed: int = 0,
                      length: float = 12.0, width: float = 4.2, speed: float = 0.7,
                      mixed: bool = True) -> Scenario:
    """Counterflow corridor ``[-L/2, L/2] x [0, width]``.

    Walls top and bottom are reflective; each group re-enters through the
    edge opposite to its exit. With ``mixed`` both groups spawn over the full
    corridor, otherwise blue starts in the left and red in the right half.
    """
    domain = Rect(-length / 2, length / 2, 0.0, width)
    left = Rect(-length / 2, 0.0, 0.0, width)
    right = Rect(0.0, length / 2, 0.0, width)
    boundary = {"x": "periodic", "y": "reflective"}
    return Scenario(
        domain=domain,
        groups=(
            GroupSpec(n_per_group, (speed, 0.0), None if mixed else left, None, boundary, "blue"),
            GroupSpec(n_per_group, (-speed, 0.0), None if mixed else right, None, dict(boundary), "red"),
        ),
        d=d,
        seed=seed,
    )


def crossing_scenario(n_per_group: int = 40, d: float = 0.4, seed: int = 0, speed: float = 0.7,
                      half: float = 5.0, band: tuple[float, float] = (-2.0, 2.0)) -> Scenario:
    """Two perpendicular corridors: blue moves along +x, red along +y."""
    domain = Rect(-half, half, -half, half)
    horiz = Rect(-half, half, band[0], band[1])
    vert = Rect(band[0], band[1], -half, half)
    return Scenario(
        domain=domain,
        groups=(
            GroupSpec(n_per_group, (speed, 0.0), Rect(-half, band[0], band[0], band[1]), horiz,
                      {"x": "periodic", "y": "reflective"}, "blue"),
            GroupSpec(n_per_group, (0.0, speed), Rect(band[0], band[1], -half, band[0]), vert,
                      {"x": "reflective", "y": "periodic"}, "red"),
        ),
        d=d,
        seed=seed,
    )
