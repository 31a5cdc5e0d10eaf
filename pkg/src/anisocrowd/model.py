"""Right-hand side of the anisotropic interaction model and its derivatives.

Agent ``i`` obeys

    x_i' = v_i
    v_i' = tau (w_i - v_i) - 1/N sum_{j != i} M(v_i, v_j) K(d, x_i, x_j)

where ``M`` rotates the Morse-type pair force ``K`` by the angle
``lam * arccos(<v_i, v_j> / |v_i||v_j|)``.

Two flavours of every quantity live here: small per-pair functions that work
on single 2-vectors (the public, documented surface) and ``pairwise_*``
helpers that evaluate all ``N x N`` pairs at once for the integrators.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Below this norm a velocity counts as zero (the "else" branch of the angle).
ZERO_VELOCITY = 1e-12
# |sin(angle between v_i, v_j)| below this is treated as (anti)parallel.
PARALLEL_SIN = 1e-9


class SingularSeparationError(ValueError):
    """Two agents occupy the same position, where the pair force is undefined."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the interaction model.

    ``lam`` is the collision-avoidance scaling (``lambda`` is reserved in
    Python). Lengths are in meters, ``tau`` in 1/s.
    """

    lam: float = 0.25
    tau: float = 1.0
    A: float = 5.0
    R: float = 20.0
    a: float = 2.0
    r: float = 0.5
    d: float = 0.4

    def __post_init__(self):
        if not (self.a > 0 and self.r > 0):
            raise ValueError(f"force ranges must be positive, got a={self.a}, r={self.r}")
        if self.A < 0 or self.R < 0:
            raise ValueError(f"force amplitudes must be non-negative, got A={self.A}, R={self.R}")
        if self.d < 0:
            raise ValueError(f"body diameter must be non-negative, got d={self.d}")
        if abs(self.lam) > 1:
            raise ValueError(f"|lam| must not exceed 1, got {self.lam}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def with_control(self, u: "ControlVector") -> "ModelParams":
        return replace(self, lam=u.lam, A=u.A, R=u.R)

    @property
    def control(self) -> "ControlVector":
        return ControlVector(self.lam, self.A, self.R)


@dataclass(frozen=True)
class AdmissibleBox:
    """Box ``[-1+eps, 1-eps] x [0, A_max] x [0, R_max]`` of admissible controls."""

    eps: float = 1e-3
    A_max: float = 100.0
    R_max: float = 100.0

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.A_max < 0 or self.R_max < 0:
            raise ValueError("A_max and R_max must be non-negative")

    @property
    def lower(self) -> np.ndarray:
        return np.array([-1.0 + self.eps, 0.0, 0.0])

    @property
    def upper(self) -> np.ndarray:
        return np.array([1.0 - self.eps, self.A_max, self.R_max])

    def project(self, values) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.lower, self.upper)

    def contains(self, u: "ControlVector") -> bool:
        arr = u.to_array()
        return bool(np.all(arr >= self.lower) and np.all(arr <= self.upper))


@dataclass(frozen=True)
class ControlVector:
    """The calibrated triple ``(lam, A, R)``."""

    lam: float
    A: float
    R: float

    def to_array(self) -> np.ndarray:
        return np.array([self.lam, self.A, self.R], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ControlVector":
        lam, A, R = (float(v) for v in np.asarray(values, dtype=float).ravel())
        return cls(lam, A, R)

    def __iter__(self):
        return iter((self.lam, self.A, self.R))


@dataclass(frozen=True)
class VelocityGradientTensor:
    """Derivative of ``M(v_i, v_j)`` with respect to ``v_i``.

    ``primal[a, b, c] = dM[a, b] / dv_i[c]``. ``dual`` is the axis-swapped
    tensor with ``dual[c, a, b] = primal[a, b, c]``, so that
    ``dual @ K @ xi`` contracts to the vector ``xi^T (dM/dv_i[c]) K`` over ``c``.
    """

    primal: np.ndarray
    dual: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "dual", np.transpose(self.primal, (2, 0, 1)))

    def contract(self, force, xi) -> np.ndarray:
        """Return ``d_v[xi^T M(v) K]`` using the dual tensor."""
        return self.dual @ np.asarray(force, dtype=float) @ np.asarray(xi, dtype=float)


# ---------------------------------------------------------------------------
# single-pair surface


def _as_vec(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {arr.shape}")
    return arr


def _rotation(alpha: float) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, -s], [s, c]])


def _rotation_derivative(alpha: float) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[-s, -c], [c, -s]])


def _cos_between(v_i: np.ndarray, v_j: np.ndarray) -> float | None:
    ni, nj = np.linalg.norm(v_i), np.linalg.norm(v_j)
    if ni < ZERO_VELOCITY or nj < ZERO_VELOCITY:
        return None
    return float(np.clip(v_i @ v_j / (ni * nj), -1.0, 1.0))


def rotation_angle(v_i, v_j, lam: float) -> float:
    """Collision-avoidance angle ``lam * arccos(cos(v_i, v_j))``; 0 if either velocity vanishes."""
    c = _cos_between(_as_vec(v_i), _as_vec(v_j))
    if c is None:
        return 0.0
    return float(lam * np.arccos(c))


def rotation_matrix(v_i, v_j, lam: float) -> np.ndarray:
    return _rotation(rotation_angle(v_i, v_j, lam))


def radial_coefficient(s, params: ModelParams):
    """Signed magnitude ``f(s)`` of the pair force along ``x_i - x_j``.

    The model subtracts the force, so ``f < 0`` pushes agents apart.
    """
    s = np.asarray(s, dtype=float)
    return (params.A / params.a) * np.exp((params.d - s) / params.a) - (
        params.R / params.r
    ) * np.exp((params.d - s) / params.r)


def radial_coefficient_derivative(s, params: ModelParams):
    s = np.asarray(s, dtype=float)
    return -(params.A / params.a**2) * np.exp((params.d - s) / params.a) + (
        params.R / params.r**2
    ) * np.exp((params.d - s) / params.r)


def _separation(x_i: np.ndarray, x_j: np.ndarray) -> tuple[np.ndarray, float]:
    diff = x_i - x_j
    s = float(np.hypot(diff[0], diff[1]))
    if s == 0.0:
        raise SingularSeparationError(f"coincident positions at {x_i.tolist()}")
    return diff, s


def interaction_force(d: float, x_i, x_j, params: ModelParams) -> np.ndarray:
    """Pair force ``K(d, x_i, x_j)`` along ``(x_i - x_j)/|x_i - x_j|``.

    ``d`` overrides ``params.d``; it is kept as an explicit argument because the
    body size is the quantity under study in the scenario sweeps.
    """
    p = replace(params, d=d)
    diff, s = _separation(_as_vec(x_i), _as_vec(x_j))
    return float(radial_coefficient(s, p)) * diff / s


def force_position_jacobian(d: float, x_i, x_j, params: ModelParams) -> np.ndarray:
    """Jacobian ``dK(d, x_i, x_j)/dx_i``: ``f'(s) e e^T + f(s)/s (I - e e^T)``."""
    p = replace(params, d=d)
    diff, s = _separation(_as_vec(x_i), _as_vec(x_j))
    e = diff / s
    ee = np.outer(e, e)
    return float(radial_coefficient_derivative(s, p)) * ee + float(
        radial_coefficient(s, p)
    ) / s * (np.eye(2) - ee)


def alpha_velocity_gradient(v_i, v_j, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the rotation angle with respect to ``v_i`` and ``v_j``.

    Zero when either velocity vanishes or the pair is (anti)parallel, where
    the angle has a kink.
    """
    v_i, v_j = _as_vec(v_i), _as_vec(v_j)
    return _alpha_grad(v_i, v_j, lam), _alpha_grad(v_j, v_i, lam)


def _alpha_grad(v_i: np.ndarray, v_j: np.ndarray, lam: float) -> np.ndarray:
    ni, nj = np.linalg.norm(v_i), np.linalg.norm(v_j)
    if ni < ZERO_VELOCITY or nj < ZERO_VELOCITY:
        return np.zeros(2)
    cross = abs(v_i[0] * v_j[1] - v_i[1] * v_j[0])
    if cross < PARALLEL_SIN * ni * nj:
        return np.zeros(2)
    dot = v_i @ v_j
    return -lam / cross * (v_j - dot * v_i / ni**2)


def rotation_velocity_gradient(v_i, v_j, lam: float) -> VelocityGradientTensor:
    v_i, v_j = _as_vec(v_i), _as_vec(v_j)
    grad = _alpha_grad(v_i, v_j, lam)
    dM = _rotation_derivative(rotation_angle(v_i, v_j, lam))
    return VelocityGradientTensor(dM[:, :, None] * grad[None, None, :])


def acceleration(i: int, positions, velocities, desired, params: ModelParams) -> np.ndarray:
    """Acceleration of agent ``i``; the interaction sum is scaled by ``1/N``."""
    X = np.asarray(positions, dtype=float)
    V = np.asarray(velocities, dtype=float)
    W = np.asarray(desired, dtype=float)
    n = len(X)
    total = np.zeros(2)
    for j in range(n):
        if j == i:
            continue
        M = rotation_matrix(V[i], V[j], params.lam)
        total += M @ interaction_force(params.d, X[i], X[j], params)
    return params.tau * (W[i] - V[i]) - total / n


def force_control_derivatives(i: int, positions, velocities, params: ModelParams):
    """Partial derivatives of agent ``i``'s acceleration with respect to ``(lam, A, R)``."""
    X = np.asarray(positions, dtype=float)
    V = np.asarray(velocities, dtype=float)
    n = len(X)
    d_lam, d_A, d_R = np.zeros(2), np.zeros(2), np.zeros(2)
    for j in range(n):
        if j == i:
            continue
        diff, s = _separation(X[i], X[j])
        e = diff / s
        M = rotation_matrix(V[i], V[j], params.lam)
        d_A -= M @ e * np.exp((params.d - s) / params.a) / params.a
        d_R += M @ e * np.exp((params.d - s) / params.r) / params.r
        c = _cos_between(V[i], V[j])
        if c is not None:
            alpha = params.lam * np.arccos(c)
            K = float(radial_coefficient(s, params)) * e
            d_lam -= _rotation_derivative(alpha) @ K * np.arccos(c)
    return d_lam / n, d_A / n, d_R / n


# ---------------------------------------------------------------------------
# all-pairs evaluation used by the integrators


@dataclass
class PairGeometry:
    """Pairwise quantities of one configuration; arrays are ``(N, N)`` or ``(N, N, 2)``.

    Diagonal entries are zero so sums over ``j`` can run over all indices.
    """

    unit: np.ndarray  # (x_i - x_j)/s
    dist: np.ndarray
    inv_dist: np.ndarray  # 1/s, zero on the diagonal
    coef: np.ndarray  # radial coefficient f(s)
    dcoef: np.ndarray  # f'(s)
    exp_a: np.ndarray  # exp((d - s)/a)
    exp_r: np.ndarray  # exp((d - s)/r)
    arccos: np.ndarray  # arccos of the velocity cosine, 0 in the else branch
    cos: np.ndarray  # cos(alpha)
    sin: np.ndarray  # sin(alpha)
    alpha_grad: np.ndarray  # d alpha_ij / d v_i, (N, N, 2)


def pairwise_geometry(X: np.ndarray, V: np.ndarray, params: ModelParams, with_gradient: bool = False) -> PairGeometry:
    n = len(X)
    diff = X[:, None, :] - X[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    off = ~np.eye(n, dtype=bool)
    if n > 1 and np.any(dist[off] == 0.0):
        i, j = np.argwhere((dist == 0.0) & off)[0]
        raise SingularSeparationError(f"agents {i} and {j} coincide at {X[i].tolist()}")
    safe = np.where(off, dist, 1.0)
    unit = diff / safe[..., None]
    exp_a = np.where(off, np.exp((params.d - safe) / params.a), 0.0)
    exp_r = np.where(off, np.exp((params.d - safe) / params.r), 0.0)
    coef = params.A / params.a * exp_a - params.R / params.r * exp_r
    dcoef = -params.A / params.a**2 * exp_a + params.R / params.r**2 * exp_r

    speed = np.hypot(V[:, 0], V[:, 1])
    moving = speed >= ZERO_VELOCITY
    active = moving[:, None] & moving[None, :] & off
    dots = V @ V.T
    norms = np.where(active, speed[:, None] * speed[None, :], 1.0)
    cosang = np.clip(dots / norms, -1.0, 1.0)
    arccos = np.where(active, np.arccos(cosang), 0.0)
    alpha = params.lam * arccos

    if with_gradient:
        cross = V[:, None, 0] * V[None, :, 1] - V[:, None, 1] * V[None, :, 0]
        regular = active & (np.abs(cross) >= PARALLEL_SIN * norms)
        safe_cross = np.where(regular, np.abs(cross), 1.0)
        safe_speed2 = np.where(moving, speed**2, 1.0)
        proj = V[None, :, :] - dots[..., None] * V[:, None, :] / safe_speed2[:, None, None]
        alpha_grad = np.where(regular[..., None], -params.lam / safe_cross[..., None] * proj, 0.0)
    else:
        alpha_grad = np.zeros((n, n, 2))
    inv_dist = np.where(off, 1.0 / safe, 0.0)
    return PairGeometry(unit, dist, inv_dist, coef, dcoef, exp_a, exp_r, arccos, np.cos(alpha), np.sin(alpha), alpha_grad)


def rotate(cos: np.ndarray, sin: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply ``M`` entrywise to ``vec[..., 2]``."""
    return np.stack((cos * vec[..., 0] - sin * vec[..., 1], sin * vec[..., 0] + cos * vec[..., 1]), axis=-1)


def rotate_transpose(cos: np.ndarray, sin: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.stack((cos * vec[..., 0] + sin * vec[..., 1], -sin * vec[..., 0] + cos * vec[..., 1]), axis=-1)


def rotate_derivative(cos: np.ndarray, sin: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Apply ``dM/d alpha`` entrywise."""
    return np.stack((-sin * vec[..., 0] - cos * vec[..., 1], cos * vec[..., 0] - sin * vec[..., 1]), axis=-1)


def position_jacobian_apply(geom: PairGeometry, y: np.ndarray) -> np.ndarray:
    """``dK_ij/dx_i @ y_ij`` for every pair; ``y`` has shape ``(N, N, 2)``."""
    e = geom.unit
    radial = np.einsum("ijc,ijc->ij", e, y)
    return geom.dcoef[..., None] * radial[..., None] * e + (geom.coef * geom.inv_dist)[..., None] * (
        y - radial[..., None] * e
    )


def interaction_sum(geom: PairGeometry) -> np.ndarray:
    """``1/N sum_j M_ij K_ij`` for every agent, shape ``(N, 2)``."""
    n = len(geom.dist)
    K = geom.coef[..., None] * geom.unit
    return rotate(geom.cos, geom.sin, K).sum(axis=1) / n


def interaction_field(X: np.ndarray, V: np.ndarray, params: ModelParams) -> np.ndarray:
    """``1/N sum_j M_ij K_ij`` straight from positions and velocities.

    Same value as ``interaction_sum(pairwise_geometry(X, V, params))`` with
    fewer temporaries; this is the inner loop of the simulator.
    """
    n = len(X)
    x, y = X[:, 0], X[:, 1]
    dx = x[:, None] - x
    dy = y[:, None] - y
    dist = np.sqrt(dx * dx + dy * dy)
    np.fill_diagonal(dist, np.inf)
    if n > 1 and not np.all(dist > 0.0):
        i, j = np.argwhere(dist == 0.0)[0]
        raise SingularSeparationError(f"agents {i} and {j} coincide at {X[i].tolist()}")
    gap = params.d - dist
    g = (params.A / params.a * np.exp(gap / params.a) - params.R / params.r * np.exp(gap / params.r)) / dist
    vx, vy = V[:, 0], V[:, 1]
    speed = np.sqrt(vx * vx + vy * vy)
    dots = np.multiply.outer(vx, vx) + np.multiply.outer(vy, vy)
    norms = np.multiply.outer(speed, speed)
    if speed.min() >= ZERO_VELOCITY:
        alpha = np.arccos(np.clip(dots / norms, -1.0, 1.0))
    else:
        moving = speed >= ZERO_VELOCITY
        ok = np.multiply.outer(moving, moving)
        alpha = np.where(ok, np.arccos(np.clip(dots / np.where(ok, norms, 1.0), -1.0, 1.0)), 0.0)
    np.fill_diagonal(alpha, 0.0)
    alpha *= params.lam
    ca, sa = np.cos(alpha), np.sin(alpha)
    kx, ky = g * dx, g * dy
    out = np.empty((n, 2))
    out[:, 0] = (ca * kx - sa * ky).sum(axis=1)
    out[:, 1] = (sa * kx + ca * ky).sum(axis=1)
    return out / n


def accelerations(X, V, W, params: ModelParams, geom: PairGeometry | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if geom is None:
        geom = pairwise_geometry(X, V, params)
    return params.tau * (np.asarray(W, dtype=float) - V) - interaction_sum(geom)


def control_derivatives(geom: PairGeometry, params: ModelParams) -> np.ndarray:
    """``dF_v/du`` for all agents, shape ``(3, N, 2)`` ordered ``(lam, A, R)``."""
    n = len(geom.dist)
    K = geom.coef[..., None] * geom.unit
    d_lam = -rotate_derivative(geom.cos, geom.sin, K * geom.arccos[..., None]).sum(axis=1)
    d_A = -rotate(geom.cos, geom.sin, geom.unit * (geom.exp_a / params.a)[..., None]).sum(axis=1)
    d_R = rotate(geom.cos, geom.sin, geom.unit * (geom.exp_r / params.r)[..., None]).sum(axis=1)
    return np.stack((d_lam, d_A, d_R)) / n


def interaction_vjp(geom: PairGeometry, y: np.ndarray, coupling_sign: float = 1.0):
    """Pull ``y`` back through ``S = 1/N sum_j M_ij K_ij``: returns ``(y^T dS/dX, y^T dS/dV)``.

    Uses ``K_ji = -K_ij`` and ``alpha_ji = alpha_ij``, so each pair enters
    through ``y_i - y_j``.
    """
    n = len(geom.dist)
    delta = y[:, None, :] - y[None, :, :]
    gx = position_jacobian_apply(geom, rotate_transpose(geom.cos, geom.sin, delta)).sum(axis=1) / n
    K = geom.coef[..., None] * geom.unit
    weights = np.einsum("ijc,ijc->ij", delta, rotate_derivative(geom.cos, geom.sin, K))
    gv = coupling_sign * np.einsum("ij,ijc->ic", weights, geom.alpha_grad) / n
    return gx, gv
