"""Bounded Voronoi cells, Voronoi density and fundamental-diagram samples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from ._validation import check_points
from .simulator import Rect, Trajectory

logger = logging.getLogger(__name__)

_CLIP_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Generator points cannot define a Voronoi diagram (e.g. duplicates)."""


@dataclass(frozen=True)
class VoronoiCell:
    owner: int
    polygon: np.ndarray  # (k, 2), counterclockwise; empty if the cell misses the region
    area: float

    @property
    def empty(self) -> bool:
        return len(self.polygon) < 3 or self.area <= 0.0

    def contains(self, query, tol: float = 1e-12) -> bool:
        if self.empty:
            return False
        q = np.asarray(query, dtype=float)
        edges = np.roll(self.polygon, -1, axis=0) - self.polygon
        rel = q - self.polygon
        return bool(np.all(edges[:, 0] * rel[:, 1] - edges[:, 1] * rel[:, 0] >= -tol))


@dataclass(frozen=True)
class FDSample:
    t: float
    agent: int
    density: float
    speed: float


@dataclass
class FundamentalDiagram:
    samples: list[FDSample] = field(default_factory=list)
    skipped: list[tuple[float, str]] = field(default_factory=list)
    frames: list[tuple[float, list[VoronoiCell]]] = field(default_factory=list)

    @property
    def densities(self) -> np.ndarray:
        return np.array([s.density for s in self.samples])

    @property
    def speeds(self) -> np.ndarray:
        return np.array([s.speed for s in self.samples])

    def correlation(self) -> float:
        """Pearson correlation of density and speed; NaN if undefined."""
        if len(self.samples) < 2:
            return float("nan")
        rho, v = self.densities, self.speeds
        if np.ptp(rho) == 0 or np.ptp(v) == 0:
            return float("nan")
        return float(np.corrcoef(rho, v)[0, 1])


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_halfplane(poly: np.ndarray, normal: np.ndarray, offset: float, tol: float = _CLIP_TOL) -> np.ndarray:
    """Keep the part of a convex polygon with ``normal . p <= offset``."""
    if len(poly) == 0:
        return poly
    scale = max(1.0, abs(offset), float(np.max(np.abs(poly))) * float(np.max(np.abs(normal))))
    dist = poly @ normal - offset
    inside = dist <= tol * scale
    if inside.all():
        return poly
    if not inside.any():
        return np.empty((0, 2))
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        dp, dq = dist[k], dist[(k + 1) % n]
        if inside[k]:
            out.append(p)
        if inside[k] != inside[(k + 1) % n]:
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return _dedupe(np.asarray(out))


def _dedupe(poly: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    if len(poly) < 2:
        return poly
    keep = np.linalg.norm(poly - np.roll(poly, 1, axis=0), axis=1) > tol
    if not keep.any():
        return poly[:1]
    return poly[keep]


def clip_to_rect(poly, region: Rect) -> np.ndarray:
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    for normal, offset in (
        (np.array([1.0, 0.0]), region.xmax),
        (np.array([-1.0, 0.0]), -region.xmin),
        (np.array([0.0, 1.0]), region.ymax),
        (np.array([0.0, -1.0]), -region.ymin),
    ):
        poly = clip_halfplane(poly, normal, offset)
    return poly


def _rect_polygon(region: Rect) -> np.ndarray:
    return np.array(
        [[region.xmin, region.ymin], [region.xmax, region.ymin], [region.xmax, region.ymax], [region.xmin, region.ymax]]
    )


def _neighbours(points: np.ndarray) -> list[np.ndarray]:
    """Delaunay neighbours of each point; every other point if no triangulation exists."""
    n = len(points)
    everyone = [np.delete(np.arange(n), i) for i in range(n)]
    if n < 3:
        return everyone
    centred = points - points.mean(axis=0)
    scale = np.max(np.abs(centred))
    try:
        tri = Delaunay(centred / scale)
    except QhullError:
        # collinear generators: the bisectors of all pairs still define the cells
        return everyone
    indptr, indices = tri.vertex_neighbor_vertices
    nbrs = [indices[indptr[i]:indptr[i + 1]] for i in range(n)]
    if tri.coplanar.size:
        # points Qhull left out of the triangulation fall back to all pairs
        for i in set(tri.coplanar[:, 0].tolist()):
            nbrs[i] = everyone[i]
    return nbrs


def bounded_voronoi(points, region) -> list[VoronoiCell]:
    """Voronoi cells of ``points`` intersected with the rectangle ``region``.

    Each cell is the region cut by the perpendicular bisectors to the
    generator's Delaunay neighbours. Generators outside the region still shape
    the cells but may own an empty one.
    """
    region = Rect.coerce(region)
    P = check_points(points, "points", min_points=1)
    if len(np.unique(P, axis=0)) != len(P):
        raise DegenerateInputError("duplicate generator points")
    base = _rect_polygon(region)
    cells = []
    for i, nbrs in enumerate(_neighbours(P)):
        poly = base
        for j in nbrs:
            normal = P[j] - P[i]
            mid = 0.5 * (P[i] + P[j])
            poly = clip_halfplane(poly, normal, float(normal @ mid))
            if len(poly) == 0:
                break
        area = polygon_area(poly) if len(poly) >= 3 else 0.0
        if area <= 0.0:
            poly, area = np.empty((0, 2)), 0.0
        cells.append(VoronoiCell(i, poly, area))
    return cells


def density_at(cells: list[VoronoiCell], query) -> float:
    """Local density ``1/area`` of the cell containing ``query``; 0 outside all cells."""
    for cell in cells:
        if cell.contains(query):
            return 1.0 / cell.area
    return 0.0


def owner_at(cells: list[VoronoiCell], queries) -> np.ndarray:
    """Owner index of the first cell containing each query, ``-1`` if none."""
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    owner = np.full(len(Q), -1)
    for cell in cells:
        if cell.empty:
            continue
        edges = np.roll(cell.polygon, -1, axis=0) - cell.polygon
        rel = Q[:, None, :] - cell.polygon[None, :, :]
        cross = edges[None, :, 0] * rel[..., 1] - edges[None, :, 1] * rel[..., 0]
        hit = np.all(cross >= -1e-12, axis=1) & (owner < 0)
        owner[hit] = cell.owner
    return owner


def density_field(cells: list[VoronoiCell], queries) -> np.ndarray:
    owner = owner_at(cells, queries)
    areas = np.array([c.area for c in cells])
    out = np.zeros(len(owner))
    hit = owner >= 0
    out[hit] = 1.0 / areas[owner[hit]]
    return out


def fundamental_diagram(traj: Trajectory, region, sample_times, min_agents: int = 3,
                        keep_cells: bool = False) -> FundamentalDiagram:
    """Density/speed pairs of the agents inside ``region`` at each sample time.

    All agents generate the Voronoi diagram; only those inside the region
    contribute samples. Frames with fewer than ``min_agents`` agents in the
    region are skipped and recorded in ``skipped``. With ``keep_cells`` the
    cells of every sampled frame are kept in ``frames``.
    """
    region = Rect.coerce(region)
    fd = FundamentalDiagram()
    t0, dt = float(traj.times[0]), traj.dt
    for t in np.atleast_1d(np.asarray(sample_times, dtype=float)):
        k = int(round((t - t0) / dt)) if dt > 0 else 0
        if not 0 <= k <= traj.n_steps:
            raise ValueError(f"sample time {t} outside the trajectory [{t0}, {traj.times[-1]}]")
        X, V = traj.positions[k], traj.velocities[k]
        inside = np.nonzero(region.contains(X))[0]
        if len(inside) < min_agents:
            reason = f"only {len(inside)} agents in region at t={traj.times[k]:.6g}"
            logger.warning(reason)
            fd.skipped.append((float(traj.times[k]), reason))
            continue
        cells = bounded_voronoi(X, region)
        if keep_cells:
            fd.frames.append((float(traj.times[k]), cells))
        for i in inside:
            if cells[i].area > 0:
                fd.samples.append(FDSample(float(traj.times[k]), int(i), 1.0 / cells[i].area,
                                           float(np.hypot(*V[i]))))
    return fd


def cells_to_json(cells: list[VoronoiCell]) -> list[dict]:
    return [
        {"owner": c.owner, "area": c.area, "polygon": c.polygon.tolist()}
        for c in cells
        if not c.empty
    ]
