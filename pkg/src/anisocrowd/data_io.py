"""Pedestrian archive ingestion, resampling to the simulation grid, and CSV export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulator import Trajectory, n_steps_for

logger = logging.getLogger(__name__)

# Column layouts of known archive file families: (id, frame, x, y[, z]).
# Positions in those files are stored in centimeters.
KNOWN_LAYOUTS = {
    "archive": {"column_map": (0, 1, 2, 3), "unit_scale": 0.01, "frame_rate": 16.0},
    "archive-meters": {"column_map": (0, 1, 2, 3), "unit_scale": 1.0, "frame_rate": 16.0},
}


class ArchiveFormatError(ValueError):
    """A trajectory file could not be parsed."""


@dataclass
class ArchiveTrajectory:
    """Per-agent frame-sorted tracks in meters."""

    frame_rate: float
    unit_scale: float
    frames: dict[int, np.ndarray] = field(default_factory=dict)  # id -> (n,) int
    positions: dict[int, np.ndarray] = field(default_factory=dict)  # id -> (n, 2)

    @property
    def agent_ids(self) -> list[int]:
        return sorted(self.frames)

    def times(self, agent: int) -> np.ndarray:
        return self.frames[agent] / self.frame_rate

    def __len__(self) -> int:
        return len(self.frames)


def parse_archive(path, column_map=(0, 1, 2, 3), frame_rate: float = 16.0,
                  unit_scale: float = 0.01) -> ArchiveTrajectory:
    """Read whitespace-separated rows ``id frame x y [z]``.

    Lines starting with ``#`` and blank lines are ignored. ``column_map``
    gives the column indices of id, frame, x and y; anything else (such as a
    height column) is ignored.
    """
    if frame_rate <= 0:
        raise ValueError(f"frame_rate must be positive, got {frame_rate}")
    if len(column_map) < 4:
        raise ValueError("column_map needs the columns of id, frame, x and y")
    c_id, c_frame, c_x, c_y = (int(c) for c in column_map[:4])
    need = max(c_id, c_frame, c_x, c_y) + 1
    rows: dict[int, list[tuple[int, float, float]]] = {}
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            tokens = text.split()
            if len(tokens) < need:
                raise ArchiveFormatError(f"{path}:{lineno}: expected at least {need} columns, got {len(tokens)}")
            try:
                values = [float(t) for t in tokens]
            except ValueError as exc:
                raise ArchiveFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            ident, frame = values[c_id], values[c_frame]
            if ident != int(ident) or frame != int(frame):
                raise ArchiveFormatError(f"{path}:{lineno}: id and frame must be integers")
            x, y = values[c_x] * unit_scale, values[c_y] * unit_scale
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ArchiveFormatError(f"{path}:{lineno}: non-finite position")
            rows.setdefault(int(ident), []).append((int(frame), x, y))

    out = ArchiveTrajectory(frame_rate=float(frame_rate), unit_scale=float(unit_scale))
    for ident, track in rows.items():
        arr = np.array(track, dtype=float)
        order = np.argsort(arr[:, 0], kind="stable")
        frames = arr[order, 0].astype(int)
        dup = np.nonzero(np.diff(frames) == 0)[0]
        if dup.size:
            raise ArchiveFormatError(f"{path}: agent {ident} has duplicate frame {frames[dup[0]]}")
        out.frames[ident] = frames
        out.positions[ident] = arr[order, 1:3]
    return out


@dataclass
class ResampledData:
    trajectory: Trajectory
    agent_ids: list[int]
    dropped: list[int]


def resample(data: ArchiveTrajectory, t0: float, T: float, dt: float, agent_selection=None) -> ResampledData:
    """Linear interpolation of the selected tracks onto ``t0 + k dt``, ``k = 0..T/dt``.

    Agents whose track does not cover ``[t0, t0+T]`` are dropped. Velocities of
    the result are central differences of the interpolated positions.
    """
    K = n_steps_for(T, dt)
    grid = t0 + dt * np.arange(K + 1)
    ids = data.agent_ids if agent_selection is None else [int(a) for a in agent_selection]
    kept, dropped, tracks = [], [], []
    eps = 1e-9 * max(1.0, abs(grid[-1]))
    for ident in ids:
        if ident not in data.frames:
            dropped.append(ident)
            continue
        times = data.times(ident)
        if times[0] > grid[0] + eps or times[-1] < grid[-1] - eps:
            dropped.append(ident)
            continue
        pos = data.positions[ident]
        tracks.append(np.column_stack((np.interp(grid, times, pos[:, 0]), np.interp(grid, times, pos[:, 1]))))
        kept.append(ident)
    if not kept:
        raise ValueError(f"no agent covers the window [{t0}, {t0 + T}]")
    if dropped:
        logger.info("dropped %d of %d agents not covering [%g, %g]", len(dropped), len(ids), t0, t0 + T)
    positions = np.stack(tracks, axis=1)
    if K >= 1:
        velocities = np.gradient(positions, dt, axis=0)
    else:
        velocities = np.zeros_like(positions)
    return ResampledData(Trajectory(grid, positions, velocities), kept, dropped)


def direction_groups(data: ArchiveTrajectory, window=None) -> dict[int, str]:
    """Label agents by the sign of their dominant displacement axis (``+x``, ``-y``, ...)."""
    labels = {}
    for ident in data.agent_ids:
        sel = _window_mask(data.times(ident), window)
        pos = data.positions[ident][sel]
        if len(pos) < 2:
            continue
        disp = pos[-1] - pos[0]
        axis = int(np.argmax(np.abs(disp)))
        labels[ident] = ("+" if disp[axis] >= 0 else "-") + "xy"[axis]
    return labels


def _window_mask(times: np.ndarray, window) -> np.ndarray:
    if window is None:
        return np.ones(len(times), dtype=bool)
    lo, hi = window
    return (times >= lo - 1e-12) & (times <= hi + 1e-12)


def agent_mean_velocity(data: ArchiveTrajectory, ident: int, window=None) -> np.ndarray | None:
    times = data.times(ident)
    sel = _window_mask(times, window)
    if np.count_nonzero(sel) < 2:
        return None
    t, pos = times[sel], data.positions[ident][sel]
    return (pos[-1] - pos[0]) / (t[-1] - t[0])


def estimate_mean_velocity(data: ArchiveTrajectory, window=None, groups: dict | None = None) -> dict:
    """Average of per-agent displacement/duration within each group.

    ``groups`` maps agent id to a label; by default agents are grouped by
    direction of motion. Agents with fewer than two frames in the window are
    skipped with a warning.
    """
    if groups is None:
        groups = direction_groups(data, window)
    sums: dict = {}
    for ident, label in groups.items():
        if ident not in data.frames:
            continue
        v = agent_mean_velocity(data, ident, window)
        if v is None:
            logger.warning("agent %s has fewer than 2 frames in the window; skipped", ident)
            continue
        sums.setdefault(label, []).append(v)
    return {label: np.mean(vs, axis=0) for label, vs in sums.items()}


def export_trajectory(traj: Trajectory, path) -> Path:
    """Write ``t,agent,x,y,vx,vy`` rows with 17 significant digits."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "agent", "x", "y", "vx", "vy"])
            for k, t in enumerate(traj.times):
                for i in range(traj.n_agents):
                    x, y = traj.positions[k, i]
                    vx, vy = traj.velocities[k, i]
                    writer.writerow([_fmt(t), i, _fmt(x), _fmt(y), _fmt(vx), _fmt(vy)])
    except OSError as exc:
        raise OSError(f"could not write trajectory to {path}: {exc}") from exc
    return path


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "agent", "x", "y", "vx", "vy"]:
            raise ArchiveFormatError(f"{path}: unexpected header {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        return Trajectory(np.zeros(0), np.zeros((0, 0, 2)), np.zeros((0, 0, 2)))
    arr = np.array(rows)
    times = np.unique(arr[:, 0])
    n = int(arr[:, 1].max()) + 1
    if len(arr) != len(times) * n:
        raise ArchiveFormatError(f"{path}: ragged trajectory table")
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order].reshape(len(times), n, 6)
    return Trajectory(times, arr[..., 2:4], arr[..., 4:6])


def export_csv(records, path, header) -> Path:
    """Write an iterable of row sequences under ``header``."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in records:
                writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return path


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"
