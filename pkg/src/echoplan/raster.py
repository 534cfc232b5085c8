"""Ego-frame semantic rasterization and rectangle footprint geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

K_SEM = 5
CH_DRIVABLE, CH_AGENT, CH_LANE_SIN, CH_LANE_COS, CH_ROUTE = range(K_SEM)
ROUTE_HALF_WIDTH = 1.0


@dataclass(frozen=True)
class GridSpec:
    H: int = 32
    W: int = 32
    cell_size: float = 0.5
    K_sem: int = K_SEM

    def __post_init__(self):
        if self.H <= 0 or self.W <= 0:
            raise ValueError(f"grid dims must be positive, got H={self.H} W={self.W}")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.K_sem != K_SEM:
            raise ValueError(f"K_sem is fixed at {K_SEM}, got {self.K_sem}")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame (x, y) of every cell center, each shaped (H, W).

        Row index i runs along +x (forward), column index j along +y (left);
        the ego reference point sits on the grid center.
        """
        xs = (np.arange(self.H) + 0.5 - self.H / 2) * self.cell_size
        ys = (np.arange(self.W) + 0.5 - self.W / 2) * self.cell_size
        return np.meshgrid(xs, ys, indexing="ij")

    def scaled(self, factor: int) -> "GridSpec":
        return GridSpec(self.H * factor, self.W * factor, self.cell_size, self.K_sem)


@dataclass
class RoadGeometry:
    centerlines: list  # [(points (N, 2), headings (N,)), ...] in world frame
    half_width: float
    route: np.ndarray  # (M, 2) remaining route polyline, world frame


def rect_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners (..., 4, 2) of oriented rectangles centered at (x, y)."""
    x, y, heading = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, heading)))
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    cx = x[..., None] + c[..., None] * local[:, 0] - s[..., None] * local[:, 1]
    cy = y[..., None] + s[..., None] * local[:, 0] + c[..., None] * local[:, 1]
    return np.stack([cx, cy], axis=-1)


def rects_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for broadcastable rectangle corner arrays (..., 4, 2)."""
    a, b = np.broadcast_arrays(a, b)
    overlap = np.ones(a.shape[:-2], dtype=bool)
    for poly in (a, b):
        for k in (0, 1):
            edge = poly[..., k + 1, :] - poly[..., k, :]
            axis = np.stack([-edge[..., 1], edge[..., 0]], axis=-1)
            pa = np.einsum("...ij,...j->...i", a, axis)
            pb = np.einsum("...ij,...j->...i", b, axis)
            sep = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
            overlap &= ~sep
    return overlap


def points_in_rect(px, py, x, y, heading, length, width) -> np.ndarray:
    """Boolean mask of points inside (boundary inclusive) one oriented rectangle."""
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = px - x, py - y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= length / 2.0) & (np.abs(ly) <= width / 2.0)


def footprint_mask(grid: GridSpec, x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    """Cells of `grid` whose centers fall inside an ego-frame rectangle."""
    cx, cy = grid.cell_centers()
    return points_in_rect(cx, cy, x, y, heading, length, width)


def ego_footprint_mask(grid: GridSpec, length: float = 4.0, width: float = 2.0) -> np.ndarray:
    return footprint_mask(grid, 0.0, 0.0, 0.0, length, width)


def _world_cell_centers(ego, grid: GridSpec):
    cx, cy = grid.cell_centers()
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return ego.x + c * cx - s * cy, ego.y + s * cx + c * cy


def _nearest(px, py, pts: np.ndarray, radius: float):
    """Distance and index of the nearest polyline vertex (inf beyond `radius`)."""
    tree = cKDTree(pts)
    d, k = tree.query(np.stack([px.ravel(), py.ravel()], axis=1), distance_upper_bound=radius)
    k = np.minimum(k, len(pts) - 1)
    return d.reshape(px.shape), k.reshape(px.shape)


def rasterize_frame(ego, agents, road_geometry: RoadGeometry, grid: GridSpec) -> np.ndarray:
    """Semantic ego-frame raster (H, W, 5) float32.

    Channels: drivable, agent occupancy, lane heading sin/cos relative to the
    ego heading (zero off-road), and the remaining-route corridor.
    """
    px, py = _world_cell_centers(ego, grid)
    out = np.zeros((grid.H, grid.W, K_SEM), dtype=np.float64)
    reach = math.hypot(grid.H, grid.W) * grid.cell_size / 2.0 + road_geometry.half_width + 1.0

    best = np.full(px.shape, np.inf)
    lane_heading = np.zeros(px.shape)
    for pts, headings in road_geometry.centerlines:
        d, k = _nearest(px, py, pts, reach)
        closer = d < best
        best = np.where(closer, d, best)
        lane_heading = np.where(closer, headings[k], lane_heading)
    drivable = best <= road_geometry.half_width
    rel = lane_heading - ego.heading
    out[..., CH_DRIVABLE] = drivable
    out[..., CH_LANE_SIN] = np.where(drivable, np.sin(rel), 0.0)
    out[..., CH_LANE_COS] = np.where(drivable, np.cos(rel), 0.0)

    occ = np.zeros(px.shape, dtype=bool)
    for a in agents:
        occ |= points_in_rect(px, py, a.x, a.y, a.heading, a.length, a.width)
    out[..., CH_AGENT] = occ

    if len(road_geometry.route):
        d, _ = _nearest(px, py, road_geometry.route, reach)
        out[..., CH_ROUTE] = d <= ROUTE_HALF_WIDTH
    return out.astype(np.float32)
