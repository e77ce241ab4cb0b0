"""Procedural grid road network and its ego-centered rasterization.

Roads run along both axes at a fixed pitch.  Every world point classifies
deterministically into one of the seven cell classes, so rasterization at any
pose is a pure function and windows tile periodically beyond the seeded area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import (
    CELL_CROSSWALK, CELL_EMPTY, CELL_INTERSECTION, CELL_LANE,
    CELL_LANE_CONNECTOR, CELL_MIDDLE_LINE, CELL_STOP_LINE, Profile, RasterMap,
)

# Geometry constants (meters).
PITCH = 64.0            # distance between parallel road centerlines
ROAD_HALF = 4.0         # road half-width (two 4 m lanes)
LANE_OFFSET = 2.0       # lane centerline offset from the road center
CROSSWALK_BAND = (4.0, 6.0)   # distance from the crossing road's center
STOPLINE_BAND = (6.0, 7.0)
MIDDLE_HALF = 0.3       # middle-lane-line half width
CONNECTOR_HALF = 0.8    # lane-connector half width inside the box
SIDEWALK_OFFSET = 6.0   # pedestrian ring offset from road centers
CYCLE_OFFSET = 4.5      # cyclist ring offset from road centers


@dataclass(frozen=True)
class RoadNetwork:
    blocks: int = 4
    seed: int = 0

    @property
    def extent(self) -> float:
        return self.blocks * PITCH


def build_world(seed: int, blocks: int = 4) -> RoadNetwork:
    return RoadNetwork(blocks=blocks, seed=seed)


def _axis_dist(coord: np.ndarray) -> np.ndarray:
    """Signed distance to the nearest road centerline along one axis."""
    return (coord + PITCH / 2.0) % PITCH - PITCH / 2.0


def classify_points(world: RoadNetwork, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cell class for arbitrary world points (vectorized)."""
    dx = np.abs(_axis_dist(np.asarray(x, dtype=np.float64)))   # to vertical roads
    dy = np.abs(_axis_dist(np.asarray(y, dtype=np.float64)))   # to horizontal roads
    on_v = dx <= ROAD_HALF
    on_h = dy <= ROAD_HALF
    in_box = on_v & on_h

    out = np.zeros(np.broadcast(dx, dy).shape, dtype=np.uint8)
    # Plain road surface first, then overlays in priority order.
    out[on_h | on_v] = CELL_LANE
    mid_h = on_h & ~in_box & (dy <= MIDDLE_HALF)
    mid_v = on_v & ~in_box & (dx <= MIDDLE_HALF)
    out[mid_h | mid_v] = CELL_MIDDLE_LINE
    stop_h = on_h & (dx > STOPLINE_BAND[0]) & (dx <= STOPLINE_BAND[1])
    stop_v = on_v & (dy > STOPLINE_BAND[0]) & (dy <= STOPLINE_BAND[1])
    out[stop_h | stop_v] = CELL_STOP_LINE
    cross_h = on_h & (dx > CROSSWALK_BAND[0]) & (dx <= CROSSWALK_BAND[1])
    cross_v = on_v & (dy > CROSSWALK_BAND[0]) & (dy <= CROSSWALK_BAND[1])
    out[cross_h | cross_v] = CELL_CROSSWALK
    out[in_box] = CELL_INTERSECTION
    conn = in_box & ((np.abs(dy - LANE_OFFSET) <= CONNECTOR_HALF)
                     | (np.abs(dx - LANE_OFFSET) <= CONNECTOR_HALF))
    out[conn] = CELL_LANE_CONNECTOR
    return out


def render_map(world: RoadNetwork, pose: tuple[float, float, float],
               profile: Profile) -> RasterMap:
    """Rasterize the ego-centered window, heading pointing up the row axis."""
    n = profile.map_cells
    res = profile.map_resolution
    ex, ey, th = pose
    rows = np.arange(n)
    cols = np.arange(n)
    fx = (n // 2 - rows)[:, None] * res * np.ones((1, n))   # forward meters
    fy = np.ones((n, 1)) * ((cols - n // 2)[None, :] * res)  # left meters
    ct, st = math.cos(th), math.sin(th)
    wx = ex + fx * ct - fy * st
    wy = ey + fx * st + fy * ct
    cells = classify_points(world, wx, wy)
    return RasterMap(cells, res, n * res)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi
