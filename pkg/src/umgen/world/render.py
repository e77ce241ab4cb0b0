"""Deterministic top-down pseudo-camera rendering of the forward region.

The image is a pure function of a frame's raster map and agent table: road
classes map to a fixed palette, agents draw as filled oriented rectangles by
category, the ego marker sits at bottom-center.  One pixel covers one meter.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core import AgentCategory, AgentState, Profile, PseudoImage, RasterMap, SceneFrame

# Cell class -> RGB (u8).
PALETTE = np.array([
    [24, 24, 24],      # empty
    [90, 90, 96],      # lane
    [220, 220, 220],   # stop line
    [250, 250, 150],   # crosswalk
    [70, 60, 85],      # intersection
    [240, 200, 60],    # middle lane line
    [120, 160, 200],   # lane connector
], dtype=np.uint8)

AGENT_COLOR = {
    AgentCategory.VEHICLE: np.array([0, 180, 40], dtype=np.uint8),
    AgentCategory.PEDESTRIAN: np.array([255, 140, 0], dtype=np.uint8),
    AgentCategory.CYCLIST: np.array([255, 90, 60], dtype=np.uint8),
}
EGO_COLOR = np.array([220, 20, 20], dtype=np.uint8)
EGO_DIMS = (4.6, 1.9)
METERS_PER_PIXEL = 1.0


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(h)
    cols = np.arange(w)
    x = (h - rows - 0.5)[:, None] * METERS_PER_PIXEL * np.ones((1, w))
    y = np.ones((h, 1)) * ((w / 2.0 - cols - 0.5)[None, :] * METERS_PER_PIXEL)
    return x, y


def _paint_rect(img: np.ndarray, px: np.ndarray, py: np.ndarray,
                cx: float, cy: float, heading: float,
                length: float, width: float, color: np.ndarray) -> None:
    ct, st = math.cos(heading), math.sin(heading)
    rx = (px - cx) * ct + (py - cy) * st
    ry = -(px - cx) * st + (py - cy) * ct
    inside = (np.abs(rx) <= length / 2.0) & (np.abs(ry) <= width / 2.0)
    img[inside] = color


def render_view(raster: RasterMap, agents: Sequence[AgentState],
                profile: Profile) -> PseudoImage:
    h, w = profile.image_h, profile.image_w
    px, py = _pixel_centers(h, w)
    n = profile.map_cells
    res = raster.resolution
    rcell = np.clip(np.rint(n // 2 - px / res).astype(int), 0, n - 1)
    ccell = np.clip(np.rint(n // 2 + py / res).astype(int), 0, n - 1)
    img = PALETTE[raster.cells[rcell, ccell]].copy()

    for a in agents:
        if a.active:
            _paint_rect(img, px, py, a.x, a.y, a.heading, a.length, a.width,
                        AGENT_COLOR[a.category])
    _paint_rect(img, px, py, 0.0, 0.0, 0.0, EGO_DIMS[0], EGO_DIMS[1], EGO_COLOR)
    return PseudoImage(img.astype(np.float32) / 255.0)


def render_image(frame: SceneFrame, profile: Profile) -> PseudoImage:
    return render_view(frame.map, frame.agents, profile)
