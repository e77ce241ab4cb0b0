"""Oriented-rectangle collision testing and the sequence collision rate."""

from __future__ import annotations

import math

import numpy as np

from ..core import AgentState, SceneSequence

EGO_LENGTH = 4.6
EGO_WIDTH = 1.9


def obb_corners(cx: float, cy: float, heading: float,
                length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def rects_collide(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corners.

    Axes are the edge normals of both rectangles; overlap on every axis means
    collision (touching counts as overlap).
    """
    for rect in (a, b):
        for i in range(4):
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def agents_collide(a: AgentState, b: AgentState) -> bool:
    # Cheap reject: circumscribed circles.
    r = (math.hypot(a.length, a.width) + math.hypot(b.length, b.width)) / 2.0
    if (a.x - b.x) ** 2 + (a.y - b.y) ** 2 > r * r:
        return False
    return rects_collide(obb_corners(a.x, a.y, a.heading, a.length, a.width),
                         obb_corners(b.x, b.y, b.heading, b.length, b.width))


def collision_rate(sequences: list[SceneSequence]) -> float:
    """Fraction of road users involved in at least one overlap, sequence-mean.

    Every frame tests all active agent pairs plus each agent against the ego
    rectangle (at the origin of its frame); an agent slot counts once per
    sequence no matter how many frames it collides in.
    """
    rates = []
    for seq in sequences:
        ever_active: set[int] = set()
        collided: set[int] = set()
        ego = AgentState(x=0.0, y=0.0, heading=0.0, length=EGO_LENGTH,
                         width=EGO_WIDTH)
        for f in seq.frames:
            active = [(i, a) for i, a in enumerate(f.agents) if a.active]
            ever_active.update(i for i, _ in active)
            for j, (i, a) in enumerate(active):
                if agents_collide(a, ego):
                    collided.add(i)
                for i2, b in active[j + 1:]:
                    if agents_collide(a, b):
                        collided.add(i)
                        collided.add(i2)
        if ever_active:
            rates.append(len(collided) / len(ever_active))
    return float(np.mean(rates)) if rates else 0.0
