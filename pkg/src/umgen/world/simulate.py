"""Deterministic traffic simulation on the grid world.

Vehicles (ego included) follow exact geometric paths: straight lane segments
joined by quarter-circle turn arcs, with gap keeping per lane and a
deterministic per-intersection lock that serializes box crossings.
Pedestrians and cyclists loop on block rings outside the roadway, so no agent
pair can overlap by construction.  Poses are exact; per-frame ego actions are
recovered from consecutive poses and reproduce them when re-composed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..core import (
    AgentCategory, AgentState, EgoAction, Profile, SceneFrame, SceneSequence,
    write_dataset,
)
from ..errors import InputError
from .network import (
    CYCLE_OFFSET, LANE_OFFSET, PITCH, ROAD_HALF, SIDEWALK_OFFSET, RoadNetwork,
    render_map, wrap_angle,
)
from .render import render_view

FRAME_DT = 0.5          # seconds per frame
TURN_SPEED = 1.9        # m/s through arcs, keeps |dtheta| <= 0.25 rad/frame
RIGHT_RADIUS = 4.0
LEFT_RADIUS = 8.0
ENTRY_DIST = 6.0        # arc tangent point ahead of the crossing center
ACCEL = 4.0             # m/s^2 speed-tracking limit
GAP_MIN = 6.0           # bumper gap where following speed reaches the leader's
ACCEL_GAP = 4.0
APPROACH = 20.0         # lock-request distance ahead of the box entry
STOP_MARGIN = 4.0       # how far short of the box entry a waiting vehicle stops

VEHICLE_DIMS = (4.6, 1.9, 1.6)
CYCLIST_DIMS = (1.9, 0.7, 1.7)
PEDESTRIAN_DIMS = (0.6, 0.6, 1.75)
WALK_SPEED = 1.2
CYCLE_SPEED = 3.5


@dataclass
class _Seg:
    kind: str             # "line" | "arc"
    s0: float
    length: float
    # line: point + unit direction; arc: center, radius, start angle, signed sweep dir
    p: tuple[float, float] = (0.0, 0.0)
    u: tuple[float, float] = (1.0, 0.0)
    c: tuple[float, float] = (0.0, 0.0)
    r: float = 0.0
    a0: float = 0.0
    sweep: float = 1.0    # +1 ccw, -1 cw


@dataclass
class _Path:
    segs: list[_Seg]
    boxes: list[tuple[float, float, tuple[float, float]]]  # (s_enter, s_exit, center)
    slow: list[tuple[float, float]]                        # target-speed zones
    length: float

    def pose(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.length - 1e-9)
        for seg in self.segs:
            if s <= seg.s0 + seg.length or seg is self.segs[-1]:
                ds = s - seg.s0
                if seg.kind == "line":
                    return (seg.p[0] + seg.u[0] * ds, seg.p[1] + seg.u[1] * ds,
                            math.atan2(seg.u[1], seg.u[0]))
                ang = seg.a0 + seg.sweep * ds / seg.r
                x = seg.c[0] + seg.r * math.cos(ang)
                y = seg.c[1] + seg.r * math.sin(ang)
                heading = ang + seg.sweep * math.pi / 2.0
                return (x, y, wrap_angle(heading))
        raise InputError("arclength outside path")

    def lane_key(self, s: float) -> tuple | None:
        """Hashable lane identity while on a straight segment, else None."""
        for seg in self.segs:
            if s <= seg.s0 + seg.length or seg is self.segs[-1]:
                if seg.kind != "line":
                    return None
                horizontal = abs(seg.u[0]) > 0.5
                lateral = seg.p[1] if horizontal else seg.p[0]
                d = 1 if (seg.u[0] + seg.u[1]) > 0 else -1
                return (horizontal, round(lateral, 3), d)
        return None


def _rot(v: complex, heading_idx: int) -> complex:
    return v * (1j ** (heading_idx % 4))


def _build_vehicle_path(rng: np.random.Generator, start: complex,
                        heading_idx: int, total_len: float,
                        p_turn: tuple[float, float, float]) -> _Path:
    """Walk lane segments and turn arcs until ``total_len`` is covered.

    ``heading_idx``: 0=+x, 1=+y, 2=-x, 3=-y.  ``p_turn``: (straight, right,
    left) probabilities at each crossing.
    """
    segs: list[_Seg] = []
    boxes: list[tuple[float, float, tuple[float, float]]] = []
    slow: list[tuple[float, float]] = []
    s = 0.0
    pos = start
    hidx = heading_idx
    while s < total_len:
        u = 1j ** (hidx % 4)
        along = (pos * u.conjugate()).real
        # Next crossing center strictly ahead of the arc entry point.
        k = math.floor((along + ENTRY_DIST) / PITCH) + 1
        entry_along = k * PITCH - ENTRY_DIST
        run = entry_along - along
        segs.append(_Seg("line", s0=s, length=run, p=(pos.real, pos.imag),
                         u=(u.real, u.imag)))
        s += run
        pos += u * run
        # Crossing center in world coordinates.
        center = pos + u * ENTRY_DIST + _rot(complex(0, LANE_OFFSET), hidx)
        choice = rng.random()
        if choice < p_turn[0]:
            # straight through the box
            run = 2.0 * ENTRY_DIST
            segs.append(_Seg("line", s0=s, length=run, p=(pos.real, pos.imag),
                             u=(u.real, u.imag)))
            boxes.append((s + ENTRY_DIST - ROAD_HALF, s + ENTRY_DIST + ROAD_HALF,
                          (center.real, center.imag)))
            slow.append((s - 10.0, s + run))
            s += run
            pos += u * run
        elif choice < p_turn[0] + p_turn[1]:
            # right turn, radius 4, clockwise quarter
            c = center + _rot(complex(-ENTRY_DIST, -(LANE_OFFSET + RIGHT_RADIUS)), hidx)
            a0 = math.pi / 2.0 + hidx * math.pi / 2.0
            run = RIGHT_RADIUS * math.pi / 2.0
            segs.append(_Seg("arc", s0=s, length=run, c=(c.real, c.imag),
                             r=RIGHT_RADIUS, a0=a0, sweep=-1.0))
            boxes.append((s, s + run, (center.real, center.imag)))
            slow.append((s - 10.0, s + run))
            s += run
            pos = c + RIGHT_RADIUS * complex(math.cos(a0 - math.pi / 2.0),
                                             math.sin(a0 - math.pi / 2.0))
            hidx = (hidx - 1) % 4
        else:
            # left turn, radius 8, counter-clockwise quarter
            c = center + _rot(complex(-ENTRY_DIST, LEFT_RADIUS - LANE_OFFSET), hidx)
            a0 = -math.pi / 2.0 + hidx * math.pi / 2.0
            run = LEFT_RADIUS * math.pi / 2.0
            segs.append(_Seg("arc", s0=s, length=run, c=(c.real, c.imag),
                             r=LEFT_RADIUS, a0=a0, sweep=1.0))
            boxes.append((s, s + run, (center.real, center.imag)))
            slow.append((s - 10.0, s + run))
            s += run
            pos = c + LEFT_RADIUS * complex(math.cos(a0 + math.pi / 2.0),
                                            math.sin(a0 + math.pi / 2.0))
            hidx = (hidx + 1) % 4
    return _Path(segs=segs, boxes=boxes, slow=slow, length=s)


def _ring_path(x0: float, y0: float, x1: float, y1: float, ccw: bool) -> _Path:
    """Rectangular loop walked as four line segments (headings jump at corners)."""
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    if not ccw:
        corners = [corners[0]] + corners[1:][::-1]
    segs = []
    s = 0.0
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        run = abs(bx - ax) + abs(by - ay)
        ux = (bx - ax) / run
        uy = (by - ay) / run
        segs.append(_Seg("line", s0=s, length=run, p=(ax, ay), u=(ux, uy)))
        s += run
    return _Path(segs=segs, boxes=[], slow=[], length=s)


@dataclass
class _Actor:
    path: _Path
    s: float
    v: float
    cruise: float
    category: AgentCategory
    dims: tuple[float, float, float]
    loop: bool = False
    trace: list[tuple[float, float, float]] = field(default_factory=list)

    def pose(self) -> tuple[float, float, float]:
        s = self.s % self.path.length if self.loop else self.s
        return self.path.pose(s)


def _target_speed(actor: _Actor) -> float:
    for lo, hi in actor.path.slow:
        if lo <= actor.s <= hi:
            return TURN_SPEED
    return actor.cruise


def _step_vehicles(vehicles: list[_Actor], locks: dict) -> None:
    """Advance all road vehicles one frame with gap keeping and box locks."""
    lanes: dict[tuple, list[int]] = {}
    for i, a in enumerate(vehicles):
        key = a.path.lane_key(a.s)
        if key is not None:
            lanes.setdefault(key, []).append(i)
    targets = [_target_speed(a) for a in vehicles]

    for key, members in lanes.items():
        members.sort(key=lambda i: (vehicles[i].path.pose(vehicles[i].s)[0]
                                    + vehicles[i].path.pose(vehicles[i].s)[1])
                     * (1 if key[2] > 0 else -1))
        for back, front in zip(members[:-1], members[1:]):
            pa = vehicles[back].pose()
            pb = vehicles[front].pose()
            gap = math.hypot(pb[0] - pa[0], pb[1] - pa[1]) - vehicles[front].dims[0]
            if gap < 2.5:
                targets[back] = 0.0
            else:
                # Following speed that can always stop before closing the gap.
                safe = vehicles[front].v + math.sqrt(
                    2.0 * ACCEL_GAP * max(gap - GAP_MIN, 0.0))
                targets[back] = min(targets[back], safe)

    # Box locks: one vehicle inside each intersection at a time, granted to the
    # closest requester; a grant also requires a clear exit.
    requests: dict[tuple, list[tuple[float, int, float, float]]] = {}
    for i, a in enumerate(vehicles):
        for s_in, s_out, center in a.path.boxes:
            ck = (round(center[0], 1), round(center[1], 1))
            held = locks.get(ck)
            if held is not None and held[0] == i and held[1] == s_out and a.s > s_out:
                del locks[ck]
            if s_in - APPROACH <= a.s < s_out:
                held = locks.get(ck)
                if a.s >= s_in and held is not None and held[0] == i:
                    continue
                requests.setdefault(ck, []).append((s_in - a.s, i, s_in, s_out))
    for ck, reqs in requests.items():
        reqs.sort()
        for dist, i, s_in, s_out in reqs:
            holder = locks.get(ck)
            grant = holder is None or holder[0] == i
            if grant and holder is None:
                exit_pose = vehicles[i].path.pose(min(s_out + 2.0,
                                                      vehicles[i].path.length))
                for j, other in enumerate(vehicles):
                    if j == i:
                        continue
                    po = other.pose()
                    if math.hypot(po[0] - exit_pose[0], po[1] - exit_pose[1]) < 8.0:
                        grant = False
                        break
            if grant:
                locks[ck] = (i, s_out)
            else:
                # Without the lock, hold a speed that stops short of the box.
                room = s_in - STOP_MARGIN - vehicles[i].s
                if room < 1.0:
                    targets[i] = 0.0
                else:
                    targets[i] = min(targets[i],
                                     math.sqrt(2.0 * ACCEL_GAP * (room - 1.0)))

    for a, tgt in zip(vehicles, targets):
        a.v += min(max(tgt - a.v, -ACCEL * FRAME_DT), ACCEL * FRAME_DT)
        a.v = max(a.v, 0.0)
        a.s += a.v * FRAME_DT


def simulate_sequence(world: RoadNetwork, seed: int, length: int,
                      profile: Profile) -> SceneSequence:
    """Roll the world forward and package frames with stable agent slots."""
    if length < 2:
        raise InputError("sequence length must be >= 2")
    rng = np.random.default_rng([world.seed & 0xFFFFFFFF, seed & 0xFFFFFFFF])
    need = length * FRAME_DT * 9.0 + 4 * PITCH

    # Ego starts eastbound on a seeded horizontal road.
    road_y = float(rng.integers(0, world.blocks)) * PITCH
    # Start within reach of the first crossing so most windows include a turn.
    start_x = float(rng.uniform(30.0, PITCH - 18.0))
    ego = _Actor(
        path=_build_vehicle_path(rng, complex(start_x, road_y - LANE_OFFSET), 0,
                                 need, (0.3, 0.35, 0.35)),
        s=0.0, v=float(rng.uniform(4.0, 7.0)), cruise=float(rng.uniform(6.0, 8.5)),
        category=AgentCategory.VEHICLE, dims=VEHICLE_DIMS)

    vehicles = [ego]
    for i in range(6):
        hidx = int(rng.integers(0, 4))
        u = 1j ** hidx
        lane = _rot(complex(0, -LANE_OFFSET), hidx)
        base = complex(start_x, road_y) + complex(float(rng.uniform(-40, 60)),
                                                  float(rng.uniform(-40, 40)))
        # snap to the nearest road of the chosen orientation
        if hidx % 2 == 0:
            base = complex(base.real, round(base.imag / PITCH) * PITCH)
        else:
            base = complex(round(base.real / PITCH) * PITCH, base.imag)
        # Keep starts in the mid-block band, clear of any intersection box.
        u2 = 1j ** hidx
        along = (base * u2.conjugate()).real
        m = along % PITCH
        along += (8.0 + (m % 43.0)) - m
        base = u2 * along + 1j * u2 * (base * u2.conjugate()).imag
        start = base + lane
        for _ in range(8):
            p0 = start
            clear = all(abs(complex(*v.pose()[:2]) - p0) > 9.0 for v in vehicles)
            if clear:
                break
            along += 17.0
            base = u2 * along + 1j * u2 * (base * u2.conjugate()).imag
            start = base + lane
        else:
            continue
        vehicles.append(_Actor(
            path=_build_vehicle_path(rng, start, hidx, need, (0.7, 0.15, 0.15)),
            s=0.0, v=float(rng.uniform(3.0, 7.0)), cruise=float(rng.uniform(5.0, 8.0)),
            category=AgentCategory.VEHICLE, dims=VEHICLE_DIMS))

    others = []
    bi = math.floor(start_x / PITCH)
    bj = math.floor(road_y / PITCH)
    for i in range(4):
        cx = (bi + int(rng.integers(-1, 2))) * PITCH
        cy = (bj + int(rng.integers(-1, 2))) * PITCH
        ring = _ring_path(cx + SIDEWALK_OFFSET, cy + SIDEWALK_OFFSET,
                          cx + PITCH - SIDEWALK_OFFSET, cy + PITCH - SIDEWALK_OFFSET,
                          ccw=bool(rng.integers(0, 2)))
        s0 = float(rng.uniform(0, ring.length))
        while any(o.category is AgentCategory.PEDESTRIAN
                  and abs(complex(*o.pose()[:2]) - complex(*ring.pose(s0)[:2])) < 3.0
                  for o in others):
            s0 = (s0 + 11.0) % ring.length
        others.append(_Actor(path=ring, s=s0,
                             v=WALK_SPEED, cruise=WALK_SPEED, loop=True,
                             category=AgentCategory.PEDESTRIAN, dims=PEDESTRIAN_DIMS))
    for i in range(3):
        cx = (bi + int(rng.integers(-1, 2))) * PITCH
        cy = (bj + int(rng.integers(-1, 2))) * PITCH
        ring = _ring_path(cx + CYCLE_OFFSET, cy + CYCLE_OFFSET,
                          cx + PITCH - CYCLE_OFFSET, cy + PITCH - CYCLE_OFFSET,
                          ccw=bool(rng.integers(0, 2)))
        s0 = float(rng.uniform(0, ring.length))
        while any(o.category is AgentCategory.CYCLIST
                  and abs(complex(*o.pose()[:2]) - complex(*ring.pose(s0)[:2])) < 6.0
                  for o in others):
            s0 = (s0 + 19.0) % ring.length
        others.append(_Actor(path=ring, s=s0,
                             v=CYCLE_SPEED, cruise=CYCLE_SPEED, loop=True,
                             category=AgentCategory.CYCLIST, dims=CYCLIST_DIMS))

    # --- roll the world ----------------------------------------------------
    locks: dict = {}
    all_actors = vehicles + others
    for t in range(length):
        for a in all_actors:
            a.trace.append(a.pose())
        _step_vehicles(vehicles, locks)
        for a in others:
            a.s += a.v * FRAME_DT

    ego_poses = ego.trace
    agents_world = all_actors[1:]

    # World velocities from forward differences (exact per-frame integration).
    def velocity(a: _Actor, t: int) -> tuple[float, float]:
        if t < length - 1:
            p0, p1 = a.trace[t], a.trace[t + 1]
        else:
            p0, p1 = a.trace[t - 1], a.trace[t]
        return ((p1[0] - p0[0]) / FRAME_DT, (p1[1] - p0[1]) / FRAME_DT)

    # Slot assignment: nearest mean distance over the window, stable order.
    def mean_dist(a: _Actor) -> float:
        return float(np.mean([math.hypot(p[0] - e[0], p[1] - e[1])
                              for p, e in zip(a.trace, ego_poses)]))

    ranked = sorted(range(len(agents_world)),
                    key=lambda i: (mean_dist(agents_world[i]), i))
    slots = ranked[:profile.n_agents]

    frames = []
    for t in range(length):
        ex, ey, eth = ego_poses[t]
        ct, st = math.cos(eth), math.sin(eth)
        agent_states = []
        for idx in slots:
            a = agents_world[idx]
            px, py, ph = a.trace[t]
            rx = (px - ex) * ct + (py - ey) * st
            ry = -(px - ex) * st + (py - ey) * ct
            if abs(rx) > 64.0 or abs(ry) > 64.0:
                agent_states.append(AgentState())
                continue
            vx_w, vy_w = velocity(a, t)
            vx = vx_w * ct + vy_w * st
            vy = -vx_w * st + vy_w * ct
            agent_states.append(AgentState(
                x=rx, y=ry, z=0.0, vx=vx, vy=vy, vz=0.0,
                heading=wrap_angle(ph - eth),
                length=a.dims[0], width=a.dims[1], height=a.dims[2],
                category=a.category, active=True))
        while len(agent_states) < profile.n_agents:
            agent_states.append(AgentState())

        if t == 0:
            action = EgoAction(0.0, 0.0, 0.0)
        else:
            px, py, pth = ego_poses[t - 1]
            cp, sp = math.cos(pth), math.sin(pth)
            ddx = (ex - px) * cp + (ey - py) * sp
            ddy = -(ex - px) * sp + (ey - py) * cp
            action = EgoAction(min(max(ddx, 0.0), 10.0),
                               min(max(ddy, -0.5), 0.5),
                               min(max(wrap_angle(eth - pth), -0.25), 0.25))

        raster = render_map(world, (ex, ey, eth), profile)
        frames.append(SceneFrame(
            ego_action=action, agents=tuple(agent_states), map=raster,
            image=render_view(raster, agent_states, profile), frame_index=t))

    return SceneSequence(frames=tuple(frames), world_seed=world.seed,
                         ego_pose=tuple(ego_poses))


def dataset_stats(sequences: list[SceneSequence]) -> dict:
    """Attribute histograms over active agents, for realism references."""
    cols = {k: [] for k in ("x", "y", "heading", "vx", "vy", "length", "width")}
    for seq in sequences:
        for f in seq.frames:
            for a in f.agents:
                if a.active:
                    for k in cols:
                        cols[k].append(getattr(a, k))
    out = {}
    for k, vals in cols.items():
        hist, edges = np.histogram(np.asarray(vals, dtype=np.float64), bins=24)
        out[k] = {"counts": hist.tolist(), "edges": edges.tolist()}
    return out


def make_dataset(seeds: list[int], per_seed: int, length: int, out_path: str,
                 profile: Profile, blocks: int = 4) -> dict:
    """Write a JSONL dataset plus a stats sidecar; returns the stats."""
    sequences = []
    for ws in seeds:
        world = RoadNetwork(blocks=blocks, seed=ws)
        for i in range(per_seed):
            sequences.append(simulate_sequence(world, i, length, profile))
    write_dataset(out_path, sequences)
    stats = dataset_stats(sequences)
    stats["sequences"] = len(sequences)
    stats["frames_per_sequence"] = length
    with open(out_path + ".stats.json", "w") as fh:
        json.dump(stats, fh, indent=1)
    return stats
