"""Trajectory error against ground truth, with a constant-velocity baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import SceneSequence
from ..errors import InputError
from ..rollout import compose_pose
from ..world.simulate import FRAME_DT


@dataclass
class TrajectoryReport:
    ego_l2: float
    agent_l2: float
    baseline_ego_l2: float
    baseline_agent_l2: float

    def to_dict(self) -> dict:
        return {"ego_l2": self.ego_l2, "agent_l2": self.agent_l2,
                "baseline_ego_l2": self.baseline_ego_l2,
                "baseline_agent_l2": self.baseline_agent_l2}


def _agent_world(seq: SceneSequence, t: int, slot: int) -> tuple[float, float] | None:
    a = seq.frames[t].agents[slot]
    if not a.active:
        return None
    ex, ey, eth = seq.ego_pose[t]
    c, s = math.cos(eth), math.sin(eth)
    return (ex + a.x * c - a.y * s, ey + a.x * s + a.y * c)


def l2_trajectory_error(predicted: SceneSequence, truth: SceneSequence,
                        horizon: int, prefix: int) -> TrajectoryReport:
    """Mean world-frame position error over ``horizon`` frames after ``prefix``.

    The baseline extrapolates every pose from the last prefix frame at its
    final velocity.
    """
    if len(predicted.frames) < prefix + horizon or len(truth.frames) < prefix + horizon:
        raise InputError("sequences shorter than prefix + horizon")
    ego_err = []
    base_ego_err = []
    # Constant-velocity ego baseline: repeat the last observed action.
    last_action = truth.frames[prefix - 1].ego_action
    base_pose = truth.ego_pose[prefix - 1]
    for h in range(horizon):
        t = prefix + h
        px, py, _ = predicted.ego_pose[t]
        gx, gy, _ = truth.ego_pose[t]
        ego_err.append(math.hypot(px - gx, py - gy))
        base_pose = compose_pose(base_pose, last_action)
        base_ego_err.append(math.hypot(base_pose[0] - gx, base_pose[1] - gy))

    agent_err = []
    base_agent_err = []
    n_slots = len(truth.frames[0].agents)
    for slot in range(n_slots):
        anchor = _agent_world(truth, prefix - 1, slot)
        if anchor is None:
            continue
        a0 = truth.frames[prefix - 1].agents[slot]
        ex, ey, eth = truth.ego_pose[prefix - 1]
        c, s = math.cos(eth), math.sin(eth)
        vx_w = a0.vx * c - a0.vy * s
        vy_w = a0.vx * s + a0.vy * c
        for h in range(horizon):
            t = prefix + h
            gt = _agent_world(truth, t, slot)
            pr = _agent_world(predicted, t, slot)
            if gt is None:
                continue
            if pr is not None:
                agent_err.append(math.hypot(pr[0] - gt[0], pr[1] - gt[1]))
            bx = anchor[0] + vx_w * FRAME_DT * (h + 1)
            by = anchor[1] + vy_w * FRAME_DT * (h + 1)
            base_agent_err.append(math.hypot(bx - gt[0], by - gt[1]))

    mean = lambda v: float(np.mean(v)) if v else float("nan")
    return TrajectoryReport(ego_l2=mean(ego_err), agent_l2=mean(agent_err),
                            baseline_ego_l2=mean(base_ego_err),
                            baseline_agent_l2=mean(base_agent_err))
