"""Closed-loop generation: sampling, user overrides, and pose integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import EgoAction, Profile, SceneFrame, SceneSequence
from .errors import InputError, UsageError
from .model.bundle import ModelBundle
from .model.decode import DecoderSession
from .numerics import CacheMeter
from .tokenizer import (
    EGO_ATTRS, RANGES, TokenFrame, tokenize_frame, tokenize_scalar,
    detokenize_frame, validate_token_frame,
)


def top_k_sample(logits: np.ndarray, k: int, temperature: float,
                 rng: np.random.Generator) -> int:
    """Sample among the k largest logits after temperature scaling."""
    if k < 1:
        raise InputError(f"top-k needs k >= 1, got {k}")
    if temperature <= 0.0:
        raise InputError(f"temperature must be positive, got {temperature}")
    v = logits.shape[-1]
    k = min(k, v)
    idx = np.argpartition(logits, v - k)[v - k:]
    z = logits[idx] / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(idx[np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(max=k - 1)])


@dataclass(frozen=True)
class AgentOverride:
    slot: int
    vx: float
    vy: float


@dataclass
class OverridePlan:
    """Per generated-frame overrides, keyed by frame offset (0 = first new frame)."""

    ego: dict[int, EgoAction] = field(default_factory=dict)
    agents: dict[int, list[AgentOverride]] = field(default_factory=dict)

    def validate(self, profile: Profile) -> None:
        for ovs in self.agents.values():
            for ov in ovs:
                if not 0 <= ov.slot < profile.n_agents:
                    raise InputError(f"agent override slot {ov.slot} out of range")

    @staticmethod
    def from_json(obj: dict) -> "OverridePlan":
        ego = {int(k): EgoAction(v["dx"], v["dy"], v["dtheta"])
               for k, v in obj.get("ego", {}).items()}
        agents = {int(k): [AgentOverride(o["slot"], o["vx"], o["vy"]) for o in v]
                  for k, v in obj.get("agents", {}).items()}
        return OverridePlan(ego=ego, agents=agents)


def ego_action_ids(action: EgoAction, bins: int) -> np.ndarray:
    return np.array([tokenize_scalar(getattr(action, a), RANGES[a], bins)
                     for a in EGO_ATTRS], dtype=np.int64)


def agent_override_ids(ov: AgentOverride, bins: int) -> tuple[int, int, int]:
    return (ov.slot,
            tokenize_scalar(ov.vx, RANGES["vx"], bins),
            tokenize_scalar(ov.vy, RANGES["vy"], bins))


def compose_pose(pose: tuple[float, float, float], action: EgoAction
                 ) -> tuple[float, float, float]:
    x, y, th = pose
    return (x + action.dx * math.cos(th) - action.dy * math.sin(th),
            y + action.dx * math.sin(th) + action.dy * math.cos(th),
            th + action.dtheta)


def generate_next_frame(session: DecoderSession, rng: np.random.Generator,
                        ego_override: EgoAction | None = None,
                        agent_overrides: list[AgentOverride] | None = None,
                        mode: str = "full",
                        top_k: int | None = None,
                        temperature: float | None = None) -> TokenFrame:
    """One generation step through a primed session, with optional overrides."""
    prof = session.bundle.profile
    k = top_k if top_k is not None else prof.top_k
    temp = temperature if temperature is not None else prof.temperature
    sample = lambda logits, r: top_k_sample(logits, k, temp, r)
    ego_ids = None
    if ego_override is not None:
        ego_ids = ego_action_ids(ego_override, prof.bins)
    ag = [agent_override_ids(o, prof.bins) for o in (agent_overrides or [])]
    ids = session.step(rng, sample, ego_override_ids=ego_ids,
                       agent_overrides=ag, mode=mode)
    frame = TokenFrame(ids=ids.astype(np.int32), layout=session.layout)
    validate_token_frame(frame)
    return frame


def rollout(bundle: ModelBundle, initial: SceneSequence, n_frames: int,
            plan: OverridePlan | None = None, seed: int = 0,
            mode: str = "full") -> SceneSequence:
    """Extend ``initial`` by ``n_frames`` generated frames.

    The ego world pose advances by composing each decoded per-frame action;
    generated frames join the sliding history window as they are produced.
    """
    if len(initial.frames) < 1:
        raise UsageError("rollout needs at least one initial frame")
    plan = plan or OverridePlan()
    plan.validate(bundle.profile)
    rng = np.random.default_rng(seed)
    init_tokens = [
        tokenize_frame(f, bundle.map_codebook, bundle.image_codebook,
                       bundle.layout).ids.astype(np.int64)
        for f in initial.frames
    ]
    session = DecoderSession(bundle, meter=CacheMeter())
    session.prime(init_tokens)

    frames = list(initial.frames)
    poses = list(initial.ego_pose)
    for i in range(n_frames):
        tf = generate_next_frame(
            session, rng,
            ego_override=plan.ego.get(i),
            agent_overrides=plan.agents.get(i),
            mode=mode)
        frame = detokenize_frame(tf, bundle.map_codebook, bundle.image_codebook,
                                 bundle.profile, frame_index=len(frames))
        frames.append(frame)
        poses.append(compose_pose(poses[-1], frame.ego_action))
    return SceneSequence(frames=tuple(frames), world_seed=initial.world_seed,
                         ego_pose=tuple(poses))
