"""Interactive session service: one generated frame per step request.

Sessions are isolated (own sliding window, caches, and rng) and serialize
their own steps behind a per-session lock; the model parameters are shared
read-only across sessions.
"""

from __future__ import annotations

import itertools
import threading
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .core import Profile, SceneSequence, sequence_from_json, sequence_to_json
from .model.bundle import ModelBundle
from .model.decode import DecoderSession
from .rollout import AgentOverride, generate_next_frame
from .core import EgoAction
from .tokenizer import RANGES, TokenFrame, detokenize_frame, tokenize_frame
from .world import build_world, simulate_sequence

SCHEMA_VERSION = "1"


class EgoOverrideModel(BaseModel):
    dx: float
    dy: float
    dtheta: float


class AgentOverrideModel(BaseModel):
    slot: int = Field(ge=0)
    vx: float
    vy: float


class SessionRequest(BaseModel):
    seed: int = 0
    init: str | list[dict] = "sampled"


class StepRequest(BaseModel):
    ego: Optional[EgoOverrideModel] = None
    agents: Optional[list[AgentOverrideModel]] = None


class _Session:
    def __init__(self, bundle: ModelBundle, seed: int,
                 init_frames: list[np.ndarray], base_index: int):
        self.lock = threading.Lock()
        self.decoder = DecoderSession(bundle)
        self.decoder.prime(init_frames)
        self.rng = np.random.default_rng(seed)
        self.frame_index = base_index
        self.last_tokens = init_frames[-1]


def _frame_json(bundle: ModelBundle, tokens: np.ndarray, frame_index: int) -> dict:
    tf = TokenFrame(ids=np.asarray(tokens, dtype=np.int32), layout=bundle.layout)
    frame = detokenize_frame(tf, bundle.map_codebook, bundle.image_codebook,
                             bundle.profile, frame_index=frame_index)
    seq = SceneSequence(frames=(frame,), world_seed=0, ego_pose=((0.0, 0.0, 0.0),))
    fj = sequence_to_json(seq)["frames"][0]
    fj["tokens"] = [int(t) for t in tokens]
    return fj


def _clamp_notices(req: StepRequest) -> list[str]:
    notices = []
    if req.ego is not None:
        for attr in ("dx", "dy", "dtheta"):
            v = getattr(req.ego, attr)
            r = RANGES[attr]
            if not r.v_min <= v <= r.v_max:
                notices.append(f"clamped ego {attr} to [{r.v_min}, {r.v_max}]")
    for ov in req.agents or []:
        for attr in ("vx", "vy"):
            v = getattr(ov, attr)
            r = RANGES[attr]
            if not r.v_min <= v <= r.v_max:
                notices.append(f"clamped agent {ov.slot} {attr}")
    return notices


def create_app(bundle: ModelBundle) -> FastAPI:
    app = FastAPI(title="scene generation service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()
    ids = itertools.count(1)

    def initial_frames(seed: int, init) -> list[np.ndarray]:
        prof: Profile = bundle.profile
        if init == "sampled":
            world = build_world(seed)
            seq = simulate_sequence(world, seed, max(prof.block_size, 2), prof)
            frames = seq.frames[:prof.block_size]
        elif isinstance(init, list) and init:
            seq = sequence_from_json(
                {"world_seed": seed, "frames": init,
                 "ego_pose": [[0.0, 0.0, 0.0]] * len(init)},
                image_hw=(prof.image_h, prof.image_w))
            frames = seq.frames
        else:
            raise HTTPException(422, "init must be \"sampled\" or a frame list")
        return [tokenize_frame(f, bundle.map_codebook, bundle.image_codebook,
                               bundle.layout).ids.astype(np.int64)
                for f in frames]

    @app.post("/api/session", status_code=201)
    def create_session(req: SessionRequest):
        frames = initial_frames(req.seed, req.init)
        sess = _Session(bundle, req.seed, frames, base_index=len(frames) - 1)
        with registry_lock:
            sid = str(next(ids))
            sessions[sid] = sess
        return {"session_id": sid, "schema_version": SCHEMA_VERSION,
                "frame": _frame_json(bundle, sess.last_tokens, sess.frame_index),
                "frame_index": sess.frame_index}

    def get_session(sid: str) -> _Session:
        with registry_lock:
            sess = sessions.get(sid)
        if sess is None:
            raise HTTPException(404, f"unknown session {sid}")
        return sess

    @app.post("/api/session/{sid}/step")
    def step(sid: str, req: StepRequest):
        sess = get_session(sid)
        notices = _clamp_notices(req)
        ego = None
        if req.ego is not None:
            ego = EgoAction(req.ego.dx, req.ego.dy, req.ego.dtheta)
        overrides = []
        for ov in req.agents or []:
            if ov.slot >= bundle.profile.n_agents:
                raise HTTPException(422, f"slot {ov.slot} out of range")
            overrides.append(AgentOverride(ov.slot, ov.vx, ov.vy))
        with sess.lock:
            tf = generate_next_frame(sess.decoder, sess.rng, ego_override=ego,
                                     agent_overrides=overrides)
            sess.frame_index += 1
            sess.last_tokens = tf.ids.astype(np.int64)
            payload = {
                "frame": _frame_json(bundle, sess.last_tokens, sess.frame_index),
                "frame_index": sess.frame_index,
                "notices": notices,
            }
        return payload

    @app.get("/api/session/{sid}")
    def info(sid: str):
        sess = get_session(sid)
        with sess.lock:
            return {
                "frame": _frame_json(bundle, sess.last_tokens, sess.frame_index),
                "frame_index": sess.frame_index,
                "history_len": len(sess.decoder.window),
            }

    @app.delete("/api/session/{sid}", status_code=204)
    def delete(sid: str):
        with registry_lock:
            if sid not in sessions:
                raise HTTPException(404, f"unknown session {sid}")
            del sessions[sid]
        return Response(status_code=204)

    return app
