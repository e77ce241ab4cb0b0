"""Domain types for scenes, sequences, and configuration profiles.

A scene frame bundles the four modalities (ego action, raster map, agent
table, pseudo-image) for one timestep.  Frames are immutable value objects;
sequences are serialized as JSON lines, one sequence per line.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigurationError, FormatError

# Raster cell classes.  0 is the background; 1..6 are the road element types.
CELL_EMPTY = 0
CELL_LANE = 1
CELL_STOP_LINE = 2
CELL_CROSSWALK = 3
CELL_INTERSECTION = 4
CELL_MIDDLE_LINE = 5
CELL_LANE_CONNECTOR = 6
NUM_CELL_CLASSES = 7


class AgentCategory(Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    PAD = "pad"


# Number of tokenizable attributes per agent: x,y,z,vx,vy,vz,heading,l,w,h,category.
AGENT_ATTRS = 11
EGO_TOKENS = 3
BOUNDARY_TOKENS = 8  # start/end per modality


@dataclass(frozen=True)
class EgoAction:
    """Per-frame ego displacement: forward dx, lateral dy (left positive), heading change dtheta."""

    dx: float
    dy: float
    dtheta: float


@dataclass(frozen=True)
class AgentState:
    """One agent slot, expressed in the ego frame of its scene."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    heading: float = 0.0
    length: float = 0.0
    width: float = 0.0
    height: float = 0.0
    category: AgentCategory = AgentCategory.PAD
    active: bool = False


PAD_AGENT = AgentState()


@dataclass(frozen=True)
class RasterMap:
    """Square ego-centered grid of cell-class ids; ego sits at the center cell, heading up."""

    cells: np.ndarray  # (H, W) uint8, values < NUM_CELL_CLASSES
    resolution: float  # meters per cell
    extent: float      # meters covered along one side

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=np.uint8)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ConfigurationError(f"raster grid must be square, got {c.shape}")
        if c.max(initial=0) >= NUM_CELL_CLASSES:
            raise FormatError("raster grid contains a cell class >= 7")
        object.__setattr__(self, "cells", c)


@dataclass(frozen=True)
class PseudoImage:
    """Top-down forward view, H x W x 3 intensities in [0, 1] on the u8/255 grid."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ConfigurationError(f"image must be HxWx3, got {p.shape}")
        if p.min(initial=0.0) < 0.0 or p.max(initial=0.0) > 1.0:
            raise FormatError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)


@dataclass(frozen=True)
class SceneFrame:
    ego_action: EgoAction
    agents: tuple[AgentState, ...]
    map: RasterMap
    image: PseudoImage
    frame_index: int


@dataclass(frozen=True)
class SceneSequence:
    frames: tuple[SceneFrame, ...]
    world_seed: int
    ego_pose: tuple[tuple[float, float, float], ...]  # world (x, y, theta) per frame


@dataclass(frozen=True)
class Profile:
    """Complete layout/model/training configuration.

    ``desk()`` is the CPU-scale default used throughout; ``paper_reference()``
    records the full-scale constants for provenance and is not trainable here.
    """

    name: str = "desk"
    # Scene layout
    n_agents: int = 8
    map_cells: int = 32
    map_resolution: float = 2.0
    image_h: int = 32
    image_w: int = 16
    patch: int = 4
    # Vocabularies
    bins: int = 1024           # scalar discretization bins (ego + agent attributes)
    map_codebook: int = 512
    image_codebook: int = 512
    # Model dims
    d_model: int = 64
    heads: int = 4
    layers_ca_hist: int = 2
    layers_ca_env: int = 2
    layers_tar_causal: int = 2
    layers_tar_bidir: int = 2
    layers_oar: int = 2
    block_size: int = 8        # max history frames presented to the model
    # Sampling
    top_k: int = 16
    temperature: float = 1.0
    # Training
    learning_rate: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    dropout: float = 0.0
    seed: int = 0

    @property
    def map_extent(self) -> float:
        return self.map_cells * self.map_resolution

    @staticmethod
    def desk(**overrides) -> "Profile":
        return replace(Profile(), **overrides) if overrides else Profile()

    @staticmethod
    def tiny(**overrides) -> "Profile":
        """Smallest layout that exercises every code path; used for gradient checks."""
        p = Profile(
            name="tiny", n_agents=2, map_cells=8, map_resolution=2.0,
            image_h=8, image_w=4, patch=4, bins=16,
            map_codebook=8, image_codebook=8, d_model=8, heads=2,
            layers_ca_hist=1, layers_ca_env=1, layers_tar_causal=1,
            layers_tar_bidir=1, layers_oar=1, block_size=3,
        )
        return replace(p, **overrides) if overrides else p

    @staticmethod
    def paper_reference() -> "Profile":
        """Full-scale constants, recorded for reference only."""
        return Profile(
            name="paper_reference", n_agents=64, map_cells=256, map_resolution=0.5,
            image_h=512, image_w=256, patch=16, bins=1024,
            map_codebook=8192, image_codebook=8192, d_model=768, heads=12,
            layers_ca_hist=12, layers_ca_env=12, layers_tar_causal=24,
            layers_tar_bidir=24, layers_oar=24, block_size=20,
            top_k=16, temperature=1.0, learning_rate=1e-4, batch_size=192,
            dropout=0.15,
        )


@dataclass(frozen=True)
class FrameTokenCount:
    """Per-frame token layout sizes and cumulative modality boundaries."""

    n_ego: int
    n_map: int
    n_agent: int
    n_image: int
    total: int
    # Cumulative 1-based boundary indices: the ego segment spans tokens
    # [1, cum_ego], map (cum_ego, cum_map], agent (cum_map, cum_agent],
    # image (cum_agent, cum_image]; each segment includes its start/end token.
    cum_ego: int
    cum_map: int
    cum_agent: int
    cum_image: int


def frame_token_count(profile: Profile) -> FrameTokenCount:
    """Token count per frame plus the cumulative modality boundaries."""
    if profile.map_cells % profile.patch != 0:
        raise ConfigurationError(
            f"map_cells={profile.map_cells} not divisible by patch={profile.patch}")
    if profile.image_h % profile.patch != 0 or profile.image_w % profile.patch != 0:
        raise ConfigurationError(
            f"image {profile.image_h}x{profile.image_w} not divisible by patch={profile.patch}")
    n_map = (profile.map_cells // profile.patch) ** 2
    n_agent = AGENT_ATTRS * profile.n_agents
    n_image = (profile.image_h // profile.patch) * (profile.image_w // profile.patch)
    total = EGO_TOKENS + n_map + n_agent + n_image + BOUNDARY_TOKENS
    cum_ego = EGO_TOKENS + 2
    cum_map = cum_ego + n_map + 2
    cum_agent = cum_map + n_agent + 2
    cum_image = cum_agent + n_image + 2
    return FrameTokenCount(
        n_ego=EGO_TOKENS, n_map=n_map, n_agent=n_agent, n_image=n_image,
        total=total, cum_ego=cum_ego, cum_map=cum_map, cum_agent=cum_agent,
        cum_image=cum_image)


def validate_frame(frame: SceneFrame, profile: Profile) -> None:
    """Raise if a frame violates the profile's structural invariants."""
    if len(frame.agents) != profile.n_agents:
        raise FormatError(
            f"frame {frame.frame_index}: {len(frame.agents)} agent slots, "
            f"expected {profile.n_agents}")
    if frame.map.cells.shape != (profile.map_cells, profile.map_cells):
        raise FormatError(f"frame {frame.frame_index}: bad map shape {frame.map.cells.shape}")
    if frame.image.pixels.shape != (profile.image_h, profile.image_w, 3):
        raise FormatError(f"frame {frame.frame_index}: bad image shape {frame.image.pixels.shape}")
    for a in frame.agents:
        if (a.category is AgentCategory.PAD) != (not a.active):
            raise FormatError(f"frame {frame.frame_index}: pad/active mismatch")


# ---------------------------------------------------------------------------
# JSONL dataset format
# ---------------------------------------------------------------------------

def _agent_to_json(slot: int, a: AgentState) -> dict:
    return {
        "slot": slot, "category": a.category.value,
        "x": a.x, "y": a.y, "z": a.z, "vx": a.vx, "vy": a.vy, "vz": a.vz,
        "heading": a.heading, "length": a.length, "width": a.width,
        "height": a.height, "active": a.active,
    }


def _agent_from_json(obj: dict) -> AgentState:
    return AgentState(
        x=obj["x"], y=obj["y"], z=obj["z"], vx=obj["vx"], vy=obj["vy"],
        vz=obj["vz"], heading=obj["heading"], length=obj["length"],
        width=obj["width"], height=obj["height"],
        category=AgentCategory(obj["category"]), active=obj["active"])


def _image_to_b64(img: PseudoImage) -> str:
    u8 = np.round(img.pixels * 255.0).astype(np.uint8)
    return base64.b64encode(u8.tobytes()).decode("ascii")


def _image_from_b64(data: str, h: int, w: int) -> PseudoImage:
    raw = base64.b64decode(data.encode("ascii"))
    u8 = np.frombuffer(raw, dtype=np.uint8)
    if u8.size != h * w * 3:
        raise FormatError(f"image payload has {u8.size} bytes, expected {h * w * 3}")
    return PseudoImage(u8.reshape(h, w, 3).astype(np.float32) / 255.0)


def sequence_to_json(seq: SceneSequence) -> dict:
    return {
        "world_seed": seq.world_seed,
        "frames": [
            {
                "frame_index": f.frame_index,
                "ego_action": {"dx": f.ego_action.dx, "dy": f.ego_action.dy,
                               "dtheta": f.ego_action.dtheta},
                "agents": [_agent_to_json(i, a) for i, a in enumerate(f.agents)],
                "map": {"cells": f.map.cells.tolist(),
                        "resolution": f.map.resolution, "extent": f.map.extent},
                "image": {"pixels": _image_to_b64(f.image)},
            }
            for f in seq.frames
        ],
        "ego_pose": [list(p) for p in seq.ego_pose],
    }


def sequence_from_json(obj: dict, image_hw: tuple[int, int] | None = None) -> SceneSequence:
    frames = []
    for fo in obj["frames"]:
        cells = np.array(fo["map"]["cells"], dtype=np.uint8)
        ea = fo["ego_action"]
        agents = tuple(_agent_from_json(a) for a in sorted(fo["agents"], key=lambda a: a["slot"]))
        if image_hw is not None:
            h, w = image_hw
        else:
            # The wire format carries no image dims; all profiles use a 2:1
            # forward/lateral aspect, which pins (h, w) from the byte count.
            npx = len(base64.b64decode(fo["image"]["pixels"].encode("ascii"))) // 3
            h = int(round((npx * 2) ** 0.5))
            w = npx // h
        frames.append(SceneFrame(
            ego_action=EgoAction(ea["dx"], ea["dy"], ea["dtheta"]),
            agents=agents,
            map=RasterMap(cells, fo["map"]["resolution"], fo["map"]["extent"]),
            image=_image_from_b64(fo["image"]["pixels"], h, w),
            frame_index=fo["frame_index"],
        ))
    return SceneSequence(
        frames=tuple(frames), world_seed=obj["world_seed"],
        ego_pose=tuple(tuple(p) for p in obj["ego_pose"]))


def write_dataset(path: str, sequences: Iterable[SceneSequence]) -> int:
    n = 0
    with open(path, "w", encoding="ascii") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_json(seq), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_dataset(path: str) -> list[SceneSequence]:
    out = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(sequence_from_json(json.loads(line)))
    return out


def iter_dataset(path: str) -> Iterator[SceneSequence]:
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield sequence_from_json(json.loads(line))
