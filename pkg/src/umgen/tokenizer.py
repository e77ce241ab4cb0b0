"""Scene <-> token-stream conversion.

Each frame becomes a fixed-length vector of discrete ids in modality order
ego -> map -> agent -> image, with a start and an end token bracketing each
modality segment.  Scalars are clamp-normalized into [0, 1] and binned; map
and image patches are quantized against fitted codebooks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .core import (
    AGENT_ATTRS, AgentCategory, AgentState, EgoAction, FrameTokenCount,
    NUM_CELL_CLASSES, Profile, PseudoImage, RasterMap, SceneFrame,
    frame_token_count,
)
from .errors import ConfigurationError, FormatError, InputError
from .vq import Codebook, decode as vq_decode, encode as vq_encode, grid_to_patches


@dataclass(frozen=True)
class AttributeRange:
    v_min: float
    v_max: float

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ConfigurationError(f"bad range [{self.v_min}, {self.v_max}]")

    @property
    def width(self) -> float:
        return self.v_max - self.v_min


# Predefined bounds per attribute; shared by ego-action and agent scalars.
RANGES: dict[str, AttributeRange] = {
    "x": AttributeRange(-64.0, 64.0),
    "y": AttributeRange(-64.0, 64.0),
    "z": AttributeRange(-5.0, 5.0),
    "vx": AttributeRange(-20.0, 20.0),
    "vy": AttributeRange(-20.0, 20.0),
    "vz": AttributeRange(-0.3, 0.3),
    "heading": AttributeRange(-math.pi, math.pi),
    "length": AttributeRange(0.0, 15.0),
    "width": AttributeRange(0.0, 4.0),
    "height": AttributeRange(0.0, 5.0),
    "dx": AttributeRange(0.0, 10.0),
    "dy": AttributeRange(-0.5, 0.5),
    "dtheta": AttributeRange(-0.25, 0.25),
}

# Token order of the 11 agent attributes; the category id comes last.
AGENT_SCALAR_ATTRS = ("x", "y", "z", "vx", "vy", "vz", "heading", "length", "width", "height")
EGO_ATTRS = ("dx", "dy", "dtheta")

CATEGORY_OFFSET = {AgentCategory.VEHICLE: 0, AgentCategory.PEDESTRIAN: 1, AgentCategory.CYCLIST: 2}
OFFSET_CATEGORY = {v: k for k, v in CATEGORY_OFFSET.items()}

# Modality indices used throughout the model.
MOD_EGO, MOD_MAP, MOD_AGENT, MOD_IMAGE = 0, 1, 2, 3
MODALITY_NAMES = ("ego", "map", "agent", "image")


def clamp(v: float, r: AttributeRange) -> float:
    return min(max(v, r.v_min), r.v_max)


def normalize(v: float, r: AttributeRange) -> float:
    """Clamp-normalize a scalar into [0, 1]."""
    if not math.isfinite(v):
        raise InputError(f"non-finite attribute value {v!r}")
    u = (v - r.v_min) / (r.v_max - r.v_min)
    return min(max(u, 0.0), 1.0)


def discretize(v_norm: float, bins: int) -> int:
    """Map a unit scalar to the index of its enclosing 1/bins interval.

    The upper edge v_norm == 1 falls into the last bin so the mapping is total.
    """
    if not (0.0 <= v_norm <= 1.0):
        raise InputError(f"normalized value {v_norm!r} outside [0, 1]")
    return min(int(v_norm * bins), bins - 1)


def detokenize_scalar(token_id: int, r: AttributeRange, bins: int) -> float:
    """Inverse of normalize+discretize up to quantization: the bin midpoint."""
    if not (0 <= token_id < bins):
        raise InputError(f"scalar token {token_id} outside [0, {bins})")
    return r.v_min + (token_id + 0.5) / bins * r.width


def tokenize_scalar(v: float, r: AttributeRange, bins: int) -> int:
    return discretize(normalize(v, r), bins)


@dataclass(frozen=True)
class TokenLayout:
    """Fixed per-frame token geometry derived from a profile.

    Positions are 0-indexed over the full frame of ``total`` tokens including
    the 8 boundary tokens.  Reserved ids occupy the top of each modality's
    vocabulary: start = payload_vocab, end = payload_vocab + 1.
    """

    counts: FrameTokenCount
    bins: int
    map_codebook: int
    image_codebook: int
    n_agents: int
    modality_of: np.ndarray      # (N,) int8 in {0..3}
    is_boundary: np.ndarray      # (N,) bool
    boundary_ids: np.ndarray     # (N,) int32, -1 off boundary positions
    agent_attr_of: np.ndarray    # (N,) int8, 0..10 on agent payload, -1 elsewhere

    @property
    def total(self) -> int:
        return self.counts.total

    # --- vocabulary geometry -------------------------------------------------

    def payload_vocab(self, modality: int) -> int:
        if modality == MOD_EGO:
            return self.bins
        if modality == MOD_MAP:
            return self.map_codebook
        if modality == MOD_AGENT:
            return self.bins + 4  # 3 categories + pad above the scalar bins
        return self.image_codebook

    def vocab(self, modality: int) -> int:
        return self.payload_vocab(modality) + 2

    def start_id(self, modality: int) -> int:
        return self.payload_vocab(modality)

    def end_id(self, modality: int) -> int:
        return self.payload_vocab(modality) + 1

    @property
    def category_base(self) -> int:
        return self.bins  # vehicle; pedestrian/cyclist follow

    @property
    def pad_id(self) -> int:
        return self.bins + 3

    def payload_positions(self, modality: int) -> np.ndarray:
        return np.where((self.modality_of == modality) & ~self.is_boundary)[0]

    def allowed_ids(self, position: int) -> np.ndarray:
        """Ids that may legitimately occur at a payload position."""
        m = int(self.modality_of[position])
        if self.is_boundary[position]:
            return np.array([self.boundary_ids[position]], dtype=np.int64)
        if m == MOD_AGENT:
            if self.agent_attr_of[position] == AGENT_ATTRS - 1:  # category slot
                return np.arange(self.category_base, self.pad_id + 1, dtype=np.int64)
            return np.concatenate([np.arange(self.bins, dtype=np.int64),
                                   np.array([self.pad_id], dtype=np.int64)])
        return np.arange(self.payload_vocab(m), dtype=np.int64)


def build_layout(profile: Profile) -> TokenLayout:
    c = frame_token_count(profile)
    n = c.total
    modality_of = np.empty(n, dtype=np.int8)
    is_boundary = np.zeros(n, dtype=bool)
    boundary_ids = np.full(n, -1, dtype=np.int32)
    agent_attr_of = np.full(n, -1, dtype=np.int8)

    segments = (
        (MOD_EGO, c.n_ego), (MOD_MAP, c.n_map),
        (MOD_AGENT, c.n_agent), (MOD_IMAGE, c.n_image),
    )
    payload_vocabs = {
        MOD_EGO: profile.bins, MOD_MAP: profile.map_codebook,
        MOD_AGENT: profile.bins + 4, MOD_IMAGE: profile.image_codebook,
    }
    pos = 0
    for mod, count in segments:
        modality_of[pos:pos + count + 2] = mod
        is_boundary[pos] = True
        boundary_ids[pos] = payload_vocabs[mod]          # start id
        is_boundary[pos + count + 1] = True
        boundary_ids[pos + count + 1] = payload_vocabs[mod] + 1  # end id
        if mod == MOD_AGENT:
            for k in range(count):
                agent_attr_of[pos + 1 + k] = k % AGENT_ATTRS
        pos += count + 2
    assert pos == n
    return TokenLayout(
        counts=c, bins=profile.bins, map_codebook=profile.map_codebook,
        image_codebook=profile.image_codebook, n_agents=profile.n_agents,
        modality_of=modality_of, is_boundary=is_boundary,
        boundary_ids=boundary_ids, agent_attr_of=agent_attr_of)


@dataclass(frozen=True)
class TokenFrame:
    ids: np.ndarray  # (N,) int32
    layout: TokenLayout

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int32)
        if ids.shape != (self.layout.total,):
            raise FormatError(f"token frame has {ids.shape}, expected ({self.layout.total},)")
        object.__setattr__(self, "ids", ids)

    def segment(self, modality: int, payload_only: bool = True) -> np.ndarray:
        mask = self.layout.modality_of == modality
        if payload_only:
            mask &= ~self.layout.is_boundary
        return self.ids[mask]


def validate_token_frame(frame: TokenFrame) -> None:
    """Raise FormatError unless every position holds an id its slot allows."""
    lay = frame.layout
    ids = frame.ids
    b = lay.is_boundary
    if not np.array_equal(ids[b], lay.boundary_ids[b]):
        raise FormatError("boundary positions do not hold their reserved ids")
    for m in (MOD_EGO, MOD_MAP, MOD_AGENT, MOD_IMAGE):
        seg = ids[(lay.modality_of == m) & ~b]
        if seg.size and (seg.min() < 0 or seg.max() >= lay.payload_vocab(m)):
            raise FormatError(
                f"{MODALITY_NAMES[m]} payload id outside [0, {lay.payload_vocab(m)})")
    # Agent scalar slots may hold scalar bins or the pad id, never category ids.
    scalar_slots = (lay.agent_attr_of >= 0) & (lay.agent_attr_of < AGENT_ATTRS - 1)
    bad = (ids[scalar_slots] >= lay.bins) & (ids[scalar_slots] != lay.pad_id)
    if bad.any():
        raise FormatError("agent scalar slot holds a category id")
    cat_slots = lay.agent_attr_of == AGENT_ATTRS - 1
    if cat_slots.any() and (ids[cat_slots] < lay.category_base).any():
        raise FormatError("agent category slot holds a scalar id")


def tokenize_agent(agent: AgentState, bins: int) -> np.ndarray:
    """11 ids per agent: ten clamp-binned scalars then the category id."""
    if agent.category is AgentCategory.PAD:
        return np.full(AGENT_ATTRS, bins + 3, dtype=np.int32)
    ids = np.empty(AGENT_ATTRS, dtype=np.int32)
    for k, attr in enumerate(AGENT_SCALAR_ATTRS):
        ids[k] = tokenize_scalar(getattr(agent, attr), RANGES[attr], bins)
    ids[AGENT_ATTRS - 1] = bins + CATEGORY_OFFSET[agent.category]
    return ids


def detokenize_agent(ids: Sequence[int], bins: int) -> AgentState:
    cat_id = int(ids[AGENT_ATTRS - 1])
    if cat_id == bins + 3:
        return AgentState()
    if not (bins <= cat_id < bins + 3):
        raise FormatError(f"invalid category id {cat_id}")
    vals = {}
    for k, attr in enumerate(AGENT_SCALAR_ATTRS):
        tid = int(ids[k])
        # A stray pad id inside an otherwise active agent decodes to the
        # attribute default rather than failing the whole frame.
        vals[attr] = 0.0 if tid == bins + 3 else detokenize_scalar(tid, RANGES[attr], bins)
    return AgentState(category=OFFSET_CATEGORY[cat_id - bins], active=True, **vals)


def map_to_tensor(grid: RasterMap) -> np.ndarray:
    """One-hot expand the cell classes to an (H, W, 7) float tensor."""
    h, w = grid.cells.shape
    t = np.zeros((h, w, NUM_CELL_CLASSES), dtype=np.float32)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    t[rr, cc, grid.cells] = 1.0
    return t


def tensor_to_map(t: np.ndarray, resolution: float) -> RasterMap:
    cells = np.argmax(t, axis=2).astype(np.uint8)
    return RasterMap(cells, resolution, t.shape[0] * resolution)


def tokenize_frame(frame: SceneFrame, map_codebook: Codebook,
                   image_codebook: Codebook, layout: TokenLayout) -> TokenFrame:
    if map_codebook.size != layout.map_codebook or image_codebook.size != layout.image_codebook:
        raise ConfigurationError("codebook size disagrees with the layout")
    ego = [tokenize_scalar(getattr(frame.ego_action, a), RANGES[a], layout.bins)
           for a in EGO_ATTRS]
    map_ids = vq_encode(map_to_tensor(frame.map), map_codebook)
    agent_ids = np.concatenate([tokenize_agent(a, layout.bins) for a in frame.agents])
    img_ids = vq_encode(frame.image.pixels, image_codebook)

    ids = np.empty(layout.total, dtype=np.int32)
    ids[layout.is_boundary] = layout.boundary_ids[layout.is_boundary]
    for mod, seg in ((MOD_EGO, np.asarray(ego)), (MOD_MAP, map_ids),
                     (MOD_AGENT, agent_ids), (MOD_IMAGE, img_ids)):
        ids[layout.payload_positions(mod)] = seg
    return TokenFrame(ids=ids, layout=layout)


def detokenize_frame(tokens: TokenFrame, map_codebook: Codebook,
                     image_codebook: Codebook, profile: Profile,
                     frame_index: int = 0) -> SceneFrame:
    validate_token_frame(tokens)
    lay = tokens.layout
    ego_ids = tokens.segment(MOD_EGO)
    ego = EgoAction(*(detokenize_scalar(int(t), RANGES[a], lay.bins)
                      for t, a in zip(ego_ids, EGO_ATTRS)))
    side = profile.map_cells // profile.patch
    map_tensor = vq_decode(tokens.segment(MOD_MAP), map_codebook, grid_hw=(side, side))
    raster = tensor_to_map(map_tensor, profile.map_resolution)
    agent_ids = tokens.segment(MOD_AGENT).reshape(profile.n_agents, AGENT_ATTRS)
    agents = tuple(detokenize_agent(row, lay.bins) for row in agent_ids)
    img_tensor = vq_decode(
        tokens.segment(MOD_IMAGE), image_codebook,
        grid_hw=(profile.image_h // profile.patch, profile.image_w // profile.patch))
    image = PseudoImage(np.clip(img_tensor, 0.0, 1.0))
    return SceneFrame(ego_action=ego, agents=agents, map=raster,
                      image=image, frame_index=frame_index)


# ---------------------------------------------------------------------------
# Token cache file (avoids re-tokenizing datasets during training)
# ---------------------------------------------------------------------------

_TOKEN_MAGIC = b"UMGT"
_TOKEN_VERSION = 1


def write_token_cache(path: str, sequences: Sequence[np.ndarray]) -> None:
    """Write tokenized sequences, each a (T, N) int array, as u16 records."""
    with open(path, "wb") as fh:
        fh.write(_TOKEN_MAGIC)
        fh.write(struct.pack("<II", _TOKEN_VERSION, len(sequences)))
        for seq in sequences:
            arr = np.ascontiguousarray(seq, dtype=np.uint16)
            t, n = arr.shape
            fh.write(struct.pack("<II", t, n))
            fh.write(arr.astype("<u2").tobytes())


def read_token_cache(path: str) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _TOKEN_MAGIC:
            raise FormatError("not a token cache file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _TOKEN_VERSION:
            raise FormatError(f"unsupported token cache version {version}")
        out = []
        for _ in range(count):
            t, n = struct.unpack("<II", fh.read(8))
            data = fh.read(t * n * 2)
            if len(data) != t * n * 2:
                raise FormatError("truncated token cache")
            out.append(np.frombuffer(data, dtype="<u2").reshape(t, n).astype(np.int32))
    return out
