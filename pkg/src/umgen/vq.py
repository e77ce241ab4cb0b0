"""Patch vector quantizer for the raster-map and image modalities.

A codebook is fitted by seeded k-means over flattened patches; encoding maps
each patch to its nearest entry (squared Euclidean, ties to the smaller
index) and decoding reassembles exact entries row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FitError, FormatError


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray   # (K, d) float32
    patch: int            # patch side length in cells/pixels
    channels: int
    fit_seed: int
    # Largest patch-to-nearest-entry distance seen while fitting; bounds the
    # reconstruction error of decode(encode(.)) on the training data.
    fit_max_dist: float = 0.0
    fit_sse_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=np.float32)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ConfigurationError(f"codebook entries must be (K, d), got {e.shape}")
        if not np.isfinite(e).all():
            raise ConfigurationError("codebook contains non-finite entries")
        if e.shape[1] != self.patch * self.patch * self.channels:
            raise ConfigurationError(
                f"entry dim {e.shape[1]} != patch^2*channels "
                f"({self.patch}^2*{self.channels})")
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def grid_to_patches(tensor: np.ndarray, patch: int) -> np.ndarray:
    """Split an (H, W, C) tensor into ((H/p)*(W/p), p*p*C) row-major patches."""
    h, w, c = tensor.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"grid {h}x{w} not divisible by patch {patch}")
    t = tensor.reshape(h // patch, patch, w // patch, patch, c)
    return np.ascontiguousarray(t.transpose(0, 2, 1, 3, 4)).reshape(
        (h // patch) * (w // patch), patch * patch * c)


def patches_to_grid(patches: np.ndarray, patch: int, h: int, w: int, c: int) -> np.ndarray:
    t = patches.reshape(h // patch, w // patch, patch, patch, c)
    return np.ascontiguousarray(t.transpose(0, 2, 1, 3, 4)).reshape(h, w, c)


def _nearest(patches: np.ndarray, entries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest entry per patch, with squared distances.

    argmin returns the first minimum, which implements the smallest-index
    tie-break.
    """
    # ||p - e||^2 = ||p||^2 - 2 p.e + ||e||^2; the ||p||^2 term is constant
    # per row but kept so the distances themselves are usable.
    d2 = (
        np.sum(patches * patches, axis=1, keepdims=True)
        - 2.0 * patches @ entries.T
        + np.sum(entries * entries, axis=1)[None, :]
    )
    idx = np.argmin(d2, axis=1)
    return idx, np.maximum(d2[np.arange(len(idx)), idx], 0.0)


def fit_codebook(patches: np.ndarray, k: int, iters: int = 50,
                 seed: int = 0, patch: int = 1, channels: int = 1) -> Codebook:
    """Seeded k-means++ with Lloyd refinement until a fixpoint or ``iters``.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid, so every entry stays meaningful.
    """
    pts = np.ascontiguousarray(patches, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise FitError("need a non-empty (n, d) patch matrix")
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < k:
        raise FitError(
            f"only {distinct.shape[0]} distinct patches for k={k}; "
            "supply more varied data or shrink the codebook")
    rng = np.random.default_rng(seed)

    # k-means++ seeding over the distinct points (duplicates add no spread).
    centers = np.empty((k, pts.shape[1]), dtype=np.float32)
    centers[0] = distinct[rng.integers(distinct.shape[0])]
    d2 = np.sum((distinct - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = distinct[rng.integers(distinct.shape[0])]
        else:
            r = rng.random() * total
            centers[j] = distinct[np.searchsorted(np.cumsum(d2), r).clip(max=len(d2) - 1)]
        d2 = np.minimum(d2, np.sum((distinct - centers[j]) ** 2, axis=1))

    sse_trace: list[float] = []
    assign = np.full(pts.shape[0], -1)
    for _ in range(max(1, iters)):
        new_assign, dist2 = _nearest(pts, centers)
        sse_trace.append(float(dist2.sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = pts[sel].mean(axis=0)
            else:
                centers[j] = pts[np.argmax(dist2)]
                dist2[np.argmax(dist2)] = 0.0
    _, final_d2 = _nearest(pts, centers)
    return Codebook(entries=centers, patch=patch, channels=channels, fit_seed=seed,
                    fit_max_dist=float(np.sqrt(final_d2.max())),
                    fit_sse_trace=tuple(sse_trace))


def encode(tensor: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Quantize an (H, W, C) tensor into row-major patch token ids."""
    t = np.asarray(tensor, dtype=np.float32)
    if t.ndim != 3 or t.shape[2] != codebook.channels:
        raise ConfigurationError(
            f"tensor shape {t.shape} incompatible with {codebook.channels}-channel codebook")
    patches = grid_to_patches(t, codebook.patch)
    idx, _ = _nearest(patches, codebook.entries)
    return idx.astype(np.int32)


def decode(ids: np.ndarray, codebook: Codebook,
           grid_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Reassemble exact codebook entries into an (H, W, C) tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= codebook.size:
        raise FormatError(f"token id outside [0, {codebook.size})")
    n = ids.shape[0]
    if grid_hw is None:
        side = int(round(n ** 0.5))
        if side * side == n:
            grid_hw = (side, side)
        else:
            # Non-square grids follow the 2:1 forward/lateral aspect.
            ph = int(round((n * 2) ** 0.5))
            grid_hw = (ph, n // ph)
    ph, pw = grid_hw
    if ph * pw != n:
        raise ConfigurationError(f"{n} ids do not tile a {ph}x{pw} patch grid")
    patches = codebook.entries[ids]
    p = codebook.patch
    return patches_to_grid(patches, p, ph * p, pw * p, codebook.channels)


# ---------------------------------------------------------------------------
# Codebook file format
# ---------------------------------------------------------------------------

_VQ_MAGIC = b"UMGQ"
_VQ_VERSION = 1


def save_codebook(path: str, cb: Codebook) -> None:
    with open(path, "wb") as fh:
        fh.write(_VQ_MAGIC)
        fh.write(struct.pack("<IIIIIQ", _VQ_VERSION, cb.size, cb.dim,
                             cb.patch, cb.channels, cb.fit_seed & (2**64 - 1)))
        fh.write(cb.entries.astype("<f4").tobytes())


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as fh:
        if fh.read(4) != _VQ_MAGIC:
            raise FormatError("not a codebook file")
        version, k, d, patch, channels, seed = struct.unpack("<IIIIIQ", fh.read(28))
        if version != _VQ_VERSION:
            raise FormatError(f"unsupported codebook version {version}")
        data = fh.read(k * d * 4)
        if len(data) != k * d * 4:
            raise FormatError("truncated codebook file")
        entries = np.frombuffer(data, dtype="<f4").reshape(k, d).copy()
    return Codebook(entries=entries, patch=patch, channels=channels, fit_seed=seed)
