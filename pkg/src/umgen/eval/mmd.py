"""Maximum mean discrepancy with a Gaussian kernel (biased V-statistic)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..core import SceneSequence
from ..errors import InputError

ATTRIBUTE_GROUPS = {
    "position": ("x", "y"),
    "heading": ("heading",),
    "size": ("length", "width"),
    "velocity": ("vx", "vy"),
}


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample; 1.0 if degenerate."""
    pooled = np.concatenate([x, y], axis=0)
    if pooled.shape[0] > 512:
        pooled = pooled[:: pooled.shape[0] // 512 + 1]
    d = cdist(pooled, pooled)
    med = float(np.median(d[np.triu_indices_from(d, k=1)])) if len(pooled) > 1 else 0.0
    return med if med > 0.0 else 1.0


def mmd(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Squared MMD between two samples, clipped at zero.

    k(a, b) = exp(-||a-b||^2 / (2 sigma^2)); the estimator averages kernel
    values over all pairs including self-pairs (biased V-statistic), which is
    exactly zero for identical multisets.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise InputError(f"sample shapes {x.shape}, {y.shape} disagree")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise InputError("need at least two samples on each side")
    sigma = bandwidth if bandwidth is not None else median_bandwidth(x, y)
    if sigma <= 0.0:
        raise InputError(f"bandwidth must be positive, got {sigma}")
    g = -1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(g * cdist(x, x, "sqeuclidean")).mean()
    kyy = np.exp(g * cdist(y, y, "sqeuclidean")).mean()
    kxy = np.exp(g * cdist(x, y, "sqeuclidean")).mean()
    return max(float(kxx + kyy - 2.0 * kxy), 0.0)


@dataclass
class MmdReport:
    values: dict[str, float]
    bandwidths: dict[str, float]
    n_generated: int
    n_reference: int

    def to_dict(self) -> dict:
        return {"mmd": self.values, "bandwidth": self.bandwidths,
                "n_generated": self.n_generated, "n_reference": self.n_reference}


def agent_attribute_samples(sequences: list[SceneSequence]) -> dict[str, np.ndarray]:
    """Pool active-agent attribute rows per group across all frames."""
    cols: dict[str, list] = {g: [] for g in ATTRIBUTE_GROUPS}
    for seq in sequences:
        for f in seq.frames:
            for a in f.agents:
                if a.active:
                    for g, attrs in ATTRIBUTE_GROUPS.items():
                        cols[g].append([getattr(a, k) for k in attrs])
    return {g: np.asarray(v, dtype=np.float64).reshape(-1, len(ATTRIBUTE_GROUPS[g]))
            for g, v in cols.items()}


def mmd_report(generated: list[SceneSequence], reference: list[SceneSequence]
               ) -> MmdReport:
    gs = agent_attribute_samples(generated)
    rs = agent_attribute_samples(reference)
    values = {}
    bws = {}
    n_g = n_r = 0
    for g in ATTRIBUTE_GROUPS:
        x, y = gs[g], rs[g]
        n_g, n_r = x.shape[0], y.shape[0]
        bw = median_bandwidth(x, y)
        values[g] = mmd(x, y, bw)
        bws[g] = bw
    return MmdReport(values=values, bandwidths=bws, n_generated=n_g, n_reference=n_r)
