"""Per-token decode timing and cache-size comparison: factored vs flat AR.

Timing is weight-agnostic, so both models run randomly initialized weights on
randomly drawn (layout-valid) context frames.  Memory is the live cached
key/value scalar counter for a T-frame context, which for the flat baseline
equals T * N * layers * 2 * D exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..core import Profile
from ..model.bundle import ModelBundle
from ..model.decode import DecoderSession, VanillaSession
from ..model.network import init_vanilla_params
from ..numerics import CacheMeter
from ..rollout import top_k_sample
from ..tokenizer import TokenLayout

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@dataclass
class BenchRow:
    model: str
    t: int
    per_token_us_median: float
    peak_scalars: int
    peak_bytes: int
    out_of_context: bool = False


@dataclass
class BenchReport:
    rows: list[BenchRow]

    def to_csv(self) -> str:
        lines = ["model,T,per_token_us_median,peak_scalars,peak_bytes"]
        for r in self.rows:
            if r.out_of_context:
                lines.append(f"{r.model},{r.t},out-of-context,,")
            else:
                lines.append(f"{r.model},{r.t},{r.per_token_us_median:.1f},"
                             f"{r.peak_scalars},{r.peak_bytes}")
        return "\n".join(lines) + "\n"

    def median(self, model: str, t: int) -> float:
        for r in self.rows:
            if r.model == model and r.t == t:
                return r.per_token_us_median
        raise KeyError((model, t))

    def scalars(self, model: str, t: int) -> int:
        for r in self.rows:
            if r.model == model and r.t == t:
                return r.peak_scalars
        raise KeyError((model, t))


def random_token_frame(layout: TokenLayout, rng: np.random.Generator) -> np.ndarray:
    """A layout-valid frame of uniformly drawn payload ids."""
    ids = np.empty(layout.total, dtype=np.int64)
    for pos in range(layout.total):
        if layout.is_boundary[pos]:
            ids[pos] = layout.boundary_ids[pos]
        else:
            allowed = layout.allowed_ids(pos)
            ids[pos] = allowed[rng.integers(0, len(allowed))]
    return ids


def _run_single_lane(fn):
    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            return fn()
    return fn()


def bench_per_token(bundle: ModelBundle, models: list[str], t_list: list[int],
                    reps: int = 5, seed: int = 0) -> BenchReport:
    cfg = bundle.cfg
    layout = bundle.layout
    profile = bundle.profile
    n = cfg.n_positions
    cap = max(t_list) + 1
    sample = lambda logits, r: top_k_sample(logits, profile.top_k,
                                            profile.temperature, r)
    rows: list[BenchRow] = []

    def run():
        for model in models:
            if model == "vanilla":
                params, layers = init_vanilla_params(cfg, frames_cap=cap + 1,
                                                     seed=seed)
                for t in t_list:
                    if t + 1 > cap + 1:
                        rows.append(BenchRow(model, t, float("nan"), 0, 0,
                                             out_of_context=True))
                        continue
                    times = []
                    scalars = 0
                    for rep in range(reps):
                        rng = np.random.default_rng([seed, t, rep])
                        frames = [random_token_frame(layout, rng) for _ in range(t)]
                        meter = CacheMeter()
                        sess = VanillaSession(params, cfg, layout, layers,
                                              frames_cap=cap + 1, meter=meter)
                        sess.prime(frames)
                        scalars = meter.current
                        for _ in range(n):
                            t0 = time.perf_counter_ns()
                            sess.step_token(rng, sample)
                            times.append((time.perf_counter_ns() - t0) / 1e3)
                    rows.append(BenchRow(model, t, float(np.median(times)),
                                         scalars, scalars * 4))
            elif model == "umgen":
                for t in t_list:
                    times = []
                    scalars = 0
                    for rep in range(reps):
                        rng = np.random.default_rng([seed, t, rep])
                        frames = [random_token_frame(layout, rng) for _ in range(t)]
                        meter = CacheMeter()
                        sess = DecoderSession(bundle, meter=meter, temporal_cap=cap)
                        sess.prime(frames)
                        t0 = time.perf_counter_ns()
                        sess.step(rng, sample)
                        times.append((time.perf_counter_ns() - t0) / 1e3 / n)
                        scalars = meter.current
                    rows.append(BenchRow(model, t, float(np.median(times)),
                                         scalars, scalars * 4))
            else:
                raise ValueError(f"unknown model kind {model!r}")

    _run_single_lane(run)
    return BenchReport(rows=rows)
