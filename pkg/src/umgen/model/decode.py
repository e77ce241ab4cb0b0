"""Cached frame-by-frame inference sessions.

A session holds the sliding window of token frames plus the per-position
temporal caches; each ``step`` produces the next frame's token ids.  The flat
baseline session decodes the same scenes as one long causal stream and exists
for the complexity comparison.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError
from ..numerics import CacheMeter, Tensor
from ..tokenizer import MOD_AGENT, MOD_EGO, MOD_IMAGE, MOD_MAP, TokenLayout
from .bundle import ModelBundle
from .config import ModelConfig
from .kernels import (
    CrossPack, StackPack, cross_stack_np, full_stack_np, gelu_np, ln_np,
    pack_cross, pack_stack, stack_token_step, temporal_stack_append,
)
from .network import MOD_KEYS, ama_weight_matrix, decode_ego_ids

SampleFn = Callable[[np.ndarray, np.random.Generator], int]


class _EmbedPack:
    """Per-modality tables and projections in inference layout."""

    def __init__(self, params: dict[str, Tensor], layout: TokenLayout,
                 prefix: str = "embed"):
        g = lambda n: np.ascontiguousarray(params[n].data, dtype=np.float32)
        self.pe = g(f"{prefix}.pe")
        self.tables = [g(f"{prefix}.{k}.table") for k in MOD_KEYS]
        self.w1 = [g(f"{prefix}.{k}.mlp.w1") for k in MOD_KEYS]
        self.b1 = [g(f"{prefix}.{k}.mlp.b1") for k in MOD_KEYS]
        self.w2 = [g(f"{prefix}.{k}.mlp.w2") for k in MOD_KEYS]
        self.b2 = [g(f"{prefix}.{k}.mlp.b2") for k in MOD_KEYS]
        self.modality_of = layout.modality_of

    def frame(self, ids: np.ndarray) -> np.ndarray:
        """Embed one (N,) frame -> (N, D)."""
        n = ids.shape[0]
        out = np.empty((n, self.pe.shape[1]), dtype=np.float32)
        for m in range(4):
            sel = self.modality_of == m
            rows = self.tables[m][ids[sel]] + self.pe[sel]
            out[sel] = gelu_np(rows @ self.w1[m] + self.b1[m]) @ self.w2[m] + self.b2[m]
        return out

    def token(self, token_id: int, pos: int, modality: int) -> np.ndarray:
        row = self.tables[modality][token_id] + self.pe[pos]
        return gelu_np(row @ self.w1[modality] + self.b1[modality]) \
            @ self.w2[modality] + self.b2[modality]


class _HeadPack:
    def __init__(self, params: dict[str, Tensor], prefix: str = "head"):
        g = lambda n: np.ascontiguousarray(params[n].data, dtype=np.float32)
        self.lng = [g(f"{prefix}.{k}.ln.g") for k in MOD_KEYS]
        self.lnb = [g(f"{prefix}.{k}.ln.b") for k in MOD_KEYS]
        self.w1 = [g(f"{prefix}.{k}.w1") for k in MOD_KEYS]
        self.b1 = [g(f"{prefix}.{k}.b1") for k in MOD_KEYS]
        self.w2 = [g(f"{prefix}.{k}.w2") for k in MOD_KEYS]
        self.b2 = [g(f"{prefix}.{k}.b2") for k in MOD_KEYS]

    def logits(self, modality: int, x: np.ndarray) -> np.ndarray:
        xn = ln_np(x, self.lng[modality], self.lnb[modality])
        h = gelu_np(xn @ self.w1[modality] + self.b1[modality])
        return h @ self.w2[modality] + self.b2[modality]


def sampling_masks(layout: TokenLayout) -> list[np.ndarray]:
    """Additive logit masks per frame position (-1e9 on disallowed ids)."""
    masks = []
    for pos in range(layout.total):
        m = int(layout.modality_of[pos])
        vocab = layout.vocab(m)
        mask = np.full(vocab, -1e9, dtype=np.float32)
        if not layout.is_boundary[pos]:
            mask[layout.allowed_ids(pos)] = 0.0
        masks.append(mask)
    return masks


class DecoderSession:
    """Sliding-window generation state for the factored model."""

    def __init__(self, bundle: ModelBundle, meter: CacheMeter | None = None,
                 temporal_cap: int | None = None):
        self.bundle = bundle
        self.cfg = bundle.cfg
        self.layout = bundle.layout
        self.meter = meter or CacheMeter()
        cfg = self.cfg
        p = bundle.params
        self.embed = _EmbedPack(p, bundle.layout)
        self.heads = _HeadPack(p)
        self.hist_pack = pack_cross(p, "ego_pred.hist", cfg.layers_ca_hist)
        self.env_pack = pack_cross(p, "ego_pred.env", cfg.layers_ca_env)
        self.tar_time = pack_stack(p, "tar_time", cfg.layers_tar_causal)
        self.tar_bidir = pack_stack(p, "tar_bidir", cfg.layers_tar_bidir)
        self.oar = pack_stack(p, "oar", cfg.layers_oar)
        self.query = np.ascontiguousarray(p["ego_pred.query"].data, dtype=np.float32)
        self.begin = np.ascontiguousarray(p["oar.begin"].data, dtype=np.float32)
        self.fill = (np.ascontiguousarray(p["ama.fill"].data, dtype=np.float32)
                     if bundle.use_ama else None)
        self.masks = sampling_masks(bundle.layout)

        self.cap = temporal_cap or cfg.block
        n, d, hd = cfg.n_positions, cfg.d, cfg.d // cfg.heads
        l1 = cfg.layers_tar_causal
        self.kc = np.zeros((l1, n, cfg.heads, self.cap, hd), dtype=np.float32)
        self.vc = np.zeros((l1, n, cfg.heads, self.cap, hd), dtype=np.float32)
        self.t_len = 0
        self.window: list[np.ndarray] = []
        self.ego_hist = np.zeros((self.cap, 3, d), dtype=np.float32)
        self.last_emb: np.ndarray | None = None
        self._entry_scalars = l1 * n * 2 * d
        self._oar_scratch = np.zeros(n, dtype=np.float32)

    # -- window management --------------------------------------------------

    def prime(self, frames: Sequence[np.ndarray]) -> None:
        if len(frames) == 0:
            raise UsageError("need at least one initial frame")
        self.kc[:] = 0.0
        self.vc[:] = 0.0
        self.t_len = 0
        self.meter.reset()
        self.window = [np.asarray(f, dtype=np.int64) for f in frames[-self.cap:]]
        embs = [self.embed.frame(f) for f in self.window]
        for i, e in enumerate(embs):
            self.ego_hist[i] = e[1:4]
        for i in range(len(self.window) - 1):
            ego_next = self.window[i + 1][1:4]
            self._append_temporal(self._assemble(embs[i], ego_next))
        self.last_emb = embs[-1]

    def _assemble(self, emb: np.ndarray, ego_next_ids: np.ndarray) -> np.ndarray:
        """Frame features with next-step ego tokens and the warped map."""
        lay = self.layout
        c = lay.counts
        e = emb.copy()
        for j, pos in enumerate((1, 2, 3)):
            e[pos] = self.embed.token(int(ego_next_ids[j]), pos, MOD_EGO)
        if self.fill is not None:
            action = decode_ego_ids(np.asarray(ego_next_ids, dtype=np.int64),
                                    lay.bins)
            wmat, oob = ama_weight_matrix(action[2], action[0], action[1],
                                          self.cfg.feat_h, self.cfg.feat_w,
                                          self.cfg.feat_res)
            f = emb[c.cum_ego + 1:c.cum_map - 1]
            e[c.cum_ego + 1:c.cum_map - 1] = (
                wmat @ f + oob.astype(np.float32)[:, None] * self.fill + f)
        return e

    def _append_temporal(self, e_bar: np.ndarray) -> np.ndarray:
        if self.t_len == self.cap:
            self.kc[:, :, :, :-1] = self.kc[:, :, :, 1:]
            self.vc[:, :, :, :-1] = self.vc[:, :, :, 1:]
            self.t_len -= 1
            self.meter.free(self._entry_scalars)
        out = temporal_stack_append(self.tar_time, self.kc, self.vc,
                                    self.t_len, e_bar, self.cfg.heads)
        self.t_len += 1
        self.meter.alloc(self._entry_scalars)
        return out

    # -- generation -----------------------------------------------------------

    def predict_ego_features(self) -> np.ndarray:
        t = len(self.window)
        hist = self.ego_hist[:t].reshape(t * 3, self.cfg.d)
        u = cross_stack_np(self.hist_pack, self.query.copy(), hist, self.cfg.heads)
        env = self.last_emb[self.layout.counts.cum_ego:]
        return cross_stack_np(self.env_pack, u, env, self.cfg.heads)

    def step(self, rng: np.random.Generator, sample: SampleFn,
             ego_override_ids: np.ndarray | None = None,
             agent_overrides: Sequence[tuple[int, int, int]] = (),
             mode: str = "full") -> np.ndarray:
        """Generate the next frame's token ids and advance the window.

        ``agent_overrides`` are (slot, vx_id, vy_id) replacements applied after
        sampling; ``mode`` is "full" or "tar_only" (no ordered decoding).
        """
        if not self.window:
            raise UsageError("session has no context; call prime() first")
        lay = self.layout
        cfg = self.cfg
        n = cfg.n_positions

        u = self.predict_ego_features()
        if ego_override_ids is not None:
            ego_ids = np.asarray(ego_override_ids, dtype=np.int64)
        else:
            logits = self.heads.logits(MOD_EGO, u)
            ego_ids = np.array([sample(logits[j] + self.masks[1 + j], rng)
                                for j in range(3)], dtype=np.int64)

        e_bar = self._assemble(self.last_emb, ego_ids)
        s1 = self._append_temporal(e_bar)
        h = full_stack_np(self.tar_bidir, s1, cfg.heads, causal=False)

        ids = np.empty(n, dtype=np.int64)
        if mode == "tar_only":
            for pos in range(n):
                if lay.is_boundary[pos]:
                    ids[pos] = lay.boundary_ids[pos]
                elif 1 <= pos <= 3:
                    ids[pos] = ego_ids[pos - 1]
                else:
                    m = int(lay.modality_of[pos])
                    logits = self.heads.logits(m, h[pos])
                    ids[pos] = sample(logits + self.masks[pos], rng)
        elif mode == "full":
            l_oar, heads, hd = cfg.layers_oar, cfg.heads, cfg.d // cfg.heads
            okc = np.zeros((l_oar, heads, n, hd), dtype=np.float32)
            ovc = np.zeros((l_oar, heads, n, hd), dtype=np.float32)
            per_token = l_oar * 2 * cfg.d
            w_vec = self.begin + h[0]
            for pos in range(n):
                o = stack_token_step(
                    w_vec.astype(np.float32, copy=True),
                    self.oar.ln1g, self.oar.ln1b, self.oar.wqkv_t, self.oar.bqkv,
                    self.oar.wo_t, self.oar.bo, self.oar.ln2g, self.oar.ln2b,
                    self.oar.w1_t, self.oar.b1, self.oar.w2_t, self.oar.b2,
                    okc, ovc, pos, heads, self._oar_scratch)
                self.meter.alloc(per_token)
                if lay.is_boundary[pos]:
                    ids[pos] = lay.boundary_ids[pos]
                elif 1 <= pos <= 3:
                    ids[pos] = ego_ids[pos - 1]
                else:
                    m = int(lay.modality_of[pos])
                    logits = self.heads.logits(m, o)
                    ids[pos] = sample(logits + self.masks[pos], rng)
                if pos < n - 1:
                    m_next = int(lay.modality_of[pos])
                    w_vec = self.embed.token(int(ids[pos]), pos, m_next) + h[pos + 1]
            self.meter.free(per_token * n)
        else:
            raise UsageError(f"unknown decode mode {mode!r}")

        for slot, vx_id, vy_id in agent_overrides:
            base = lay.payload_positions(MOD_AGENT)[slot * 11]
            ids[base + 3] = vx_id
            ids[base + 4] = vy_id
            # A velocity override targets a concrete road user: a slot the
            # model padded out becomes a vehicle so the override survives
            # decoding.
            if ids[base + 10] == lay.pad_id:
                ids[base + 10] = lay.category_base
        self._advance(ids)
        return ids

    def _advance(self, new_ids: np.ndarray) -> None:
        emb = self.embed.frame(new_ids)
        self.window.append(np.asarray(new_ids, dtype=np.int64))
        if len(self.window) > self.cap:
            self.window.pop(0)
            self.ego_hist[:-1] = self.ego_hist[1:]
            t = len(self.window)
            self.ego_hist[t - 1] = emb[1:4]
        else:
            self.ego_hist[len(self.window) - 1] = emb[1:4]
        self.last_emb = emb


class VanillaSession:
    """Flat single-stream causal decoding over concatenated frames."""

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig,
                 layout: TokenLayout, layers: int, frames_cap: int,
                 meter: CacheMeter | None = None):
        self.cfg = cfg
        self.layout = layout
        self.layers = layers
        self.frames_cap = frames_cap
        self.meter = meter or CacheMeter()
        self.embed = _EmbedPack(params, layout, prefix="vanilla.embed")
        self.frame_emb = np.ascontiguousarray(
            params["vanilla.embed.frame"].data, dtype=np.float32)
        self.heads = _HeadPack(params, prefix="vanilla.head")
        self.stack = pack_stack(params, "vanilla", layers)
        self.masks = sampling_masks(layout)
        n, d, hd = cfg.n_positions, cfg.d, cfg.d // cfg.heads
        cap = frames_cap * n
        self.kc = np.zeros((layers, cfg.heads, cap, hd), dtype=np.float32)
        self.vc = np.zeros((layers, cfg.heads, cap, hd), dtype=np.float32)
        self.pos = 0
        self.last_x: np.ndarray | None = None
        self._scratch = np.zeros(cap, dtype=np.float32)

    def prime(self, frames: Sequence[np.ndarray]) -> None:
        """Consume context frames in one batched pass, filling the caches."""
        if len(frames) > self.frames_cap - 1:
            raise UsageError(
                f"{len(frames)} frames exceed the flat baseline's context "
                f"({self.frames_cap - 1} + 1 generation frame)")
        cfg = self.cfg
        n, d, heads = cfg.n_positions, cfg.d, cfg.heads
        hd = d // heads
        x = np.concatenate([
            self.embed.frame(np.asarray(f, dtype=np.int64)) + self.frame_emb[t]
            for t, f in enumerate(frames)])
        s = x.shape[0]
        pack = self.stack
        for l in range(self.layers):
            xn = ln_np(x, pack.ln1g[l], pack.ln1b[l])
            qkv = xn @ pack.wqkv[l] + pack.bqkv[l]
            q = qkv[:, :d].reshape(s, heads, hd).transpose(1, 0, 2)
            self.kc[l, :, :s] = qkv[:, d:2 * d].reshape(s, heads, hd).transpose(1, 0, 2)
            self.vc[l, :, :s] = qkv[:, 2 * d:].reshape(s, heads, hd).transpose(1, 0, 2)
            # Chunked causal attention keeps the score matrix small.
            att = np.empty((heads, s, hd), dtype=np.float32)
            for lo in range(0, s, 512):
                hi = min(lo + 512, s)
                sc = q[:, lo:hi] @ self.kc[l, :, :s].transpose(0, 2, 1) / np.sqrt(hd)
                mask = np.triu(np.full((hi - lo, s), -1e9, dtype=np.float32), k=lo + 1)
                sc += mask
                sc -= sc.max(axis=-1, keepdims=True)
                e = np.exp(sc)
                w = e / e.sum(axis=-1, keepdims=True)
                att[:, lo:hi] = w @ self.vc[l, :, :s]
            x = x + att.transpose(1, 0, 2).reshape(s, d) @ pack.wo[l] + pack.bo[l]
            xn = ln_np(x, pack.ln2g[l], pack.ln2b[l])
            x = x + gelu_np(xn @ pack.w1[l] + pack.b1[l]) @ pack.w2[l] + pack.b2[l]
        self.pos = s
        self.meter.reset()
        self.meter.alloc(self.layers * 2 * d * s)
        self.last_x = x[-1].copy()

    def step_token(self, rng: np.random.Generator, sample: SampleFn) -> int:
        """Sample the token at the current position and consume it."""
        lay = self.layout
        pos_in_frame = self.pos % self.cfg.n_positions
        if lay.is_boundary[pos_in_frame]:
            token = int(lay.boundary_ids[pos_in_frame])
        else:
            m = int(lay.modality_of[pos_in_frame])
            logits = self.heads.logits(m, self.last_x)
            token = sample(logits + self.masks[pos_in_frame], rng)
        m = int(lay.modality_of[pos_in_frame])
        x = (self.embed.token(token, pos_in_frame, m)
             + self.frame_emb[self.pos // self.cfg.n_positions])
        pack = self.stack
        self.last_x = stack_token_step(
            x.astype(np.float32, copy=True),
            pack.ln1g, pack.ln1b, pack.wqkv_t, pack.bqkv, pack.wo_t, pack.bo,
            pack.ln2g, pack.ln2b, pack.w1_t, pack.b1, pack.w2_t, pack.b2,
            self.kc, self.vc, self.pos, self.cfg.heads, self._scratch)
        self.pos += 1
        self.meter.alloc(self.layers * 2 * self.cfg.d)
        return token
