"""Inference-path primitives: packed weights, numpy stacks, numba token step.

The per-token hot loop (ordered intra-frame decoding and the flat baseline)
runs as a single jitted call per stack; frame-level pieces (temporal stage,
cross-attention, embeddings) are batched numpy.  Both mirror the training
path bit-for-bit in structure and are pinned to it by equivalence tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import erf

from ..numerics import Tensor

_LN_EPS = 1e-5
_INV_SQRT2 = 0.7071067811865476


# ---------------------------------------------------------------------------
# Weight packing
# ---------------------------------------------------------------------------

@dataclass
class StackPack:
    """Self-attention block stack, stacked along the layer axis."""

    ln1g: np.ndarray  # (L, d)
    ln1b: np.ndarray
    wqkv: np.ndarray  # (L, d, 3d)  training orientation
    wqkv_t: np.ndarray  # (L, 3d, d) gemv orientation
    bqkv: np.ndarray
    wo: np.ndarray
    wo_t: np.ndarray
    bo: np.ndarray
    ln2g: np.ndarray
    ln2b: np.ndarray
    w1: np.ndarray
    w1_t: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    w2_t: np.ndarray
    b2: np.ndarray

    @property
    def layers(self) -> int:
        return self.ln1g.shape[0]


@dataclass
class CrossPack:
    ln1g: np.ndarray
    ln1b: np.ndarray
    lnkvg: np.ndarray
    lnkvb: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wkv: np.ndarray
    bkv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2g: np.ndarray
    ln2b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def layers(self) -> int:
        return self.ln1g.shape[0]


def _np(params: dict[str, Tensor], name: str) -> np.ndarray:
    return np.ascontiguousarray(params[name].data, dtype=np.float32)


def pack_stack(params: dict[str, Tensor], prefix: str, layers: int) -> StackPack:
    def col(n):
        return np.stack([_np(params, f"{prefix}.l{i}.{n}") for i in range(layers)])
    wqkv, wo, w1, w2 = col("attn.wqkv"), col("attn.wo"), col("mlp.w1"), col("mlp.w2")
    return StackPack(
        ln1g=col("ln1.g"), ln1b=col("ln1.b"),
        wqkv=wqkv, wqkv_t=np.ascontiguousarray(wqkv.transpose(0, 2, 1)),
        bqkv=col("attn.bqkv"),
        wo=wo, wo_t=np.ascontiguousarray(wo.transpose(0, 2, 1)), bo=col("attn.bo"),
        ln2g=col("ln2.g"), ln2b=col("ln2.b"),
        w1=w1, w1_t=np.ascontiguousarray(w1.transpose(0, 2, 1)), b1=col("mlp.b1"),
        w2=w2, w2_t=np.ascontiguousarray(w2.transpose(0, 2, 1)), b2=col("mlp.b2"))


def pack_cross(params: dict[str, Tensor], prefix: str, layers: int) -> CrossPack:
    def col(n):
        return np.stack([_np(params, f"{prefix}.l{i}.{n}") for i in range(layers)])
    return CrossPack(
        ln1g=col("ln1.g"), ln1b=col("ln1.b"), lnkvg=col("lnkv.g"), lnkvb=col("lnkv.b"),
        wq=col("attn.wq"), bq=col("attn.bq"), wkv=col("attn.wkv"), bkv=col("attn.bkv"),
        wo=col("attn.wo"), bo=col("attn.bo"), ln2g=col("ln2.g"), ln2b=col("ln2.b"),
        w1=col("mlp.w1"), b1=col("mlp.b1"), w2=col("mlp.w2"), b2=col("mlp.b2"))


# ---------------------------------------------------------------------------
# numpy building blocks (frame-level)
# ---------------------------------------------------------------------------

def ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _LN_EPS) * g + b


def gelu_np(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def _heads_split(x: np.ndarray, heads: int) -> np.ndarray:
    s, d = x.shape
    return x.reshape(s, heads, d // heads).transpose(1, 0, 2)  # (H, S, hd)


def attention_np(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
                 causal: bool) -> np.ndarray:
    """Single-sequence multi-head attention, (S_q, d) x (S_k, d) -> (S_q, d)."""
    qh, kh, vh = _heads_split(q, heads), _heads_split(k, heads), _heads_split(v, heads)
    hd = qh.shape[-1]
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(hd)
    if causal:
        s_q, s_k = scores.shape[1], scores.shape[2]
        mask = np.triu(np.full((s_q, s_k), -1e9, dtype=scores.dtype), k=s_k - s_q + 1)
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)
    out = w @ vh
    return out.transpose(1, 0, 2).reshape(q.shape[0], -1)


def full_stack_np(pack: StackPack, x: np.ndarray, heads: int, causal: bool) -> np.ndarray:
    """Run a full (uncached) self-attention stack over one (S, d) sequence."""
    d = x.shape[-1]
    for l in range(pack.layers):
        xn = ln_np(x, pack.ln1g[l], pack.ln1b[l])
        qkv = xn @ pack.wqkv[l] + pack.bqkv[l]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        att = attention_np(q, k, v, heads, causal)
        x = x + att @ pack.wo[l] + pack.bo[l]
        xn = ln_np(x, pack.ln2g[l], pack.ln2b[l])
        x = x + gelu_np(xn @ pack.w1[l] + pack.b1[l]) @ pack.w2[l] + pack.b2[l]
    return x


def cross_stack_np(pack: CrossPack, q: np.ndarray, kv: np.ndarray, heads: int) -> np.ndarray:
    d = q.shape[-1]
    for l in range(pack.layers):
        qn = ln_np(q, pack.ln1g[l], pack.ln1b[l])
        kvn = ln_np(kv, pack.lnkvg[l], pack.lnkvb[l])
        qq = qn @ pack.wq[l] + pack.bq[l]
        kvp = kvn @ pack.wkv[l] + pack.bkv[l]
        att = attention_np(qq, kvp[:, :d], kvp[:, d:], heads, causal=False)
        q = q + att @ pack.wo[l] + pack.bo[l]
        qn = ln_np(q, pack.ln2g[l], pack.ln2b[l])
        q = q + gelu_np(qn @ pack.w1[l] + pack.b1[l]) @ pack.w2[l] + pack.b2[l]
    return q


def temporal_stack_append(pack: StackPack, kc: np.ndarray, vc: np.ndarray,
                          t: int, x: np.ndarray, heads: int) -> np.ndarray:
    """Append one frame to the per-position temporal caches and return the
    stack output at this time step for every position.

    kc/vc: (L, N, H, T_cap, hd); x: (N, d) frame features.
    """
    n, d = x.shape
    hd = d // heads
    for l in range(pack.layers):
        xn = ln_np(x, pack.ln1g[l], pack.ln1b[l])
        qkv = xn @ pack.wqkv[l] + pack.bqkv[l]
        q = qkv[:, :d].reshape(n, heads, hd)
        kc[l, :, :, t, :] = qkv[:, d:2 * d].reshape(n, heads, hd)
        vc[l, :, :, t, :] = qkv[:, 2 * d:].reshape(n, heads, hd)
        keys = kc[l, :, :, :t + 1, :]
        vals = vc[l, :, :, :t + 1, :]
        scores = np.einsum("nhj,nhtj->nht", q, keys) / math.sqrt(hd)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        w = e / e.sum(axis=-1, keepdims=True)
        att = np.einsum("nht,nhtj->nhj", w, vals).reshape(n, d)
        x = x + att @ pack.wo[l] + pack.bo[l]
        xn = ln_np(x, pack.ln2g[l], pack.ln2b[l])
        x = x + gelu_np(xn @ pack.w1[l] + pack.b1[l]) @ pack.w2[l] + pack.b2[l]
    return x


# ---------------------------------------------------------------------------
# numba per-token step
# ---------------------------------------------------------------------------

@njit(cache=True)
def stack_token_step(x, ln1g, ln1b, wqkv_t, bqkv, wo_t, bo, ln2g, ln2b,
                     w1_t, b1, w2_t, b2, kc, vc, pos, heads, scratch):
    """One token through a causal stack with cache append at index ``pos``.

    x: (d,) float32, consumed;  kc/vc: (L, H, cap, hd);  scratch: (cap,).
    Returns the stack output for this token.
    """
    layers = wqkv_t.shape[0]
    d = x.shape[0]
    hd = d // heads
    ff = w1_t.shape[1]
    xn = np.empty(d, np.float32)
    inv_scale = np.float32(1.0 / math.sqrt(hd))
    n = pos + 1
    for l in range(layers):
        m = np.float32(0.0)
        for i in range(d):
            m += x[i]
        m /= d
        v = np.float32(0.0)
        for i in range(d):
            c = x[i] - m
            v += c * c
        inv = np.float32(1.0) / np.float32(math.sqrt(v / d + _LN_EPS))
        for i in range(d):
            xn[i] = (x[i] - m) * inv * ln1g[l, i] + ln1b[l, i]
        qkv = np.dot(wqkv_t[l], xn) + bqkv[l]
        for h in range(heads):
            for j in range(hd):
                kc[l, h, pos, j] = qkv[d + h * hd + j]
                vc[l, h, pos, j] = qkv[2 * d + h * hd + j]
        att = np.zeros(d, np.float32)
        for h in range(heads):
            mx = np.float32(-1e30)
            for t in range(n):
                s = np.float32(0.0)
                for j in range(hd):
                    s += qkv[h * hd + j] * kc[l, h, t, j]
                s *= inv_scale
                scratch[t] = s
                if s > mx:
                    mx = s
            tot = np.float32(0.0)
            for t in range(n):
                e = np.float32(math.exp(scratch[t] - mx))
                scratch[t] = e
                tot += e
            itot = np.float32(1.0) / tot
            for t in range(n):
                wgt = scratch[t] * itot
                for j in range(hd):
                    att[h * hd + j] += wgt * vc[l, h, t, j]
        x = x + np.dot(wo_t[l], att) + bo[l]
        m = np.float32(0.0)
        for i in range(d):
            m += x[i]
        m /= d
        v = np.float32(0.0)
        for i in range(d):
            c = x[i] - m
            v += c * c
        inv = np.float32(1.0) / np.float32(math.sqrt(v / d + _LN_EPS))
        for i in range(d):
            xn[i] = (x[i] - m) * inv * ln2g[l, i] + ln2b[l, i]
        a = np.dot(w1_t[l], xn) + b1[l]
        for j in range(ff):
            a[j] = a[j] * np.float32(0.5) * (np.float32(1.0)
                                             + np.float32(math.erf(a[j] * _INV_SQRT2)))
        x = x + np.dot(w2_t[l], a) + b2[l]
    return x
