"""Training-path network definition.

All forward math here runs on the autodiff tape; the cached inference path in
``decode.py`` mirrors it numerically and is pinned to it by equivalence tests.

Per-frame flow: token embeddings -> ego-action prediction (two cross-attention
stacks) -> map feature warp by that action -> temporal attention per token
position followed by intra-frame bidirectional attention (the coarse frame
prior h) -> ordered intra-frame decoding fused additively with h.
"""

from __future__ import annotations

import math
import numpy as np

from ..errors import UsageError
from ..numerics import (
    MASK_NEG, Tensor, add, concat, cross_entropy, dropout, embedding_gather,
    gelu, layer_norm, matmul, mul, reshape, scale, slice_, softmax_masked,
    sum_, transpose,
)
from ..tokenizer import (
    EGO_ATTRS, MOD_AGENT, MOD_EGO, MOD_IMAGE, MOD_MAP, RANGES, TokenLayout,
)
from .config import ModelConfig

MODALITIES = (MOD_EGO, MOD_MAP, MOD_AGENT, MOD_IMAGE)
MOD_KEYS = ("ego", "map", "agent", "image")


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

def _normal(rng: np.random.Generator, shape, dtype, std=0.02):
    return (rng.standard_normal(shape) * std).astype(dtype)


def _add_block(params, prefix, d, ff, rng, dtype, cross: bool, std: float = 0.02):
    def p(name, arr):
        params[f"{prefix}.{name}"] = Tensor(arr, requires_grad=True, name=f"{prefix}.{name}")

    p("ln1.g", np.ones(d, dtype))
    p("ln1.b", np.zeros(d, dtype))
    if cross:
        p("lnkv.g", np.ones(d, dtype))
        p("lnkv.b", np.zeros(d, dtype))
        p("attn.wq", _normal(rng, (d, d), dtype, std))
        p("attn.wkv", _normal(rng, (d, 2 * d), dtype, std))
        p("attn.bq", np.zeros(d, dtype))
        p("attn.bkv", np.zeros(2 * d, dtype))
    else:
        p("attn.wqkv", _normal(rng, (d, 3 * d), dtype, std))
        p("attn.bqkv", np.zeros(3 * d, dtype))
    p("attn.wo", _normal(rng, (d, d), dtype, std))
    p("attn.bo", np.zeros(d, dtype))
    p("ln2.g", np.ones(d, dtype))
    p("ln2.b", np.zeros(d, dtype))
    p("mlp.w1", _normal(rng, (d, ff), dtype, std))
    p("mlp.b1", np.zeros(ff, dtype))
    p("mlp.w2", _normal(rng, (ff, d), dtype, std))
    p("mlp.b2", np.zeros(d, dtype))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                include_ama: bool = True, init_std: float = 0.02) -> dict[str, Tensor]:
    """Fresh parameter set.

    ``init_std`` is the weight scale; gradient verification uses a larger
    value so layer norms sit far from their vanishing-variance point, where
    finite differences lose accuracy to curvature.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def p(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    def nrm(shape):
        return _normal(rng, shape, dtype, init_std)

    d, ff = cfg.d, cfg.ff
    p("embed.pe", nrm((cfg.n_positions, d)))
    for m, key in zip(MODALITIES, MOD_KEYS):
        p(f"embed.{key}.table", nrm((cfg.vocabs[m], d)))
        p(f"embed.{key}.mlp.w1", nrm((d, d)))
        p(f"embed.{key}.mlp.b1", np.zeros(d, dtype))
        p(f"embed.{key}.mlp.w2", nrm((d, d)))
        p(f"embed.{key}.mlp.b2", np.zeros(d, dtype))
        p(f"head.{key}.ln.g", np.ones(d, dtype))
        p(f"head.{key}.ln.b", np.zeros(d, dtype))
        p(f"head.{key}.w1", nrm((d, d)))
        p(f"head.{key}.b1", np.zeros(d, dtype))
        p(f"head.{key}.w2", nrm((d, cfg.vocabs[m])))
        p(f"head.{key}.b2", np.zeros(cfg.vocabs[m], dtype))

    p("ego_pred.query", nrm((3, d)))
    for i in range(cfg.layers_ca_hist):
        _add_block(params, f"ego_pred.hist.l{i}", d, ff, rng, dtype, cross=True, std=init_std)
    for i in range(cfg.layers_ca_env):
        _add_block(params, f"ego_pred.env.l{i}", d, ff, rng, dtype, cross=True, std=init_std)
    if include_ama:
        p("ama.fill", nrm((d,)))
    for i in range(cfg.layers_tar_causal):
        _add_block(params, f"tar_time.l{i}", d, ff, rng, dtype, cross=False, std=init_std)
    for i in range(cfg.layers_tar_bidir):
        _add_block(params, f"tar_bidir.l{i}", d, ff, rng, dtype, cross=False, std=init_std)
    p("oar.begin", nrm((d,)))
    for i in range(cfg.layers_oar):
        _add_block(params, f"oar.l{i}", d, ff, rng, dtype, cross=False, std=init_std)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(int(p.data.size) for p in params.values())


# ---------------------------------------------------------------------------
# Shared forward pieces
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _mha(q: Tensor, k: Tensor, v: Tensor, heads: int,
         mask: np.ndarray | None) -> Tensor:
    """Multi-head attention over the last two axes (seq, dim)."""
    *lead, s_q, d = q.shape
    s_k = k.shape[-2]
    hd = d // heads
    def split(t, s):
        t = reshape(t, (*lead, s, heads, hd))
        return transpose(t, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
    qh, kh, vh = split(q, s_q), split(k, s_k), split(v, s_k)
    scores = scale(matmul(qh, transpose(kh, (*range(len(lead)), len(lead), len(lead) + 2, len(lead) + 1))),
                   1.0 / math.sqrt(hd))
    att = softmax_masked(scores, mask)
    out = matmul(att, vh)
    out = transpose(out, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
    return reshape(out, (*lead, s_q, d))


def _self_block(params, prefix: str, x: Tensor, mask: np.ndarray | None,
                cfg: ModelConfig, rng, q_last_only: bool = False) -> Tensor:
    g = lambda n: params[f"{prefix}.{n}"]
    xn = layer_norm(x, g("ln1.g"), g("ln1.b"))
    qkv = _linear(xn, g("attn.wqkv"), g("attn.bqkv"))
    d = cfg.d
    q, k, v = (slice_(qkv, (..., slice(i * d, (i + 1) * d))) for i in range(3))
    if q_last_only:
        q = slice_(q, (..., slice(-1, None), slice(None)))
        mask = None if mask is None else mask[..., -1:, :]
        x = slice_(x, (..., slice(-1, None), slice(None)))
    att = _mha(q, k, v, cfg.heads, mask)
    x = add(x, dropout(_linear(att, g("attn.wo"), g("attn.bo")), cfg.dropout, rng))
    xn = layer_norm(x, g("ln2.g"), g("ln2.b"))
    h = gelu(_linear(xn, g("mlp.w1"), g("mlp.b1")))
    return add(x, dropout(_linear(h, g("mlp.w2"), g("mlp.b2")), cfg.dropout, rng))


def _cross_block(params, prefix: str, q: Tensor, kv: Tensor,
                 cfg: ModelConfig, rng) -> Tensor:
    g = lambda n: params[f"{prefix}.{n}"]
    qn = layer_norm(q, g("ln1.g"), g("ln1.b"))
    kvn = layer_norm(kv, g("lnkv.g"), g("lnkv.b"))
    qq = _linear(qn, g("attn.wq"), g("attn.bq"))
    kvp = _linear(kvn, g("attn.wkv"), g("attn.bkv"))
    d = cfg.d
    k = slice_(kvp, (..., slice(0, d)))
    v = slice_(kvp, (..., slice(d, 2 * d)))
    att = _mha(qq, k, v, cfg.heads, None)
    q = add(q, dropout(_linear(att, g("attn.wo"), g("attn.bo")), cfg.dropout, rng))
    qn = layer_norm(q, g("ln2.g"), g("ln2.b"))
    h = gelu(_linear(qn, g("mlp.w1"), g("mlp.b1")))
    return add(q, dropout(_linear(h, g("mlp.w2"), g("mlp.b2")), cfg.dropout, rng))


def head_logits(params, modality: int, x: Tensor) -> Tensor:
    key = MOD_KEYS[modality]
    g = lambda n: params[f"head.{key}.{n}"]
    xn = layer_norm(x, g("ln.g"), g("ln.b"))
    h = gelu(_linear(xn, g("w1"), g("b1")))
    return _linear(h, g("w2"), g("b2"))


def causal_mask(s: int, dtype=np.float32) -> np.ndarray:
    m = np.zeros((s, s), dtype=dtype)
    m[np.triu_indices(s, k=1)] = MASK_NEG
    return m


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def _segment_bounds(layout: TokenLayout) -> list[tuple[int, int]]:
    c = layout.counts
    return [(0, c.cum_ego), (c.cum_ego, c.cum_map),
            (c.cum_map, c.cum_agent), (c.cum_agent, c.cum_image)]


def embed_tokens(params, cfg: ModelConfig, layout: TokenLayout,
                 tokens: np.ndarray) -> Tensor:
    """Embed (..., N) token ids into (..., N, D) features.

    Each modality has its own table and projection; a learnable positional
    embedding over the N intra-frame slots is added before the projection.
    """
    if tokens.shape[-1] != layout.total:
        raise UsageError(f"token array last dim {tokens.shape[-1]} != {layout.total}")
    pe = params["embed.pe"]
    segs = []
    for m, key, (lo, hi) in zip(MODALITIES, MOD_KEYS, _segment_bounds(layout)):
        ids = tokens[..., lo:hi]
        e = embedding_gather(params[f"embed.{key}.table"], ids)
        e = add(e, slice_(pe, (slice(lo, hi), slice(None))))
        h = gelu(_linear(e, params[f"embed.{key}.mlp.w1"], params[f"embed.{key}.mlp.b1"]))
        segs.append(_linear(h, params[f"embed.{key}.mlp.w2"], params[f"embed.{key}.mlp.b2"]))
    return concat(segs, axis=tokens.ndim - 1)


# ---------------------------------------------------------------------------
# Action-aware map feature warp
# ---------------------------------------------------------------------------

def ama_grid(theta: float, dx: float, dy: float, h: int, w: int,
             resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Source sampling coordinates for each target cell of an ego-centered grid.

    Row r of the grid lies (h//2 - r) * resolution meters ahead; column c lies
    (c - w//2) * resolution meters to the left.  The returned float (row, col)
    coordinates locate each target cell's content in the source frame; the
    boolean mask flags targets whose source falls outside the grid.
    """
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    x = (h // 2 - rows)[:, None] * resolution * np.ones((1, w))   # forward, m
    y = np.ones((h, 1)) * ((cols - w // 2)[None, :] * resolution)  # left, m
    ct, st = math.cos(theta), math.sin(theta)
    xs = ct * x - st * y + dx
    ys = st * x + ct * y + dy
    r_src = h // 2 - xs / resolution
    c_src = w // 2 + ys / resolution
    oob = (r_src < 0) | (r_src > h - 1) | (c_src < 0) | (c_src > w - 1)
    return np.stack([r_src, c_src], axis=-1), oob


def ama_weight_matrix(theta: float, dx: float, dy: float, h: int, w: int,
                      resolution: float, dtype=np.float32
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation as an (h*w, h*w) matrix plus the fill mask."""
    src, oob = ama_grid(theta, dx, dy, h, w, resolution)
    n = h * w
    wmat = np.zeros((n, n), dtype=dtype)
    rs = src[..., 0].reshape(-1)
    cs = src[..., 1].reshape(-1)
    ob = oob.reshape(-1)
    for i in range(n):
        if ob[i]:
            continue
        r0 = min(int(math.floor(rs[i])), h - 2) if h > 1 else 0
        c0 = min(int(math.floor(cs[i])), w - 2) if w > 1 else 0
        tr = rs[i] - r0
        tc = cs[i] - c0
        r1 = min(r0 + 1, h - 1)
        c1 = min(c0 + 1, w - 1)
        wmat[i, r0 * w + c0] += (1 - tr) * (1 - tc)
        wmat[i, r0 * w + c1] += (1 - tr) * tc
        wmat[i, r1 * w + c0] += tr * (1 - tc)
        wmat[i, r1 * w + c1] += tr * tc
    return wmat, ob


def ama_transform(map_feat: Tensor, wmat: np.ndarray, oob: np.ndarray,
                  fill: Tensor) -> Tensor:
    """Warp flattened map features and add them residually.

    ``map_feat`` is (..., h*w, D); ``wmat`` broadcasts over the leading axes.
    Out-of-view targets receive the learnable fill vector instead of samples.
    """
    warped = matmul(Tensor(wmat), map_feat)
    fill_term = mul(Tensor(oob.astype(map_feat.data.dtype)[..., None]),
                    reshape(fill, (1, -1)))
    return add(add(warped, fill_term), map_feat)


def actions_to_grids(actions: np.ndarray, cfg: ModelConfig, dtype=np.float32
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Weight matrices and fill masks for a (..., 3) array of (dx, dy, dtheta)."""
    lead = actions.shape[:-1]
    n = cfg.feat_h * cfg.feat_w
    wm = np.zeros(lead + (n, n), dtype=dtype)
    ob = np.zeros(lead + (n,), dtype=bool)
    for idx in np.ndindex(lead):
        dx, dy, th = actions[idx]
        wm[idx], ob[idx] = ama_weight_matrix(th, dx, dy, cfg.feat_h, cfg.feat_w,
                                             cfg.feat_res, dtype=dtype)
    return wm, ob


def decode_ego_ids(ego_ids: np.ndarray, bins: int) -> np.ndarray:
    """(..., 3) ego token ids -> (..., 3) continuous (dx, dy, dtheta)."""
    out = np.empty(ego_ids.shape, dtype=np.float64)
    flat_in = ego_ids.reshape(-1, 3)
    flat_out = out.reshape(-1, 3)
    for j, attr in enumerate(EGO_ATTRS):
        r = RANGES[attr]
        flat_out[:, j] = r.v_min + (flat_in[:, j] + 0.5) / bins * r.width
    return out


# ---------------------------------------------------------------------------
# Module forwards
# ---------------------------------------------------------------------------

def predict_ego(params, cfg: ModelConfig, ego_hist: Tensor, env: Tensor,
                rng) -> Tensor:
    """Next-frame ego-token features from ego history and the current scene.

    ego_hist: (B, T*3, D) embeddings of historical ego payload tokens.
    env: (B, S, D) map/agent/image embeddings of the latest frame.
    Returns (B, 3, D).
    """
    if ego_hist.shape[-2] == 0:
        raise UsageError("ego history is empty")
    b = ego_hist.shape[0]
    q = add(reshape(params["ego_pred.query"], (1, 3, cfg.d)),
            Tensor(np.zeros((b, 3, cfg.d), dtype=ego_hist.data.dtype)))
    for i in range(cfg.layers_ca_hist):
        q = _cross_block(params, f"ego_pred.hist.l{i}", q, ego_hist, cfg, rng)
    for i in range(cfg.layers_ca_env):
        q = _cross_block(params, f"ego_pred.env.l{i}", q, env, cfg, rng)
    return q


def tar_forward(params, cfg: ModelConfig, e_bar: Tensor, rng) -> Tensor:
    """Coarse next-frame prior h from the stacked frame features.

    e_bar: (B, T, N, D) with ego slots holding next-step ego embeddings and map
    slots already warped.  Stage 1 attends causally over time at each position
    independently (output taken at the last step); stage 2 exchanges
    information across the N positions bidirectionally.
    """
    b, t, n, d = e_bar.shape
    if t == 0:
        raise UsageError("temporal stage needs at least one frame")
    if t > cfg.block:
        raise UsageError(f"{t} frames exceed block size {cfg.block}")
    x = transpose(e_bar, (0, 2, 1, 3))          # (B, N, T, D)
    x = reshape(x, (b * n, t, d))
    mask = causal_mask(t, dtype=e_bar.data.dtype)
    for i in range(cfg.layers_tar_causal):
        last = i == cfg.layers_tar_causal - 1
        x = _self_block(params, f"tar_time.l{i}", x, mask, cfg, rng, q_last_only=last)
    x = reshape(x, (b, n, d))
    for i in range(cfg.layers_tar_bidir):
        x = _self_block(params, f"tar_bidir.l{i}", x, None, cfg, rng)
    return x


def oar_forward_teacher(params, cfg: ModelConfig, h: Tensor,
                        target_emb: Tensor, rng) -> Tensor:
    """Teacher-forced ordered decoding features o (B, N, D).

    Query j fuses the embedding of the previous target token with the frame
    prior at slot j; slot 0 uses the learnable begin vector.
    """
    b, n, d = h.shape
    begin = add(reshape(params["oar.begin"], (1, 1, d)),
                Tensor(np.zeros((b, 1, d), dtype=h.data.dtype)))
    prev = slice_(target_emb, (slice(None), slice(0, n - 1), slice(None)))
    w = concat([begin, prev], axis=1)
    w = add(w, h)
    mask = causal_mask(n, dtype=h.data.dtype)
    for i in range(cfg.layers_oar):
        w = _self_block(params, f"oar.l{i}", w, mask, cfg, rng)
    return w


# ---------------------------------------------------------------------------
# Full teacher-forced training forward
# ---------------------------------------------------------------------------

def build_tar_inputs(params, cfg: ModelConfig, layout: TokenLayout,
                     emb: Tensor, tokens: np.ndarray,
                     use_ama: bool) -> Tensor:
    """Assemble (B, T, N, D) temporal-stage inputs from (B, W, N, D) embeddings.

    Frame t's ego segment is replaced by frame t+1's (the action prior) and its
    map payload is warped by that same action; T = W - 1.
    """
    c = layout.counts
    ego_next = slice_(emb, (slice(None), slice(1, None), slice(0, c.cum_ego)))
    map_start = slice_(emb, (slice(None), slice(0, -1), slice(c.cum_ego, c.cum_ego + 1)))
    map_payload = slice_(emb, (slice(None), slice(0, -1),
                               slice(c.cum_ego + 1, c.cum_map - 1)))
    map_end = slice_(emb, (slice(None), slice(0, -1), slice(c.cum_map - 1, c.cum_map)))
    rest = slice_(emb, (slice(None), slice(0, -1), slice(c.cum_map, None)))
    if use_ama:
        ego_pos = [1, 2, 3]
        next_ego_ids = tokens[:, 1:, ego_pos]
        actions = decode_ego_ids(next_ego_ids, layout.bins)
        wm, ob = actions_to_grids(actions, cfg, dtype=emb.data.dtype)
        map_seg = ama_transform(map_payload, wm, ob, params["ama.fill"])
    else:
        map_seg = map_payload
    return concat([ego_next, map_start, map_seg, map_end, rest], axis=2)


def training_forward(params, cfg: ModelConfig, layout: TokenLayout,
                     tokens: np.ndarray, rng=None, use_ama: bool = True,
                     tar_weight: float = 1.0, ego_aux_weight: float = 1.0):
    """Losses and diagnostics for one batch of (B, W, N) token windows.

    The final frame of each window is the supervised target; the preceding
    W - 1 frames are the visible history.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    b, w, n = tokens.shape
    if w < 2:
        raise UsageError("need at least one history frame plus the target")
    c = layout.counts
    emb = embed_tokens(params, cfg, layout, tokens)      # (B, W, N, D)

    # Ego prediction from history (the target frame stays hidden).
    hist_ego = slice_(emb, (slice(None), slice(0, w - 1), slice(1, 4)))
    hist_ego = reshape(hist_ego, (b, (w - 1) * 3, cfg.d))
    env = slice_(emb, (slice(None), w - 2, slice(c.cum_ego, None)))
    u = predict_ego(params, cfg, hist_ego, env, rng)     # (B, 3, D)

    e_bar = build_tar_inputs(params, cfg, layout, emb, tokens, use_ama)
    h = tar_forward(params, cfg, e_bar, rng)             # (B, N, D)
    target_emb = slice_(emb, (slice(None), w - 1))       # (B, N, D)
    o = oar_forward_teacher(params, cfg, h, target_emb, rng)

    target_ids = tokens[:, -1, :]
    loss_terms = []
    acc = {}
    total_payload = 0
    for m, key in zip(MODALITIES, MOD_KEYS):
        pos = layout.payload_positions(m)
        tgt = target_ids[:, pos]
        total_payload += tgt.size
        for head_src, tag in ((h, "tar"), (o, "oar")):
            x = slice_(head_src, (slice(None), pos))
            logits = head_logits(params, m, x)
            ce = cross_entropy(logits, tgt)
            loss_terms.append((tag, sum_(ce)))
            if tag == "oar":
                acc[key] = float((np.argmax(logits.data, axis=-1) == tgt).mean())

    # Auxiliary readout that calibrates sampled ego actions at generation time.
    ego_logits = head_logits(params, MOD_EGO, u)
    ego_tgt = target_ids[:, [1, 2, 3]]
    ce_ego = sum_(cross_entropy(ego_logits, ego_tgt))

    inv = 1.0 / total_payload
    tar_total = None
    oar_total = None
    for tag, t in loss_terms:
        if tag == "tar":
            tar_total = t if tar_total is None else add(tar_total, t)
        else:
            oar_total = t if oar_total is None else add(oar_total, t)
    ce_tar = scale(tar_total, inv)
    ce_oar = scale(oar_total, inv)
    loss = add(ce_oar, scale(ce_tar, tar_weight))
    ce_ego_mean = scale(ce_ego, 1.0 / ego_tgt.size)
    objective = add(loss, scale(ce_ego_mean, ego_aux_weight))
    stats = {
        "loss": float(loss.data), "ce_tar": float(ce_tar.data),
        "ce_oar": float(ce_oar.data), "ce_ego": float(ce_ego_mean.data),
        "acc_by_modality": acc,
        "acc": float(np.mean(list(acc.values()))),
    }
    return objective, loss, stats


# ---------------------------------------------------------------------------
# Vanilla flat autoregression baseline
# ---------------------------------------------------------------------------

def _vanilla_fixed_param_count(cfg: ModelConfig, frames_cap: int) -> int:
    d = cfg.d
    n = 0
    for m in MODALITIES:
        n += cfg.vocabs[m] * d          # embedding table
        n += 2 * d * d + 2 * d          # embedding MLP
        n += 2 * d                      # head LN
        n += d * d + d                  # head hidden
        n += d * cfg.vocabs[m] + cfg.vocabs[m]
    n += cfg.n_positions * d            # intra-frame PE
    n += frames_cap * d                 # frame embedding
    return n


def _block_param_count(cfg: ModelConfig) -> int:
    d, ff = cfg.d, cfg.ff
    return (4 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * ff + ff) + (ff * d + d)


def umgen_param_count(cfg: ModelConfig) -> int:
    d, ff = cfg.d, cfg.ff
    blocks = (cfg.layers_ca_hist + cfg.layers_ca_env + cfg.layers_tar_causal
              + cfg.layers_tar_bidir + cfg.layers_oar)
    n = blocks * _block_param_count(cfg)
    n += (cfg.layers_ca_hist + cfg.layers_ca_env) * 2 * d  # extra kv layernorms
    n += _vanilla_fixed_param_count(cfg, 0) - cfg.n_positions * d  # shared table/head/mlp sizes
    n += cfg.n_positions * d            # pe
    n += 3 * d                          # ego queries
    n += d                              # warp fill vector
    n += d                              # ordered-decode begin vector
    return n


def vanilla_layer_count(cfg: ModelConfig, frames_cap: int) -> int:
    """Depth that lands the flat baseline within +/-20% of the main model."""
    target = umgen_param_count(cfg)
    fixed = _vanilla_fixed_param_count(cfg, frames_cap)
    per_layer = _block_param_count(cfg)
    layers = max(1, round((target - fixed) / per_layer))
    total = fixed + layers * per_layer
    if not 0.8 * target <= total <= 1.2 * target:
        raise UsageError(
            f"flat baseline with {layers} layers has {total} params, "
            f"outside +/-20% of {target}")
    return layers


def init_vanilla_params(cfg: ModelConfig, frames_cap: int, seed: int = 0,
                        dtype=np.float32, init_std: float = 0.02
                        ) -> tuple[dict[str, Tensor], int]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def p(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    d, ff = cfg.d, cfg.ff
    layers = vanilla_layer_count(cfg, frames_cap)
    p("vanilla.embed.pe", _normal(rng, (cfg.n_positions, d), dtype, init_std))
    p("vanilla.embed.frame", _normal(rng, (frames_cap, d), dtype, init_std))
    for m, key in zip(MODALITIES, MOD_KEYS):
        p(f"vanilla.embed.{key}.table", _normal(rng, (cfg.vocabs[m], d), dtype, init_std))
        p(f"vanilla.embed.{key}.mlp.w1", _normal(rng, (d, d), dtype, init_std))
        p(f"vanilla.embed.{key}.mlp.b1", np.zeros(d, dtype))
        p(f"vanilla.embed.{key}.mlp.w2", _normal(rng, (d, d), dtype, init_std))
        p(f"vanilla.embed.{key}.mlp.b2", np.zeros(d, dtype))
        p(f"vanilla.head.{key}.ln.g", np.ones(d, dtype))
        p(f"vanilla.head.{key}.ln.b", np.zeros(d, dtype))
        p(f"vanilla.head.{key}.w1", _normal(rng, (d, d), dtype, init_std))
        p(f"vanilla.head.{key}.b1", np.zeros(d, dtype))
        p(f"vanilla.head.{key}.w2", _normal(rng, (d, cfg.vocabs[m]), dtype, init_std))
        p(f"vanilla.head.{key}.b2", np.zeros(cfg.vocabs[m], dtype))
    for i in range(layers):
        _add_block(params, f"vanilla.l{i}", d, ff, rng, dtype, cross=False, std=init_std)
    return params, layers


def vanilla_embed(params, cfg: ModelConfig, layout: TokenLayout,
                  tokens: np.ndarray, frame_offset: int = 0) -> Tensor:
    """Embed (..., F, N) tokens with the flat baseline's machinery."""
    segs = []
    pe = params["vanilla.embed.pe"]
    for m, key, (lo, hi) in zip(MODALITIES, MOD_KEYS, _segment_bounds(layout)):
        ids = tokens[..., lo:hi]
        e = embedding_gather(params[f"vanilla.embed.{key}.table"], ids)
        e = add(e, slice_(pe, (slice(lo, hi), slice(None))))
        h = gelu(_linear(e, params[f"vanilla.embed.{key}.mlp.w1"],
                         params[f"vanilla.embed.{key}.mlp.b1"]))
        segs.append(_linear(h, params[f"vanilla.embed.{key}.mlp.w2"],
                            params[f"vanilla.embed.{key}.mlp.b2"]))
    e = concat(segs, axis=tokens.ndim - 1)
    f = tokens.shape[-2]
    frame = slice_(params["vanilla.embed.frame"],
                   (slice(frame_offset, frame_offset + f), slice(None)))
    return add(e, reshape(frame, (f, 1, cfg.d)))


def vanilla_forward(params, cfg: ModelConfig, layout: TokenLayout,
                    tokens: np.ndarray, layers: int, rng=None) -> Tensor:
    """Full-recompute flat-AR features over (F, N) tokens -> (F*N, D)."""
    if rng is None:
        rng = np.random.default_rng(0)
    f, n = tokens.shape
    e = vanilla_embed(params, cfg, layout, tokens[None, ...])
    x = reshape(e, (f * n, cfg.d))
    mask = causal_mask(f * n, dtype=x.data.dtype)
    for i in range(layers):
        x = _self_block(params, f"vanilla.l{i}", x, mask, cfg, rng)
    return x


def vanilla_head_logits(params, modality: int, x: Tensor) -> Tensor:
    key = MOD_KEYS[modality]
    g = lambda name: params[f"vanilla.head.{key}.{name}"]
    xn = layer_norm(x, g("ln.g"), g("ln.b"))
    h = gelu(_linear(xn, g("w1"), g("b1")))
    return _linear(h, g("w2"), g("b2"))
