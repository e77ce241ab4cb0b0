import math

import numpy as np
import pytest

from conftest import random_codebooks
from umgen.core import Profile
from umgen.errors import UsageError
from umgen.eval.bench import random_token_frame
from umgen.model.bundle import ModelBundle, load_bundle, save_bundle
from umgen.model.config import ModelConfig
from umgen.model.decode import DecoderSession, VanillaSession, sampling_masks
from umgen.model.network import (
    ama_grid, ama_weight_matrix, build_tar_inputs, embed_tokens, head_logits,
    init_params, init_vanilla_params, oar_forward_teacher, param_count,
    predict_ego, tar_forward, training_forward, umgen_param_count,
    vanilla_forward, vanilla_head_logits, vanilla_layer_count,
)
from umgen.numerics import CacheMeter, Tensor, no_grad
from umgen.numerics.tensor import reshape, slice_
from umgen.rollout import top_k_sample
from umgen.tokenizer import MOD_AGENT, MOD_EGO, MOD_IMAGE, MOD_MAP, build_layout


@pytest.fixture(scope="module")
def tiny():
    prof = Profile.tiny()
    lay = build_layout(prof)
    cfg = ModelConfig.from_profile(prof, lay)
    params = init_params(cfg, seed=3, init_std=0.1)
    return prof, lay, cfg, params


def _window(lay, n_frames, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([random_token_frame(lay, rng) for _ in range(n_frames)])


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def test_embed_shape_and_position_sensitivity(tiny):
    prof, lay, cfg, params = tiny
    tokens = _window(lay, 2)[None, ...]
    with no_grad():
        e = embed_tokens(params, cfg, lay, tokens)
    assert e.shape == (1, 2, lay.total, cfg.d)
    # same id at two map payload positions embeds differently via PE
    pos = lay.payload_positions(MOD_MAP)[:2]
    toks = tokens.copy()
    toks[..., pos] = 3
    with no_grad():
        e2 = embed_tokens(params, cfg, lay, toks)
    a = e2.data[0, 0, pos[0]]
    b = e2.data[0, 0, pos[1]]
    assert not np.allclose(a, b)


def test_embed_gradient_sparsity(tiny):
    prof, lay, cfg, params = tiny
    for p in params.values():
        p.grad = None
    tokens = _window(lay, 3)[None, ...]
    obj, _, _ = training_forward(params, cfg, lay, tokens,
                                 rng=np.random.default_rng(0))
    obj.backward()
    table = params["embed.map.table"]
    used = set(np.unique(tokens[..., lay.modality_of == MOD_MAP]))
    for row in range(table.data.shape[0]):
        mag = float(np.abs(table.grad[row]).sum())
        if row in used:
            assert mag > 0
        else:
            assert mag == 0


# ---------------------------------------------------------------------------
# ego prediction
# ---------------------------------------------------------------------------

def test_predict_ego_shape_and_set_equivariance(tiny):
    prof, lay, cfg, params = tiny
    rng = np.random.default_rng(1)
    hist = Tensor(rng.standard_normal((2, 6, cfg.d)).astype(np.float32))
    env = Tensor(rng.standard_normal((2, 10, cfg.d)).astype(np.float32))
    with no_grad():
        u = predict_ego(params, cfg, hist, env, rng)
    assert u.shape == (2, 3, cfg.d)
    perm = rng.permutation(10)
    with no_grad():
        u2 = predict_ego(params, cfg, hist, Tensor(env.data[:, perm]), rng)
    assert np.allclose(u.data, u2.data, atol=1e-5)


def test_predict_ego_single_frame_history(tiny):
    prof, lay, cfg, params = tiny
    rng = np.random.default_rng(2)
    hist = Tensor(rng.standard_normal((1, 3, cfg.d)).astype(np.float32))
    env = Tensor(rng.standard_normal((1, 5, cfg.d)).astype(np.float32))
    with no_grad():
        u = predict_ego(params, cfg, hist, env, rng)
    assert np.isfinite(u.data).all()


def test_predict_ego_empty_history_errors(tiny):
    prof, lay, cfg, params = tiny
    env = Tensor(np.zeros((1, 5, cfg.d), dtype=np.float32))
    with pytest.raises(UsageError):
        with no_grad():
            predict_ego(params, cfg, Tensor(np.zeros((1, 0, cfg.d), np.float32)),
                        env, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# map alignment grid
# ---------------------------------------------------------------------------

def test_ama_identity_grid():
    src, oob = ama_grid(0.0, 0.0, 0.0, 8, 8, 8.0)
    rows, cols = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    assert np.allclose(src[..., 0], rows)
    assert np.allclose(src[..., 1], cols)
    assert not oob.any()


def test_ama_forward_shift_one_cell():
    res = 8.0
    src, oob = ama_grid(0.0, res, 0.0, 8, 8, res)
    # every target samples one row further forward; the top row leaves the grid
    assert np.allclose(src[1:, :, 0], np.arange(0, 7)[:, None])
    assert oob[0].all()
    assert not oob[1:].any()


def test_ama_quarter_turn_rotation():
    # On an odd grid the cell centers are symmetric about the ego, so a
    # quarter turn permutes them exactly.  Hand derivation with offsets
    # (dr, dc) = (r - 1, c - 1): x = -4 dr, y = 4 dc; rotated source
    # (x', y') = (-y, x) lands at (r_src, c_src) = (c, 2 - r).
    src, oob = ama_grid(math.pi / 2, 0.0, 0.0, 3, 3, 4.0)
    assert not oob.any()
    for r in range(3):
        for c in range(3):
            assert src[r, c, 0] == pytest.approx(c, abs=1e-9)
            assert src[r, c, 1] == pytest.approx(2 - r, abs=1e-9)


def test_ama_weight_matrix_identity_and_fill(tiny):
    prof, lay, cfg, params = tiny
    w, oob = ama_weight_matrix(0.0, 0.0, 0.0, cfg.feat_h, cfg.feat_w, cfg.feat_res)
    assert np.allclose(w, np.eye(cfg.feat_h * cfg.feat_w))
    assert not oob.any()
    w2, oob2 = ama_weight_matrix(0.0, 1e9, 0.0, cfg.feat_h, cfg.feat_w, cfg.feat_res)
    assert oob2.all()
    assert np.allclose(w2, 0.0)


def test_ama_bilinear_exact_at_cell_centers():
    h = w = 4
    res = 2.0
    rng = np.random.default_rng(3)
    feat = rng.standard_normal((h * w, 5)).astype(np.float32)
    # integer-cell shift: dx = res means source = one row forward
    mat, oob = ama_weight_matrix(0.0, res, 0.0, h, w, res)
    out = mat @ feat
    for r in range(1, h):
        for c in range(w):
            assert np.allclose(out[r * w + c], feat[(r - 1) * w + c], atol=1e-6)


# ---------------------------------------------------------------------------
# temporal stage causality/locality, ordered stage causality
# ---------------------------------------------------------------------------

def _tar_h(params, cfg, lay, tokens, use_ama=True):
    with no_grad():
        emb = embed_tokens(params, cfg, lay, tokens)
        e_bar = build_tar_inputs(params, cfg, lay, emb, tokens, use_ama)
        stage1_in = e_bar
        h = tar_forward(params, cfg, e_bar, np.random.default_rng(0))
    return h.data, stage1_in.data


def test_tar_shapes_and_block_cap(tiny):
    prof, lay, cfg, params = tiny
    tokens = _window(lay, cfg.block + 1)[None, ...]
    h, _ = _tar_h(params, cfg, lay, tokens)
    assert h.shape == (1, lay.total, cfg.d)
    too_long = _window(lay, cfg.block + 2)[None, ...]
    with pytest.raises(UsageError):
        _tar_h(params, cfg, lay, too_long)


def test_tar_stage1_locality_and_time_causality(tiny):
    """Perturbation probes on the raw temporal stage (100 randomized)."""
    prof, lay, cfg, params = tiny
    rng = np.random.default_rng(11)
    t, n, d = 3, lay.total, cfg.d
    base = rng.standard_normal((1, t, n, d)).astype(np.float32)

    def stage1(x):
        from umgen.model.network import _self_block, causal_mask
        xt = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(n, t, d))
        mask = causal_mask(t)
        with no_grad():
            y = xt
            for i in range(cfg.layers_tar_causal):
                y = _self_block(params, f"tar_time.l{i}", y, mask,
                                cfg, np.random.default_rng(0))
        return y.data.reshape(1, n, t, d)

    y0 = stage1(base)
    violations = 0
    for probe in range(100):
        pos = int(rng.integers(0, n))
        tt = int(rng.integers(0, t))
        x = base.copy()
        x[0, tt, pos] += rng.standard_normal(d).astype(np.float32)
        y = stage1(x)
        scale = np.abs(y0).max() + 1e-9
        # locality: other positions never change
        others = np.delete(np.arange(n), pos)
        if np.abs(y[0, others] - y0[0, others]).max() > 1e-6 * scale:
            violations += 1
        # causality: earlier times at the same position never change
        if tt > 0 and np.abs(y[0, pos, :tt] - y0[0, pos, :tt]).max() > 1e-6 * scale:
            violations += 1
    assert violations == 0


def test_oar_position_causality(tiny):
    prof, lay, cfg, params = tiny
    rng = np.random.default_rng(13)
    n, d = lay.total, cfg.d
    h = Tensor(rng.standard_normal((1, n, d)).astype(np.float32))
    base_emb = rng.standard_normal((1, n, d)).astype(np.float32)

    def oar(emb):
        with no_grad():
            return oar_forward_teacher(params, cfg, h, Tensor(emb),
                                       np.random.default_rng(0)).data

    y0 = oar(base_emb)
    violations = 0
    for probe in range(100):
        pos = int(rng.integers(0, n))
        emb = base_emb.copy()
        emb[0, pos] += rng.standard_normal(d).astype(np.float32)
        y = oar(emb)
        scale = np.abs(y0).max() + 1e-9
        # output at slots <= pos must not change (slot j consumes tokens < j)
        if np.abs(y[0, :pos + 1] - y0[0, :pos + 1]).max() > 1e-6 * scale:
            violations += 1
    assert violations == 0


# ---------------------------------------------------------------------------
# heads, loss values
# ---------------------------------------------------------------------------

def test_head_routing_shapes(tiny):
    prof, lay, cfg, params = tiny
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, cfg.d))
               .astype(np.float32))
    with no_grad():
        for m in (MOD_EGO, MOD_MAP, MOD_AGENT, MOD_IMAGE):
            logits = head_logits(params, m, x)
            assert logits.shape == (2, 4, cfg.vocabs[m])


def test_loss_uniform_value_and_nonnegative(tiny):
    prof, lay, cfg, params = tiny
    zero_params = init_params(cfg, seed=0, init_std=0.0)
    tokens = _window(lay, 3, seed=5)[None, ...]
    _, loss, stats = training_forward(zero_params, cfg, lay, tokens,
                                      rng=np.random.default_rng(0))
    counts = {m: len(lay.payload_positions(m)) for m in range(4)}
    total = sum(counts.values())
    expected = sum(counts[m] * math.log(cfg.vocabs[m]) for m in range(4)) / total
    assert stats["ce_tar"] == pytest.approx(expected, rel=1e-4)
    assert stats["ce_oar"] == pytest.approx(expected, rel=1e-4)
    assert stats["loss"] >= 0.0


def test_sampling_masks_route_payload_only(tiny):
    prof, lay, cfg, params = tiny
    masks = sampling_masks(lay)
    rng = np.random.default_rng(0)
    for pos in range(lay.total):
        if lay.is_boundary[pos]:
            continue
        m = int(lay.modality_of[pos])
        logits = rng.standard_normal(cfg.vocabs[m]).astype(np.float32)
        for _ in range(10):
            tok = top_k_sample(logits + masks[pos], 16, 1.0, rng)
            assert tok in set(lay.allowed_ids(pos))


# ---------------------------------------------------------------------------
# cached decode vs full recompute
# ---------------------------------------------------------------------------

def _bundle(tiny):
    prof, lay, cfg, params = tiny
    map_cb, img_cb = random_codebooks(prof, seed=7)
    return ModelBundle.create(prof, params, map_cb, img_cb)


def test_cached_decode_matches_recompute(tiny):
    prof, lay, cfg, params = tiny
    bundle = _bundle(tiny)
    window = [random_token_frame(lay, np.random.default_rng(s)) for s in range(3)]
    session = DecoderSession(bundle, meter=CacheMeter())
    session.prime(window)
    captured = []

    def rec_sample(logits, rng):
        tok = top_k_sample(logits, prof.top_k, 1.0, rng)
        captured.append((logits.copy(), tok))
        return tok

    new_ids = session.step(np.random.default_rng(42), rec_sample)
    masks = sampling_masks(lay)
    tokens = np.stack(window + [new_ids])[None, ...]
    with no_grad():
        emb = embed_tokens(params, cfg, lay, tokens)
        e_bar = build_tar_inputs(params, cfg, lay, emb, tokens, use_ama=True)
        h = tar_forward(params, cfg, e_bar, np.random.default_rng(0))
        o = oar_forward_teacher(params, cfg, h, slice_(emb, (slice(None), 3)),
                                np.random.default_rng(0))
        hist = reshape(slice_(emb, (slice(None), slice(0, 3), slice(1, 4))),
                       (1, 9, cfg.d))
        env = slice_(emb, (slice(None), 2, slice(lay.counts.cum_ego, None)))
        u = predict_ego(params, cfg, hist, env, np.random.default_rng(0))
        ego_logits = head_logits(params, MOD_EGO, u).data[0]

    ci = 0
    for j in range(3):
        assert np.abs(ego_logits[j] + masks[1 + j] - captured[ci][0]).max() < 1e-5
        ci += 1
    with no_grad():
        for pos in range(lay.total):
            if lay.is_boundary[pos] or 1 <= pos <= 3:
                continue
            m = int(lay.modality_of[pos])
            rc = head_logits(params, m, slice_(o, (slice(None), pos))).data[0]
            assert np.abs(rc + masks[pos] - captured[ci][0]).max() < 1e-5
            ci += 1
    assert ci == len(captured)


def test_decode_determinism(tiny):
    prof, lay, cfg, params = tiny
    bundle = _bundle(tiny)
    window = [random_token_frame(lay, np.random.default_rng(s)) for s in range(2)]
    out = []
    for _ in range(2):
        sess = DecoderSession(bundle)
        sess.prime([w.copy() for w in window])
        rng = np.random.default_rng(9)
        sample = lambda logits, r: top_k_sample(logits, prof.top_k, 1.0, r)
        out.append([sess.step(rng, sample) for _ in range(3)])
    for a, b in zip(out[0], out[1]):
        assert np.array_equal(a, b)


def test_sliding_window_never_exceeds_block(tiny):
    prof, lay, cfg, params = tiny
    bundle = _bundle(tiny)
    sess = DecoderSession(bundle)
    sess.prime([random_token_frame(lay, np.random.default_rng(s))
                for s in range(2)])
    rng = np.random.default_rng(1)
    sample = lambda logits, r: top_k_sample(logits, 4, 1.0, r)
    for _ in range(cfg.block + 3):
        sess.step(rng, sample)
        assert len(sess.window) <= cfg.block
        assert sess.t_len <= cfg.block


# ---------------------------------------------------------------------------
# flat baseline
# ---------------------------------------------------------------------------

def test_vanilla_param_budget(tiny):
    prof, lay, cfg, params = tiny
    target = umgen_param_count(cfg)
    assert target == param_count(params)
    vp, layers = init_vanilla_params(cfg, frames_cap=6, seed=0)
    total = param_count(vp)
    assert 0.8 * target <= total <= 1.2 * target
    assert layers == vanilla_layer_count(cfg, 6)


def test_vanilla_cached_matches_recompute(tiny):
    prof, lay, cfg, params = tiny
    vp, layers = init_vanilla_params(cfg, frames_cap=6, seed=1, init_std=0.1)
    frames = [random_token_frame(lay, np.random.default_rng(s)) for s in range(2)]
    sess = VanillaSession(vp, cfg, lay, layers, frames_cap=6, meter=CacheMeter())
    sess.prime(frames)
    captured = []

    def rec_sample(logits, rng):
        tok = top_k_sample(logits, prof.top_k, 1.0, rng)
        captured.append((logits.copy(), tok))
        return tok

    rng = np.random.default_rng(5)
    new_tokens = [sess.step_token(rng, rec_sample) for _ in range(lay.total)]

    flat = np.concatenate([np.stack(frames), np.array(new_tokens)[None, :]])
    masks = sampling_masks(lay)
    with no_grad():
        x = vanilla_forward(vp, cfg, lay, flat, layers)
        ci = 0
        for pos in range(lay.total):
            if lay.is_boundary[pos]:
                continue
            m = int(lay.modality_of[pos])
            feat = slice_(x, (slice(2 * lay.total + pos - 1,
                                    2 * lay.total + pos),))
            rc = vanilla_head_logits(vp, m, feat).data[0]
            assert np.abs(rc + masks[pos] - captured[ci][0]).max() < 1e-5, pos
            ci += 1
    assert ci == len(captured)


def test_vanilla_cache_grows_linearly(tiny):
    prof, lay, cfg, params = tiny
    vp, layers = init_vanilla_params(cfg, frames_cap=6, seed=1)
    meter = CacheMeter()
    sess = VanillaSession(vp, cfg, lay, layers, frames_cap=6, meter=meter)
    frames = [random_token_frame(lay, np.random.default_rng(s)) for s in range(3)]
    sess.prime(frames)
    assert meter.current == 3 * lay.total * layers * 2 * cfg.d


# ---------------------------------------------------------------------------
# checkpoint bundle
# ---------------------------------------------------------------------------

def test_bundle_roundtrip_bit_identical_logits(tiny, tmp_path):
    prof, lay, cfg, params = tiny
    bundle = _bundle(tiny)
    path = tmp_path / "model.ckpt"
    save_bundle(str(path), bundle)
    back = load_bundle(str(path))
    assert back.profile == prof
    assert back.cfg == cfg
    tokens = _window(lay, 3, seed=2)[None, ...]
    with no_grad():
        a = training_forward(bundle.params, cfg, lay, tokens,
                             rng=np.random.default_rng(0))[1].data
        b = training_forward(back.params, cfg, lay, tokens,
                             rng=np.random.default_rng(0))[1].data
    assert np.array_equal(a, b)
    assert np.array_equal(back.map_codebook.entries, bundle.map_codebook.entries)
