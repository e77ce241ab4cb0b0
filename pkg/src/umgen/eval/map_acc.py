"""Teacher-forced next-frame map-token accuracy, split by ego turning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import SceneSequence
from ..model.bundle import ModelBundle
from ..model.network import (
    build_tar_inputs, embed_tokens, head_logits, oar_forward_teacher,
    tar_forward,
)
from ..numerics import no_grad
from ..numerics.tensor import slice_
from ..tokenizer import MOD_MAP, tokenize_frame


@dataclass
class MapAccuracyReport:
    turning: float
    straight: float
    overall: float
    n_turning: int
    n_straight: int

    def to_dict(self) -> dict:
        return {"turning": self.turning, "straight": self.straight,
                "overall": self.overall, "n_turning": self.n_turning,
                "n_straight": self.n_straight}


def map_token_accuracy(bundle: ModelBundle, sequences: list[SceneSequence],
                       turn_threshold: float = 0.05,
                       batch: int = 16) -> MapAccuracyReport:
    """Top-1 accuracy of the ordered-decode head on map tokens.

    Windows are teacher-forced; a target frame counts as "turning" when its
    ego heading change exceeds ``turn_threshold`` radians.  The model's own
    map-alignment setting (with or without the warp) applies.
    """
    cfg, lay, prof = bundle.cfg, bundle.layout, bundle.profile
    w = prof.block_size + 1
    windows = []
    turning_flags = []
    for seq in sequences:
        toks = [tokenize_frame(f, bundle.map_codebook, bundle.image_codebook,
                               lay).ids for f in seq.frames]
        for t in range(w - 1, len(seq.frames)):
            windows.append(np.stack(toks[t - w + 1:t + 1]))
            turning_flags.append(abs(seq.frames[t].ego_action.dtheta) > turn_threshold)

    pos = lay.payload_positions(MOD_MAP)
    hits_turn = tot_turn = hits_straight = tot_straight = 0
    with no_grad():
        for lo in range(0, len(windows), batch):
            chunk = np.stack(windows[lo:lo + batch]).astype(np.int64)
            flags = turning_flags[lo:lo + batch]
            emb = embed_tokens(bundle.params, cfg, lay, chunk)
            e_bar = build_tar_inputs(bundle.params, cfg, lay, emb, chunk,
                                     use_ama=bundle.use_ama)
            h = tar_forward(bundle.params, cfg, e_bar, np.random.default_rng(0))
            target_emb = slice_(emb, (slice(None), w - 1))
            o = oar_forward_teacher(bundle.params, cfg, h, target_emb,
                                    np.random.default_rng(0))
            logits = head_logits(bundle.params, MOD_MAP,
                                 slice_(o, (slice(None), pos))).data
            pred = np.argmax(logits, axis=-1)
            tgt = chunk[:, -1, pos]
            for b, turning in enumerate(flags):
                correct = int((pred[b] == tgt[b]).sum())
                if turning:
                    hits_turn += correct
                    tot_turn += len(pos)
                else:
                    hits_straight += correct
                    tot_straight += len(pos)
    div = lambda a, b: a / b if b else float("nan")
    return MapAccuracyReport(
        turning=div(hits_turn, tot_turn), straight=div(hits_straight, tot_straight),
        overall=div(hits_turn + hits_straight, tot_turn + tot_straight),
        n_turning=tot_turn // max(len(pos), 1),
        n_straight=tot_straight // max(len(pos), 1))
