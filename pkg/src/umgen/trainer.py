"""Teacher-forced training loop with the dual frame-prior/ordered losses.

Each step samples a window of block+1 frames per batch element, supervises
the final frame through both heads (plus the ego-prediction readout), and
applies one AdamW update.  Runs are deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Profile, read_dataset
from .errors import ConfigurationError, UsageError
from .model.bundle import ModelBundle, save_bundle
from .model.config import ModelConfig
from .model.network import init_params, training_forward
from .numerics import AdamW
from .tokenizer import build_layout, read_token_cache, tokenize_frame, write_token_cache
from .vq import Codebook, fit_codebook, grid_to_patches, load_codebook
from .tokenizer import map_to_tensor


@dataclass
class TrainConfig:
    profile: Profile = field(default_factory=Profile.desk)
    variant: str = "full"           # "full" | "no_ama"
    weight_decay: float = 0.0
    tar_weight: float = 1.0
    ego_aux_weight: float = 1.0
    vq_map_path: str | None = None
    vq_image_path: str | None = None
    vq_iters: int = 30
    token_cache: str | None = None
    log_path: str | None = None
    checkpoint_every: int = 0       # steps; 0 = final only

    @staticmethod
    def from_flat(flat: dict[str, str]) -> "TrainConfig":
        from .config_file import profile_from_config
        prof = profile_from_config(flat)
        cfg = TrainConfig(profile=prof)
        casts = {
            "trainer.variant": ("variant", str),
            "trainer.weight_decay": ("weight_decay", float),
            "trainer.tar_weight": ("tar_weight", float),
            "trainer.ego_aux_weight": ("ego_aux_weight", float),
            "trainer.vq_map": ("vq_map_path", str),
            "trainer.vq_image": ("vq_image_path", str),
            "trainer.vq_iters": ("vq_iters", int),
            "trainer.token_cache": ("token_cache", str),
            "trainer.log_path": ("log_path", str),
            "trainer.checkpoint_every": ("checkpoint_every", int),
        }
        for key, (attr, typ) in casts.items():
            if key in flat:
                setattr(cfg, attr, typ(flat[key]))
        if cfg.variant not in ("full", "no_ama"):
            raise ConfigurationError(f"unknown training variant {cfg.variant!r}")
        return cfg


def fit_codebooks_from_dataset(sequences, profile: Profile, iters: int = 30,
                               seed: int = 0) -> tuple[Codebook, Codebook]:
    map_patches = np.concatenate([
        grid_to_patches(map_to_tensor(f.map), profile.patch)
        for s in sequences for f in s.frames])
    img_patches = np.concatenate([
        grid_to_patches(f.image.pixels, profile.patch)
        for s in sequences for f in s.frames])
    map_cb = fit_codebook(map_patches, profile.map_codebook, iters=iters,
                          seed=seed, patch=profile.patch, channels=7)
    img_cb = fit_codebook(img_patches, profile.image_codebook, iters=iters,
                          seed=seed + 1, patch=profile.patch, channels=3)
    return map_cb, img_cb


def tokenize_dataset(sequences, map_cb: Codebook, img_cb: Codebook, layout
                     ) -> list[np.ndarray]:
    out = []
    for seq in sequences:
        out.append(np.stack([
            tokenize_frame(f, map_cb, img_cb, layout).ids for f in seq.frames]))
    return out


def train(config: TrainConfig, data_path: str, out_ckpt: str) -> list[dict]:
    """Run the training loop and write the checkpoint bundle; returns the log."""
    prof = config.profile
    layout = build_layout(prof)
    cfg = ModelConfig.from_profile(prof, layout)
    sequences = read_dataset(data_path)
    if not sequences:
        raise UsageError(f"dataset {data_path} is empty")

    if config.vq_map_path and config.vq_image_path:
        map_cb = load_codebook(config.vq_map_path)
        img_cb = load_codebook(config.vq_image_path)
    else:
        map_cb, img_cb = fit_codebooks_from_dataset(
            sequences, prof, iters=config.vq_iters, seed=prof.seed)

    if config.token_cache:
        try:
            token_seqs = read_token_cache(config.token_cache)
        except FileNotFoundError:
            token_seqs = tokenize_dataset(sequences, map_cb, img_cb, layout)
            write_token_cache(config.token_cache, token_seqs)
    else:
        token_seqs = tokenize_dataset(sequences, map_cb, img_cb, layout)

    w = prof.block_size + 1
    usable = [t for t in token_seqs if t.shape[0] >= w]
    if not usable:
        raise UsageError(f"no sequence has >= {w} frames")

    use_ama = config.variant != "no_ama"
    params = init_params(cfg, seed=prof.seed, include_ama=use_ama)
    opt = AdamW(params, lr=prof.learning_rate, weight_decay=config.weight_decay)
    batch_rng = np.random.default_rng([prof.seed, 1])
    drop_rng = np.random.default_rng([prof.seed, 2])

    log: list[dict] = []
    log_fh = open(config.log_path, "w") if config.log_path else None
    t_start = time.time()
    try:
        for step in range(prof.steps):
            batch = _sample_batch(usable, w, prof.batch_size, batch_rng)
            objective, loss, stats = training_forward(
                params, cfg, layout, batch, rng=drop_rng, use_ama=use_ama,
                tar_weight=config.tar_weight,
                ego_aux_weight=config.ego_aux_weight)
            if not np.isfinite(stats["loss"]):
                raise UsageError(
                    f"non-finite loss at step {step}: {stats}")
            opt.zero_grad()
            objective.backward()
            opt.step()
            entry = {"step": step, **{k: v for k, v in stats.items()}}
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                bundle = ModelBundle.create(prof, params, map_cb, img_cb)
                save_bundle(out_ckpt, bundle)
    finally:
        if log_fh:
            log_fh.close()

    bundle = ModelBundle.create(prof, params, map_cb, img_cb)
    save_bundle(out_ckpt, bundle)
    if log:
        log[-1]["wall_seconds"] = time.time() - t_start
    return log


def _sample_batch(token_seqs: list[np.ndarray], w: int, batch: int,
                  rng: np.random.Generator) -> np.ndarray:
    out = np.empty((batch, w, token_seqs[0].shape[1]), dtype=np.int64)
    for b in range(batch):
        seq = token_seqs[rng.integers(len(token_seqs))]
        start = rng.integers(0, seq.shape[0] - w + 1)
        out[b] = seq[start:start + w]
    return out


def train_variant(kind: str, config: TrainConfig, data_path: str,
                  out_ckpt: str) -> list[dict]:
    if kind != "no_ama":
        raise ConfigurationError(f"unknown variant {kind!r}")
    config.variant = "no_ama"
    return train(config, data_path, out_ckpt)
