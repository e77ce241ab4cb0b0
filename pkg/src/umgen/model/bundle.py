"""Checkpoint bundle: parameters, configuration, and the fitted codebooks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..core import Profile
from ..errors import FormatError
from ..numerics import Tensor, load_checkpoint, save_checkpoint
from ..tokenizer import TokenLayout, build_layout
from ..vq import Codebook
from .config import ModelConfig


@dataclass
class ModelBundle:
    profile: Profile
    cfg: ModelConfig
    layout: TokenLayout
    params: dict[str, Tensor]
    map_codebook: Codebook
    image_codebook: Codebook
    use_ama: bool

    @staticmethod
    def create(profile: Profile, params: dict[str, Tensor],
               map_codebook: Codebook, image_codebook: Codebook) -> "ModelBundle":
        layout = build_layout(profile)
        return ModelBundle(
            profile=profile, cfg=ModelConfig.from_profile(profile, layout),
            layout=layout, params=params, map_codebook=map_codebook,
            image_codebook=image_codebook, use_ama="ama.fill" in params)


def save_bundle(path: str, bundle: ModelBundle) -> None:
    header = {
        "profile": asdict(bundle.profile),
        "config": bundle.cfg.to_dict(),
        "vq": {
            "map": {"patch": bundle.map_codebook.patch,
                    "channels": bundle.map_codebook.channels,
                    "seed": bundle.map_codebook.fit_seed},
            "image": {"patch": bundle.image_codebook.patch,
                      "channels": bundle.image_codebook.channels,
                      "seed": bundle.image_codebook.fit_seed},
        },
    }
    params = dict(bundle.params)
    params["vq.map.entries"] = Tensor(bundle.map_codebook.entries)
    params["vq.image.entries"] = Tensor(bundle.image_codebook.entries)
    save_checkpoint(path, params, header=header)


def load_bundle(path: str) -> ModelBundle:
    params, header = load_checkpoint(path, requires_grad=False)
    if header is None or "profile" not in header:
        raise FormatError("checkpoint carries no profile header")
    profile = Profile(**header["profile"])
    layout = build_layout(profile)
    cfg = ModelConfig.from_dict(header["config"])
    vq_meta = header["vq"]

    def cb(key: str) -> Codebook:
        entries = params.pop(f"vq.{key}.entries").data.astype(np.float32)
        m = vq_meta[key]
        return Codebook(entries=entries, patch=m["patch"], channels=m["channels"],
                        fit_seed=m["seed"])

    map_cb = cb("map")
    img_cb = cb("image")
    return ModelBundle(profile=profile, cfg=cfg, layout=layout, params=params,
                       map_codebook=map_cb, image_codebook=img_cb,
                       use_ama="ama.fill" in params)
