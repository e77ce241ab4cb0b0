"""Model geometry derived from a profile."""

from __future__ import annotations

from dataclasses import dataclass

from ..core import Profile
from ..errors import ConfigurationError
from ..tokenizer import MOD_AGENT, MOD_EGO, MOD_IMAGE, MOD_MAP, TokenLayout, build_layout


@dataclass(frozen=True)
class ModelConfig:
    d: int
    heads: int
    ff: int
    layers_ca_hist: int
    layers_ca_env: int
    layers_tar_causal: int
    layers_tar_bidir: int
    layers_oar: int
    block: int
    n_positions: int
    vocabs: tuple[int, int, int, int]          # full vocab per modality (incl start/end)
    payload_vocabs: tuple[int, int, int, int]
    bins: int
    # Map feature grid used by the alignment warp
    feat_h: int
    feat_w: int
    feat_res: float
    dropout: float

    @staticmethod
    def from_profile(profile: Profile, layout: TokenLayout | None = None) -> "ModelConfig":
        lay = layout or build_layout(profile)
        if profile.d_model % profile.heads:
            raise ConfigurationError(
                f"d_model={profile.d_model} not divisible by heads={profile.heads}")
        side = profile.map_cells // profile.patch
        return ModelConfig(
            d=profile.d_model, heads=profile.heads, ff=4 * profile.d_model,
            layers_ca_hist=profile.layers_ca_hist, layers_ca_env=profile.layers_ca_env,
            layers_tar_causal=profile.layers_tar_causal,
            layers_tar_bidir=profile.layers_tar_bidir, layers_oar=profile.layers_oar,
            block=profile.block_size, n_positions=lay.total,
            vocabs=tuple(lay.vocab(m) for m in (MOD_EGO, MOD_MAP, MOD_AGENT, MOD_IMAGE)),
            payload_vocabs=tuple(lay.payload_vocab(m)
                                 for m in (MOD_EGO, MOD_MAP, MOD_AGENT, MOD_IMAGE)),
            bins=profile.bins,
            feat_h=side, feat_w=side,
            feat_res=profile.map_resolution * profile.patch,
            dropout=profile.dropout,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocabs"] = tuple(d["vocabs"])
        d["payload_vocabs"] = tuple(d["payload_vocabs"])
        return ModelConfig(**d)
