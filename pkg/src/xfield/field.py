"""The queryable radiodensity field: hash encoder feeding the backbone.

Positions are unit-cube normalized by the scan volume box. The field is
evaluated per ray (or per point row for volume extraction) because the
backbone mixes information inside contiguous point segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lineformer as lf
from . import tensor as T
from .errors import ContractError
from .hash_encoder import HashGridConfig, HashGridParams, encode, init_hash_grid
from .tensor import Tensor


@dataclass(frozen=True)
class FieldConfig:
    encoder: HashGridConfig
    lineformer: lf.LineformerConfig

    def __post_init__(self):
        if self.encoder.channels != self.lineformer.channels:
            raise ContractError(
                f"encoder channels {self.encoder.channels} != backbone channels "
                f"{self.lineformer.channels}"
            )


@dataclass
class Field:
    cfg: FieldConfig
    encoder: HashGridParams
    backbone: lf.LineformerParams

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder")
        yield from self.backbone.named_parameters("lineformer")

    def parameters(self) -> dict:
        return dict(self.named_parameters())


def init_field(cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32) -> Field:
    return Field(
        cfg=cfg,
        encoder=init_hash_grid(cfg.encoder, rng, dtype),
        backbone=lf.init_lineformer(cfg.lineformer, rng, dtype),
    )


def field_forward(field: Field, norm_points: np.ndarray) -> Tensor:
    """Densities (B, N) for unit-cube positions (B, N, 3). Records on
    the active tape when training."""
    b, n, _ = norm_points.shape
    feats = encode(field.encoder, field.cfg.encoder, norm_points.reshape(-1, 3))
    feats = T.reshape(feats, (b, n, field.cfg.encoder.channels))
    return lf.forward(field.backbone, field.cfg.lineformer, feats)


def field_densities(field: Field, norm_points: np.ndarray) -> np.ndarray:
    """Convenience eval path: same forward, plain array out."""
    return field_forward(field, norm_points).data
