"""Multiresolution hash encoding of 3-D positions.

Each level scales the unit cube to its grid resolution, hashes the 8
surrounding corners into a trainable feature table, and blends the
rows trilinearly; level outputs concatenate into one feature vector.
Coarse levels whose dense grid fits in the table index directly, so
they are collision-free; finer levels use the XOR-of-primes spatial
hash folded modulo the table size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

HASH_PRIMES = (1, 2654435761, 805459861)

# corner offsets in x-fastest order
_CORNERS = np.array(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.int64
)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    log2_table_size: int = 15
    features_per_level: int = 4
    base_resolution: int = 16
    growth: float = 1.5

    def __post_init__(self):
        if self.growth <= 1.0:
            raise ContractError("per-level growth must exceed 1")
        if self.levels < 1 or self.features_per_level < 1:
            raise ContractError("levels and features_per_level must be positive")

    @property
    def channels(self) -> int:
        return self.levels * self.features_per_level

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth**level))

    def level_uses_hash(self, level: int) -> bool:
        res = self.resolution(level)
        return (res + 1) ** 3 > self.table_size


@dataclass
class HashGridParams:
    """One trainable table per level, each (table_size, features_per_level)."""

    tables: list

    def named_parameters(self, prefix: str = "encoder"):
        for i, table in enumerate(self.tables):
            yield f"{prefix}.level{i}.table", table


def init_hash_grid(
    cfg: HashGridConfig, rng: np.random.Generator, dtype=np.float32
) -> HashGridParams:
    tables = [
        Tensor(
            rng.uniform(-1e-4, 1e-4, (cfg.table_size, cfg.features_per_level)),
            trainable=True,
            dtype=dtype,
        )
        for _ in range(cfg.levels)
    ]
    return HashGridParams(tables)


def corner_indices(cfg: HashGridConfig, level: int, points: np.ndarray):
    """Table row index (8, P) and blend weight (8, P) for each corner of
    the cell containing each point."""
    res = cfg.resolution(level)
    scaled = points * np.asarray(res, dtype=points.dtype)
    base = np.floor(scaled).astype(np.int64)
    np.clip(base, 0, res - 1, out=base)
    frac = scaled - base  # (P, 3) in [0, 1]
    corners = base[None, :, :] + _CORNERS[:, None, :]  # (8, P, 3)
    if cfg.level_uses_hash(level):
        c = corners.astype(np.uint32)
        with np.errstate(over="ignore"):  # uint32 wraparound is the hash
            mixed = (
                c[..., 0] * np.uint32(HASH_PRIMES[0])
                ^ c[..., 1] * np.uint32(HASH_PRIMES[1])
                ^ c[..., 2] * np.uint32(HASH_PRIMES[2])
            )
        # table sizes are powers of two, so modulo is a mask
        idx = (mixed & np.uint32(cfg.table_size - 1)).astype(np.int64)
    else:
        stride = res + 1
        idx = corners[..., 0] + stride * (corners[..., 1] + stride * corners[..., 2])
    # weight per corner: product over axes of frac (bit set) or 1 - frac
    pair = np.stack([1.0 - frac, frac])  # (2, P, 3)
    bits = _CORNERS.T  # (3, 8)
    weights = pair[bits[0], :, 0] * pair[bits[1], :, 1] * pair[bits[2], :, 2]
    return idx, weights


def encode(params: HashGridParams, cfg: HashGridConfig, points: np.ndarray) -> Tensor:
    """Encode (P, 3) unit-cube positions into a (P, channels) feature
    tensor, differentiable into the tables."""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractError(f"expected (P, 3) points, got {points.shape}")
    eps = 1e-5
    if points.size and (points.min() < -eps or points.max() > 1.0 + eps):
        raise ContractError("points must lie in the unit cube (within 1e-5)")
    points = np.clip(points, 0.0, 1.0)
    per_level = []
    for level, table in enumerate(params.tables):
        idx, weights = corner_indices(cfg, level, points)
        per_level.append(
            T.weighted_row_sum(table, idx, weights.astype(table.dtype))
        )  # (P, f)
    return T.concat(per_level, axis=1)
