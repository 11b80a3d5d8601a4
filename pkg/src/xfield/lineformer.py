"""Segmented-attention backbone mapping per-point features to radiodensity.

The backbone stacks four residual attention blocks with a mid-network
skip connection and a two-layer density head. Its attention (``ls_msa``)
splits each ray's point sequence into contiguous segments and computes
*channel* attention independently inside every segment and head: the
attention map is (head_dim x head_dim), built from K^T Q, so cost grows
linearly with the number of points. ``g_msa`` is the quadratic
token-attention reference used for complexity and quality comparisons;
it shares the parameter layout so comparisons are parameter-matched.

Projection weights, the per-head temperature, and the positional table
are shared across segments, which keeps the parameter count independent
of how finely a ray is segmented.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

MIX_KINDS = ("ls-msa", "g-msa", "mlp")


@dataclass(frozen=True)
class LineformerConfig:
    channels: int = 32
    heads: int = 4
    segment_length: int = 2
    n_points: int = 192
    depth: int = 4
    ffn_expansion: int = 2
    mix: str = "ls-msa"
    # output rho = density_scale * softplus(z + head_bias_init). The scale
    # keeps trained absorptions O(1) for ~100 mm chords; the negative bias
    # makes *initial* densities vanishingly small, so space never crossed
    # by a training ray (foreground-only sampling leaves the visual-hull
    # complement unconstrained) renders as empty instead of haze.
    density_scale: float = 0.01
    head_bias_init: float = -3.5

    def __post_init__(self):
        if self.channels % self.heads:
            raise ContractError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.n_points % self.segment_length:
            raise ContractError(
                f"n_points {self.n_points} not divisible by segment length "
                f"{self.segment_length}"
            )
        if self.mix not in MIX_KINDS:
            raise ContractError(f"mix must be one of {MIX_KINDS}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def n_segments(self) -> int:
        return self.n_points // self.segment_length


@dataclass
class AttentionParams:
    """Shared Q/K/V/output projections, per-head temperature ``alpha``,
    and the per-segment positional table ``pos`` (segment_length x C)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    alpha: Tensor
    pos: Tensor

    def named_parameters(self, prefix):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "alpha", "pos"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class PointMlpParams:
    """Ablation stand-in for the attention branch: a per-point MLP with
    hidden width 2C, sized to match the 4 C^2 attention projections."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class LsabParams:
    pre_w: Tensor
    pre_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    mix: object  # AttentionParams | PointMlpParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def named_parameters(self, prefix):
        for name in ("pre_w", "pre_b", "ln1_g", "ln1_b"):
            yield f"{prefix}.{name}", getattr(self, name)
        yield from self.mix.named_parameters(f"{prefix}.mix")
        for name in ("ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class LineformerParams:
    blocks: list
    fuse_w: Tensor
    fuse_b: Tensor
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor

    def named_parameters(self, prefix: str = "lineformer"):
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.lsab{i}")
        for name in ("fuse_w", "fuse_b", "head_w1", "head_b1", "head_w2", "head_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def _fan_in_uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), trainable=True, dtype=dtype)


def _init_linear(rng, n_in, n_out, dtype):
    return (
        _fan_in_uniform(rng, n_in, (n_in, n_out), dtype),
        _fan_in_uniform(rng, n_in, (n_out,), dtype),
    )


def init_attention(cfg: LineformerConfig, rng, dtype=np.float32) -> AttentionParams:
    c, s = cfg.channels, cfg.segment_length
    wq, bq = _init_linear(rng, c, c, dtype)
    wk, bk = _init_linear(rng, c, c, dtype)
    wv, bv = _init_linear(rng, c, c, dtype)
    wo, bo = _init_linear(rng, c, c, dtype)
    alpha = Tensor(np.ones(cfg.heads), trainable=True, dtype=dtype)
    pos = Tensor(rng.normal(0.0, 0.02, (s, c)), trainable=True, dtype=dtype)
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, alpha, pos)


def init_point_mlp(cfg: LineformerConfig, rng, dtype=np.float32) -> PointMlpParams:
    c = cfg.channels
    w1, b1 = _init_linear(rng, c, 2 * c, dtype)
    w2, b2 = _init_linear(rng, 2 * c, c, dtype)
    return PointMlpParams(w1, b1, w2, b2)


def init_lsab(cfg: LineformerConfig, rng, dtype=np.float32) -> LsabParams:
    c, e = cfg.channels, cfg.ffn_expansion
    pre_w, pre_b = _init_linear(rng, c, c, dtype)
    if cfg.mix == "mlp":
        mix = init_point_mlp(cfg, rng, dtype)
    else:
        mix = init_attention(cfg, rng, dtype)
    ffn_w1, ffn_b1 = _init_linear(rng, c, e * c, dtype)
    ffn_w2, ffn_b2 = _init_linear(rng, e * c, c, dtype)
    ones = Tensor(np.ones(c), trainable=True, dtype=dtype)
    return LsabParams(
        pre_w=pre_w,
        pre_b=pre_b,
        ln1_g=ones,
        ln1_b=Tensor(np.zeros(c), trainable=True, dtype=dtype),
        mix=mix,
        ln2_g=Tensor(np.ones(c), trainable=True, dtype=dtype),
        ln2_b=Tensor(np.zeros(c), trainable=True, dtype=dtype),
        ffn_w1=ffn_w1,
        ffn_b1=ffn_b1,
        ffn_w2=ffn_w2,
        ffn_b2=ffn_b2,
    )


def init_lineformer(cfg: LineformerConfig, rng, dtype=np.float32) -> LineformerParams:
    c = cfg.channels
    blocks = [init_lsab(cfg, rng, dtype) for _ in range(cfg.depth)]
    fuse_w, fuse_b = _init_linear(rng, 2 * c, c, dtype)
    head_w1, head_b1 = _init_linear(rng, c, c, dtype)
    head_w2, _ = _init_linear(rng, c, 1, dtype)
    head_b2 = Tensor(np.full(1, cfg.head_bias_init), trainable=True, dtype=dtype)
    return LineformerParams(blocks, fuse_w, fuse_b, head_w1, head_b1, head_w2, head_b2)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation (attention products only, the
# mechanism-dependent part of the cost)
# ---------------------------------------------------------------------------

_mac_counter: "list | None" = None


@contextmanager
def count_macs():
    """Context manager yielding a single-element list accumulating the
    multiply-accumulate count of attention products executed inside."""
    global _mac_counter
    if _mac_counter is not None:
        raise ContractError("MAC counting does not nest")
    counter = [0]
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = None


def _bump_macs(shape_a, shape_b):
    if _mac_counter is not None:
        batch = int(np.prod(shape_a[:-2], dtype=np.int64))
        _mac_counter[0] += batch * shape_a[-2] * shape_a[-1] * shape_b[-1]


def flops(cfg: LineformerConfig, mode: str) -> int:
    """Closed-form multiply-accumulate count of one attention pass over
    one ray: linear in points for the segmented form, quadratic for the
    global form."""
    n, c = cfg.n_points, cfg.channels
    if mode == "ls-msa":
        return 2 * n * c * cfg.head_dim  # == 2 N C^2 / k
    if mode == "g-msa":
        return 2 * n * n * c
    raise ContractError(f"unknown attention mode {mode!r}")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def partition(x: Tensor, segment_length: int) -> Tensor:
    """Split the point axis of (..., N, C) into contiguous segments:
    result (..., N/s, s, C). Order-preserving; ``regroup`` inverts it."""
    n, c = x.shape[-2], x.shape[-1]
    if n % segment_length:
        raise ShapeError(f"{n} points not divisible by segment length {segment_length}")
    lead = x.shape[:-2]
    return T.reshape(x, lead + (n // segment_length, segment_length, c))


def regroup(segments: Tensor) -> Tensor:
    """Inverse of ``partition``."""
    m, s, c = segments.shape[-3], segments.shape[-2], segments.shape[-1]
    lead = segments.shape[:-3]
    return T.reshape(segments, lead + (m * s, c))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., M, s, C) -> (..., M, heads, s, C/heads)."""
    lead = x.shape[:-2]
    m_axis = len(lead) - 1
    s, c = x.shape[-2], x.shape[-1]
    y = T.reshape(x, lead + (s, heads, c // heads))
    order = tuple(range(m_axis + 1)) + (m_axis + 2, m_axis + 1, m_axis + 3)
    return T.transpose(y, order)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., M, heads, s, dh) -> (..., M, s, heads*dh)."""
    lead = x.shape[:-3]
    m_axis = len(lead) - 1
    heads, s, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    order = tuple(range(m_axis + 1)) + (m_axis + 2, m_axis + 1, m_axis + 3)
    y = T.transpose(x, order)
    return T.reshape(y, lead + (s, heads * dh))


def ls_msa(p: AttentionParams, x: Tensor) -> Tensor:
    """Segment-local channel attention over (..., N, C).

    Per segment and head: A = softmax_cols(K^T Q / alpha) is a
    (dh x dh) map, and the head output is V A, a convex mixture of the
    segment's value channels per output channel. Heads are concatenated,
    projected, and shifted by the shared positional table.
    """
    k = p.alpha.size
    s = p.pos.shape[0]
    segs = partition(x, s)  # (..., M, s, C)
    q = _split_heads(T.linear(segs, p.wq, p.bq), k)  # (..., M, k, s, dh)
    kk = _split_heads(T.linear(segs, p.wk, p.bk), k)
    v = _split_heads(T.linear(segs, p.wv, p.bv), k)

    nd = len(q.shape)
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    kt = T.transpose(kk, swap)  # (..., M, k, dh, s)
    _bump_macs(kt.shape, q.shape)
    att = T.matmul(kt, q)  # (..., M, k, dh, dh)
    att = T.div(att, T.reshape(p.alpha, (k, 1, 1)))
    att = T.softmax(att, axis=-2)  # each column sums to 1
    _bump_macs(v.shape, att.shape)
    h = T.matmul(v, att)  # (..., M, k, s, dh)

    merged = _merge_heads(h)  # (..., M, s, C)
    out = T.add(T.linear(merged, p.wo, p.bo), p.pos)
    return regroup(out)


def g_msa(p: AttentionParams, x: Tensor) -> Tensor:
    """Global token attention over all N points (quadratic reference).

    Same parameters as ``ls_msa``; softmax(Q K^T / (alpha sqrt(dh)))
    rows attend over all points, and the positional table is tiled
    across segments exactly as in the segmented form.
    """
    k = p.alpha.size
    s = p.pos.shape[0]
    c = x.shape[-1]
    dh = c // k
    lead = x.shape[:-2]
    n = x.shape[-2]

    def split_tokens(t):  # (..., N, C) -> (..., k, N, dh)
        y = T.reshape(t, lead + (n, k, dh))
        axis = len(lead)
        order = tuple(range(axis)) + (axis + 1, axis, axis + 2)
        return T.transpose(y, order)

    q = split_tokens(T.linear(x, p.wq, p.bq))
    kk = split_tokens(T.linear(x, p.wk, p.bk))
    v = split_tokens(T.linear(x, p.wv, p.bv))

    nd = len(q.shape)
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    kt = T.transpose(kk, swap)  # (..., k, dh, N)
    _bump_macs(q.shape, kt.shape)
    scores = T.matmul(q, kt)  # (..., k, N, N)
    scale = T.reshape(T.mul(p.alpha, math.sqrt(dh)), (k, 1, 1))
    scores = T.div(scores, scale)
    att = T.softmax(scores, axis=-1)
    _bump_macs(att.shape, v.shape)
    h = T.matmul(att, v)  # (..., k, N, dh)

    axis = len(lead)
    order = tuple(range(axis)) + (axis + 1, axis, axis + 2)
    merged = T.reshape(T.transpose(h, order), lead + (n, c))
    out = T.add(T.linear(merged, p.wo, p.bo), _tile_pos(p.pos, n))
    return out


def _tile_pos(pos: Tensor, n: int) -> Tensor:
    s = pos.shape[0]
    if n % s:
        raise ShapeError(f"{n} points not divisible by positional table rows {s}")
    if n == s:
        return pos
    return T.concat([pos] * (n // s), axis=0)


def point_mlp(p: PointMlpParams, x: Tensor) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


def lsab_forward(p: LsabParams, x: Tensor, mix_kind: str = "ls-msa") -> Tensor:
    """Pre-norm residual block: u = pre(x); u += mix(LN1(u));
    y = u + FFN(LN2(u))."""
    u = T.linear(x, p.pre_w, p.pre_b)
    normed = T.layer_norm(u, p.ln1_g, p.ln1_b)
    if mix_kind == "ls-msa":
        mixed = ls_msa(p.mix, normed)
    elif mix_kind == "g-msa":
        mixed = g_msa(p.mix, normed)
    elif mix_kind == "mlp":
        mixed = point_mlp(p.mix, normed)
    else:
        raise ContractError(f"unknown mix kind {mix_kind!r}")
    u = T.add(u, mixed)
    ffn_in = T.layer_norm(u, p.ln2_g, p.ln2_b)
    ffn = T.linear(T.gelu(T.linear(ffn_in, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2)
    return T.add(u, ffn)


def forward(params: LineformerParams, cfg: LineformerConfig, features: Tensor) -> Tensor:
    """Features (..., N, C) to non-negative densities (..., N): two
    blocks, concatenate the original features (skip), fuse 2C -> C, two
    more blocks, then the softplus density head."""
    x = lsab_forward(params.blocks[0], features, cfg.mix)
    x = lsab_forward(params.blocks[1], x, cfg.mix)
    x = T.concat([x, features], axis=len(x.shape) - 1)
    x = T.linear(x, params.fuse_w, params.fuse_b)
    x = lsab_forward(params.blocks[2], x, cfg.mix)
    x = lsab_forward(params.blocks[3], x, cfg.mix)
    x = T.gelu(T.linear(x, params.head_w1, params.head_b1))
    x = T.softplus(T.linear(x, params.head_w2, params.head_b2))
    x = T.mul(x, np.asarray(cfg.density_scale, dtype=x.dtype))
    return T.reshape(x, x.shape[:-1])
