"""Finite-difference verification of analytic gradients.

Analytic gradients come from one taped forward/backward pass; the
reference is central differences of the same scalar function, run
without a tape. Checks are meaningful only in float64 (the step of
1e-4 drowns in float32 rounding), so callers build float64 parameters.

``full_suite`` bundles per-op checks and deep compositions (encoder,
attention blocks, whole field with rendering and loss) across many
seeds; deep compositions probe a random coordinate subset per seed so
the suite stays fast while seeds jointly cover the parameter space.
``full_pipeline_exhaustive`` checks every coordinate of every
parameter once on a small two-ray problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor


@dataclass
class GradReport:
    """Worst-case relative error per parameter, plus pass/fail."""

    max_rel_err: float
    worst_param: str
    checked_coords: int
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-10:
        return 0.0
    return abs(analytic - numeric) / scale


def check_gradients(
    loss_fn,
    params: dict[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare taped gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must return a scalar Tensor computed from ``params``
    (captured by closure). With ``max_coords_per_param`` set, only a
    random subset of coordinates per parameter is probed (the caller
    varies seeds to cover the rest).
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"gradient checks require float64 params ({name})")

    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        g = tape.grad(p)
        if g is None:
            raise ContractError(f"parameter {name} unreachable from the loss")
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        analytic[name] = g

    if rng is None:
        rng = np.random.default_rng(0)

    max_err = 0.0
    worst = ""
    checked = 0
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or max_coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        an_flat = analytic[name].reshape(-1)
        param_err = 0.0
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + step
            up = loss_fn().item()
            flat[idx] = original - step
            down = loss_fn().item()
            flat[idx] = original
            numeric = (up - down) / (2.0 * step)
            err = _rel_err(float(an_flat[idx]), numeric)
            param_err = max(param_err, err)
            checked += 1
        per_param[name] = param_err
        if param_err > max_err:
            max_err = param_err
            worst = name
    return GradReport(max_err, worst, checked, tol, per_param)


# ---------------------------------------------------------------------------
# the bundled suite
# ---------------------------------------------------------------------------


@dataclass
class SuiteEntry:
    name: str
    max_rel_err: float
    tol: float
    checked_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), trainable=True, dtype=np.float64)


def _op_checks(rng):
    """Exhaustive small-tensor checks for every differentiable op."""
    from . import tensor as T

    w45 = rng.standard_normal((4, 2))
    a, b = _t64(rng, 4, 5), _t64(rng, 5, 2)
    yield "tensor.matmul", 1e-4, None, (
        lambda: T.reduce_sum(T.mul(T.matmul(a, b), w45)),
        {"a": a, "b": b},
    )
    x33 = _t64(rng, 3, 3)
    w33 = rng.standard_normal((3, 3))
    yield "tensor.softmax", 1e-4, None, (
        lambda: T.reduce_sum(T.mul(T.softmax(x33, axis=-1), w33)),
        {"x": x33},
    )
    xln, gln, bln = _t64(rng, 2, 8), _t64(rng, 8), _t64(rng, 8)
    wln = rng.standard_normal((2, 8))
    yield "tensor.layer_norm", 1e-4, None, (
        lambda: T.reduce_sum(T.mul(T.layer_norm(xln, gln, bln), wln)),
        {"x": xln, "gain": gln, "bias": bln},
    )
    xe = _t64(rng, 3, 4)
    we = rng.standard_normal((3, 4))
    yield "tensor.elementwise", 1e-4, None, (
        lambda: T.reduce_sum(
            T.mul(
                T.add(T.gelu(xe), T.softplus(T.neg(T.mul(xe, 0.5)))),
                T.mul(T.exp(T.mul(xe, 0.1)), we),
            )
        ),
        {"x": xe},
    )
    xs = _t64(rng, 2, 3, 4)
    ws = rng.standard_normal((3, 2, 3))
    yield "tensor.shape_ops", 1e-4, None, (
        lambda: T.reduce_sum(
            T.mul(
                T.reshape(T.transpose(T.concat([xs, xs], axis=2), (1, 0, 2)), (3, 2, 8))[
                    :, :, 2:5
                ],
                ws,
            )
        ),
        {"x": xs},
    )
    xr = _t64(rng, 3, 5)
    yield "tensor.reductions", 1e-4, None, (
        lambda: T.add(
            T.reduce_sum(T.mul(T.reduce_mean(xr, axis=1), [1.0, 2.0, 3.0])),
            T.reduce_mean(T.mul(xr, xr)),
        ),
        {"x": xr},
    )
    table = _t64(rng, 9, 3)
    idx = rng.integers(0, 9, size=(2, 6))
    wt = rng.standard_normal((2, 6, 3))
    weights = rng.random((2, 6))
    yield "tensor.take_rows", 1e-4, None, (
        lambda: T.reduce_sum(T.mul(T.take_rows(table, idx), wt)),
        {"table": table},
    )
    yield "tensor.weighted_row_sum", 1e-4, None, (
        lambda: T.reduce_sum(T.mul(T.weighted_row_sum(table, idx[:, :6], weights), wt[0])),
        {"table": table},
    )


def _module_checks(rng):
    """Deep compositions; coordinates are subsampled per seed."""
    from . import tensor as T
    from .hash_encoder import HashGridConfig, encode, init_hash_grid
    from .lineformer import (
        LineformerConfig,
        forward,
        g_msa,
        init_attention,
        init_lineformer,
        init_lsab,
        ls_msa,
        lsab_forward,
    )
    from .renderer import render, squared_error_loss

    enc_cfg = HashGridConfig(
        levels=3, log2_table_size=6, features_per_level=2,
        base_resolution=3, growth=2.0,
    )
    enc = init_hash_grid(enc_cfg, rng, dtype=np.float64)
    for t in enc.tables:
        t.data[:] = rng.standard_normal(t.data.shape)
    pts = rng.random((4, 3))
    wenc = rng.standard_normal((4, enc_cfg.channels))
    yield "hash_encoder.encode", 1e-3, 24, (
        lambda: T.reduce_sum(T.mul(encode(enc, enc_cfg, pts), wenc)),
        dict(enc.named_parameters()),
    )

    lf_cfg = LineformerConfig(channels=8, heads=2, segment_length=2, n_points=4,
                              head_bias_init=0.0)
    attn = init_attention(lf_cfg, rng, dtype=np.float64)
    xa = _t64(rng, 4, 8)
    wa = rng.standard_normal((4, 8))
    yield "lineformer.ls_msa", 1e-4, 16, (
        lambda: T.reduce_sum(T.mul(ls_msa(attn, xa), wa)),
        {"x": xa, **dict(attn.named_parameters("attn"))},
    )
    yield "lineformer.g_msa", 1e-4, 16, (
        lambda: T.reduce_sum(T.mul(g_msa(attn, xa), wa)),
        {"x": xa, **dict(attn.named_parameters("attn"))},
    )
    block = init_lsab(lf_cfg, rng, dtype=np.float64)
    yield "lineformer.lsab", 1e-3, 8, (
        lambda: T.reduce_sum(T.mul(lsab_forward(block, xa, "ls-msa"), wa)),
        {"x": xa, **dict(block.named_parameters("lsab"))},
    )
    net = init_lineformer(lf_cfg, rng, dtype=np.float64)
    wn = rng.standard_normal(4)
    yield "lineformer.forward", 1e-3, 3, (
        lambda: T.reduce_sum(T.mul(forward(net, lf_cfg, xa), wn)),
        {"x": xa, **dict(net.named_parameters())},
    )

    rho = Tensor(rng.uniform(0.01, 0.3, (2, 6)), trainable=True, dtype=np.float64)
    deltas = rng.uniform(0.2, 1.0, (2, 6))
    gts = rng.uniform(0.3, 0.9, 2)
    yield "renderer.render_loss", 1e-4, None, (
        lambda: squared_error_loss(render(rho, deltas), gts),
        {"rho": rho},
    )

    yield "pipeline.field_render_loss", 1e-3, 3, _pipeline_case(rng)


def _pipeline_case(rng, n_rays: int = 2, n_points: int = 8):
    """Encoder -> backbone -> render -> squared-error loss, float64."""
    from . import tensor as T
    from .field import Field, FieldConfig, field_forward
    from .hash_encoder import HashGridConfig, init_hash_grid
    from .lineformer import LineformerConfig, init_lineformer
    from .renderer import render, squared_error_loss

    cfg = FieldConfig(
        encoder=HashGridConfig(
            levels=2, log2_table_size=6, features_per_level=4,
            base_resolution=3, growth=2.0,
        ),
        lineformer=LineformerConfig(
            channels=8, heads=2, segment_length=2, n_points=n_points,
            density_scale=1.0, head_bias_init=0.0,
        ),
    )
    fobj = Field(
        cfg=cfg,
        encoder=init_hash_grid(cfg.encoder, rng, dtype=np.float64),
        backbone=init_lineformer(cfg.lineformer, rng, dtype=np.float64),
    )
    for t in fobj.encoder.tables:
        t.data[:] = 0.3 * rng.standard_normal(t.data.shape)
    pts = rng.random((n_rays, n_points, 3))
    deltas = rng.uniform(0.2, 0.8, (n_rays, n_points))
    gts = rng.uniform(0.3, 0.9, n_rays)

    def loss_fn():
        dens = field_forward(fobj, pts)
        return squared_error_loss(render(dens, deltas), gts)

    return loss_fn, dict(fobj.named_parameters())


def full_suite(n_seeds: int = 20, coords_scale: int = 1) -> list[SuiteEntry]:
    """Run every check over ``n_seeds`` seeds and aggregate the worst
    relative error per check name."""
    worst: dict[str, SuiteEntry] = {}
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        for source in (_op_checks, _module_checks):
            for name, tol, coords, (loss_fn, params) in source(rng):
                report = check_gradients(
                    loss_fn,
                    params,
                    tol=tol,
                    max_coords_per_param=None if coords is None else coords * coords_scale,
                    rng=rng,
                )
                entry = worst.get(name)
                if entry is None or report.max_rel_err > entry.max_rel_err:
                    worst[name] = SuiteEntry(
                        name, report.max_rel_err, tol, report.checked_coords
                    )
    return list(worst.values())


def full_pipeline_exhaustive(seed: int = 0) -> SuiteEntry:
    """Every parameter coordinate of the two-ray pipeline, checked once."""
    rng = np.random.default_rng(seed)
    loss_fn, params = _pipeline_case(rng)
    report = check_gradients(loss_fn, params, tol=1e-3)
    return SuiteEntry(
        "pipeline.exhaustive", report.max_rel_err, 1e-3, report.checked_coords
    )
