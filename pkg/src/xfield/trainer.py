"""Training loop: Adam with bias correction, halving learning-rate
schedule, gradient clipping, checkpointing with exact resume, and a
deterministic metrics log.

One ``numpy.random.Generator`` owned by the loop drives the ray
sampler and the stratified point jitter in a fixed order, so a config
plus seed reproduces checkpoints bit-identically; resuming restores
the generator state from the checkpoint and continues the same
sequence.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fileio
from .errors import ContractError, FileFormatError, NumericalError
from .field import Field, FieldConfig, field_forward, init_field
from .geometry import RayBundle, ScanGeometry, rays_for_pixels, sample_points_batch
from .hash_encoder import HashGridConfig
from .lineformer import LineformerConfig
from .phantoms import ProjectionSet
from .renderer import render, squared_error_loss
from .sampling import MlgSampler, naive_sample, window_debug_image
from .tensor import Tape, Tensor, set_finite_checks

CHECKPOINT_MAGIC = b"XFECKP01"
_MAGIC_FIELD = 16

WEIGHT_INIT_NOTE = "uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    halve_every: int = 1500
    total_iterations: int = 3000
    patch_rays: int = 1024
    pixel_rays: int = 1024
    points_per_ray: int = 320
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float = 10.0
    checkpoint_every: int = 500
    loss_reduction: str = "mean"
    sampler: str = "mlg"  # or "naive"
    patch_size: int = 4
    tau: float = 0.05
    point_jitter: str = "stratified"  # eval always uses "uniform"

    def __post_init__(self):
        if self.sampler not in ("mlg", "naive"):
            raise ContractError(f"unknown sampler {self.sampler!r}")
        if self.patch_rays % (self.patch_size**2):
            raise ContractError("patch_rays must tile whole windows")

    @property
    def batch_rays(self) -> int:
        return self.patch_rays + self.pixel_rays


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """lr0 halved every ``halve_every`` iterations (floor convention)."""
    if iteration < 0:
        raise ContractError("iteration must be >= 0")
    return cfg.lr0 * 0.5 ** (iteration // cfg.halve_every)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _config_header(field_cfg: FieldConfig, train_cfg: TrainConfig, geom: ScanGeometry):
    return {
        "encoder": asdict(field_cfg.encoder),
        "lineformer": asdict(field_cfg.lineformer),
        "train": asdict(train_cfg),
        "geometry": {
            "dso": geom.dso,
            "dsd": geom.dsd,
            "det_rows": geom.det_rows,
            "det_cols": geom.det_cols,
            "pixel_pitch": geom.pixel_pitch,
            "angles": [float(a) for a in geom.angles],
            "volume_extent": [float(e) for e in geom.volume_extent],
        },
        "weight_init": WEIGHT_INIT_NOTE,
    }


def save_checkpoint(
    path,
    field_obj: Field,
    adam: AdamState,
    iteration: int,
    rng: np.random.Generator,
    field_cfg: FieldConfig,
    train_cfg: TrainConfig,
    geom: ScanGeometry,
) -> None:
    header = _config_header(field_cfg, train_cfg, geom)
    header["iteration"] = iteration
    header["rng_state"] = rng.bit_generator.state
    blobs: list[tuple[str, np.ndarray]] = []
    for name, p in field_obj.named_parameters():
        blobs.append((name, p.data))
    for name in adam.m:
        blobs.append((f"adam.m.{name}", adam.m[name]))
        blobs.append((f"adam.v.{name}", adam.v[name]))
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC.ljust(_MAGIC_FIELD, b"\0"))
        f.write(len(header_bytes).to_bytes(4, "little"))
        f.write(header_bytes)
        for name, arr in blobs:
            encoded = name.encode("utf-8")
            f.write(len(encoded).to_bytes(4, "little"))
            f.write(encoded)
            payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(len(payload).to_bytes(4, "little"))
            f.write(payload)


def load_checkpoint(path):
    """Returns (field, adam_state, iteration, rng, field_cfg, train_cfg,
    geometry)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:_MAGIC_FIELD] != CHECKPOINT_MAGIC.ljust(_MAGIC_FIELD, b"\0"):
        raise FileFormatError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    header_len = int.from_bytes(raw[_MAGIC_FIELD : _MAGIC_FIELD + 4], "little")
    pos = _MAGIC_FIELD + 4
    header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    pos += header_len

    blobs = {}
    while pos < len(raw):
        name_len = int.from_bytes(raw[pos : pos + 4], "little")
        pos += 4
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        byte_len = int.from_bytes(raw[pos : pos + 4], "little")
        pos += 4
        if pos + byte_len > len(raw):
            raise FileFormatError(
                f"{path}: blob {name} wants {byte_len} bytes at offset {pos}, "
                f"file ends at {len(raw)}"
            )
        blobs[name] = np.frombuffer(raw[pos : pos + byte_len], dtype="<f4")
        pos += byte_len

    field_cfg = FieldConfig(
        encoder=HashGridConfig(**header["encoder"]),
        lineformer=LineformerConfig(**header["lineformer"]),
    )
    train_cfg = TrainConfig(**header["train"])
    g = header["geometry"]
    geom = ScanGeometry(
        dso=g["dso"],
        dsd=g["dsd"],
        det_rows=g["det_rows"],
        det_cols=g["det_cols"],
        pixel_pitch=g["pixel_pitch"],
        angles=np.asarray(g["angles"]),
        volume_extent=np.asarray(g["volume_extent"]),
    )
    field_obj = init_field(field_cfg, np.random.default_rng(0))
    params = field_obj.parameters()
    adam = AdamState.for_params(params)
    for name, p in params.items():
        if name not in blobs:
            raise FileFormatError(f"{path}: checkpoint missing parameter {name}")
        p.data[...] = blobs[name].reshape(p.data.shape)
        adam.m[name][...] = blobs[f"adam.m.{name}"].reshape(p.data.shape)
        adam.v[name][...] = blobs[f"adam.v.{name}"].reshape(p.data.shape)
    adam.step = int(header["iteration"])
    rng = np.random.default_rng(0)
    state = header["rng_state"]
    state["state"] = {k: int(v) for k, v in state["state"].items()}
    rng.bit_generator.state = state
    return field_obj, adam, int(header["iteration"]), rng, field_cfg, train_cfg, geom


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    losses: list = field(default_factory=list)
    aborted: bool = False


def _subset_bundle(bundle: RayBundle, mask: np.ndarray) -> RayBundle:
    return RayBundle(
        origins=bundle.origins[mask],
        directions=bundle.directions[mask],
        t_near=bundle.t_near[mask],
        t_far=bundle.t_far[mask],
        hit=bundle.hit[mask],
    )


def metrics_csv(rows) -> str:
    lines = ["iteration,lr,loss,wall_ms"]
    for it, lr, loss, ms in rows:
        lines.append(f"{it},{lr:.10e},{loss:.10e},{ms:.3f}")
    return "\n".join(lines) + "\n"


def train(
    geom: ScanGeometry,
    projections: ProjectionSet,
    field_cfg: FieldConfig,
    train_cfg: TrainConfig,
    out_dir,
    resume=None,
    window_debug: bool = False,
) -> TrainResult:
    """Fit the field to one projection stack.

    Writes ``metrics.csv`` plus periodic and final checkpoints into
    ``out_dir``. On a non-finite loss or gradient the step is aborted,
    the last good state is dumped to ``checkpoint_abort.xfeckp`` and
    the error re-raised for the caller (the CLI maps it to exit 3).
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        field_obj, adam, start_iter, rng, field_cfg, train_cfg, geom = load_checkpoint(
            resume
        )
    else:
        rng = np.random.default_rng(train_cfg.seed)
        field_obj = init_field(field_cfg, rng)
        adam = AdamState.for_params(field_obj.parameters())
        start_iter = 0

    params = field_obj.parameters()
    use_mlg = train_cfg.sampler == "mlg"
    sampler = (
        MlgSampler(projections, train_cfg.patch_size, train_cfg.tau) if use_mlg else None
    )
    i0 = projections.i0
    rows = []
    losses = []

    def write_metrics():
        (out_dir / "metrics.csv").write_text(metrics_csv(rows))

    def dump(path_name, iteration):
        save_checkpoint(
            out_dir / path_name, field_obj, adam, iteration, rng,
            field_cfg, train_cfg, geom,
        )

    final_name = "checkpoint_final.xfeckp"
    for it in range(start_iter, train_cfg.total_iterations):
        started = time.perf_counter()
        lr = lr_at(it, train_cfg)
        if use_mlg:
            batch = sampler.sample(train_cfg.patch_rays, train_cfg.pixel_rays, rng)
        else:
            batch = naive_sample(projections, train_cfg.batch_rays, rng)
        bundle = rays_for_pixels(geom, batch.views, batch.rows, batch.cols)
        hit = bundle.hit
        hits = _subset_bundle(bundle, hit)
        points = sample_points_batch(
            hits,
            train_cfg.points_per_ray,
            mode=train_cfg.point_jitter,
            rng=rng,
            extent=geom.volume_extent,
        )
        miss_sq = float(((i0 - batch.i_gt[~hit]) ** 2).sum()) if (~hit).any() else 0.0

        try:
            # Per-op NaN screening is redundant inside this loop: any
            # non-finite value propagates into the scalar loss or the
            # parameter gradients, both checked below every iteration,
            # and the step still aborts with a diagnostic. Skipping the
            # per-op scans saves a full memory pass per op.
            checks_were_on = set_finite_checks(False)
            try:
                with Tape() as tape:
                    densities = field_forward(field_obj, points.normalized)
                    rendered = render(densities, points.delta, i0=i0)
                    loss_t = squared_error_loss(
                        rendered, batch.i_gt[hit], reduction="sum"
                    )
                    tape.backward(loss_t)
            finally:
                set_finite_checks(checks_were_on)
            loss_value = loss_t.item() + miss_sq
            if not np.isfinite(loss_value):
                raise NumericalError(f"non-finite loss at iteration {it}")
            if train_cfg.loss_reduction == "mean":
                loss_value /= len(batch)
            grads = {name: tape.grad(p) for name, p in params.items()}
            for name, g in grads.items():
                if g is None:
                    raise ContractError(f"parameter {name} received no gradient")
            # mean-mode: the taped loss is a sum over hit rays (miss rays
            # contribute a constant), so gradients scale by the batch size;
            # fold that and the global-norm clip into one fresh multiply
            # (backward may hand out views, so no in-place scaling here)
            inv = 1.0 / len(batch) if train_cfg.loss_reduction == "mean" else 1.0
            raw_norm = np.sqrt(
                sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())
            )
            factor = inv
            if train_cfg.grad_clip > 0 and inv * raw_norm > train_cfg.grad_clip:
                factor = train_cfg.grad_clip / raw_norm
            if factor != 1.0:
                grads = {name: g * factor for name, g in grads.items()}
            adam_step(
                params, grads, adam, lr,
                train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps,
            )
        except NumericalError:
            write_metrics()
            dump("checkpoint_abort.xfeckp", it)
            raise

        if window_debug and use_mlg:
            _dump_window_debug(out_dir, sampler, batch, it)

        wall_ms = (time.perf_counter() - started) * 1e3
        rows.append((it, lr, loss_value, wall_ms))
        losses.append(loss_value)
        done = it + 1
        if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            dump(f"checkpoint_{done:06d}.xfeckp", done)
            write_metrics()

    dump(final_name, train_cfg.total_iterations)
    write_metrics()
    return TrainResult(
        checkpoint_path=str(out_dir / final_name),
        metrics_path=str(out_dir / "metrics.csv"),
        losses=losses,
    )


def _dump_window_debug(out_dir, sampler: MlgSampler, batch, iteration: int) -> None:
    from pathlib import Path

    debug_dir = Path(out_dir) / "windows"
    debug_dir.mkdir(exist_ok=True)
    patch = batch.provenance == 0
    panels = []
    for view, mask in enumerate(sampler.masks):
        sel = patch & (batch.views == view)
        if sel.any():
            origins = np.unique(
                np.stack(
                    [
                        batch.rows[sel] - batch.rows[sel] % sampler.size,
                        batch.cols[sel] - batch.cols[sel] % sampler.size,
                    ],
                    axis=1,
                ),
                axis=0,
            )
        else:
            origins = np.zeros((0, 2), dtype=np.int64)
        panels.append(window_debug_image(mask, sampler.window_sets[view], origins))
    fileio.write_pgm(
        debug_dir / f"iter_{iteration:06d}.pgm", np.concatenate(panels, axis=1)
    )
