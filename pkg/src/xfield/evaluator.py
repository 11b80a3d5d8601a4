"""Image metrics plus novel-view and volume evaluation of a trained field.

PSNR uses peak 1 (the unattenuated intensity) for projections and the
reference maximum for volumes; identical inputs report the 100 dB cap.
SSIM is the Gaussian-window local statistic (11x11, sigma 1.5,
k1=0.01, k2=0.03) averaged over valid window positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .field import Field, field_forward
from .geometry import ScanGeometry, rays_for_pixels, sample_points_batch
from .phantoms import ProjectionSet, VoxelVolume
from .trainer import _subset_bundle

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float, cap: float = PSNR_CAP_DB) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak * peak / mse), cap)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local means via sliding windows."""
    w = kernel.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(image, (w, w))
    return np.einsum("ijkl,kl->ij", windows, kernel, optimize=True)


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    peak: float = 1.0,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    kernel = _gaussian_kernel(window, sigma)
    mu_a = _windowed(a, kernel)
    mu_b = _windowed(b, kernel)
    var_a = _windowed(a * a, kernel) - mu_a**2
    var_b = _windowed(b * b, kernel) - mu_b**2
    cov = _windowed(a * b, kernel) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score_map.mean())


@dataclass
class MetricsReport:
    """Per-item and mean scores plus a fingerprint of the producing config."""

    kind: str  # "nvs" or "ct"
    per_item_psnr: list = field(default_factory=list)
    per_item_ssim: list = field(default_factory=list)
    psnr_3d: float | None = None  # volume metrics only
    config_fingerprint: str = ""

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_item_psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_item_ssim))

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "mean_psnr_db": self.mean_psnr,
                "mean_ssim": self.mean_ssim,
                "psnr_3d_db": self.psnr_3d,
                "per_item_psnr_db": self.per_item_psnr,
                "per_item_ssim": self.per_item_ssim,
                "config_fingerprint": self.config_fingerprint,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        lines = ["item,psnr_db,ssim"]
        for i, (p, s) in enumerate(zip(self.per_item_psnr, self.per_item_ssim)):
            lines.append(f"{i},{p:.6f},{s:.8f}")
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.8f}")
        return "\n".join(lines) + "\n"


def render_view(
    field_obj: Field,
    geom: ScanGeometry,
    view: int,
    n_points: int,
    i0: float = 1.0,
    chunk_rays: int = 4096,
) -> np.ndarray:
    """Render one full detector image through the trained field with
    uniform (deterministic) point sampling."""
    h, w = geom.det_rows, geom.det_cols
    rows, cols = np.divmod(np.arange(h * w), w)
    views = np.full(h * w, view)
    out = np.full(h * w, i0, dtype=np.float32)
    for lo in range(0, h * w, chunk_rays):
        sel = slice(lo, min(lo + chunk_rays, h * w))
        bundle = rays_for_pixels(geom, views[sel], rows[sel], cols[sel])
        hit = bundle.hit
        if not hit.any():
            continue
        points = sample_points_batch(
            _subset_bundle(bundle, hit),
            n_points,
            mode="uniform",
            extent=geom.volume_extent,
        )
        densities = field_forward(field_obj, points.normalized)
        absorption = (densities.data.astype(np.float64) * points.delta).sum(axis=1)
        out[np.flatnonzero(hit) + lo] = (i0 * np.exp(-absorption)).astype(np.float32)
    return out.reshape(h, w)


def eval_nvs(
    field_obj: Field,
    geom: ScanGeometry,
    projections: ProjectionSet,
    n_points: int,
    fingerprint: str = "",
    chunk_rays: int = 4096,
) -> tuple[MetricsReport, np.ndarray]:
    """Render every view of ``projections``'s geometry and score against
    its images. Returns the report and the rendered stack."""
    if projections.images.shape[1:] != (geom.det_rows, geom.det_cols):
        raise ContractError("projection shape does not match the detector")
    if projections.n_views != geom.n_views:
        raise ContractError("projection count does not match the geometry")
    report = MetricsReport(kind="nvs", config_fingerprint=fingerprint)
    rendered = np.empty_like(projections.images)
    for view in range(projections.n_views):
        rendered[view] = render_view(
            field_obj, geom, view, n_points, projections.i0, chunk_rays
        )
        gt = projections.images[view]
        report.per_item_psnr.append(psnr(rendered[view], gt, peak=projections.i0))
        report.per_item_ssim.append(ssim(rendered[view], gt, peak=projections.i0))
    return report, rendered


def extract_ct(
    field_obj: Field,
    dims,
    spacing,
    extent,
    chunk_rows: int = 256,
) -> VoxelVolume:
    """Query the field at voxel centers and assemble a volume.

    Voxels are fed as x-axis scanlines so segment attention sees
    spatially contiguous neighbors, mirroring how rays are evaluated.
    """
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=np.float64)
    extent = np.asarray(extent, dtype=np.float64)
    centers = [
        (((np.arange(d) + 0.5) - d / 2.0) * s) / e + 0.5
        for d, s, e in zip(dims, spacing, extent)
    ]
    for axis, c in enumerate(centers):
        if c.min() < -1e-9 or c.max() > 1.0 + 1e-9:
            raise ContractError(
                f"requested grid exceeds the field's unit cube on axis {axis}"
            )
    dx, dy, dz = dims
    out = np.empty((dy * dz, dx), dtype=np.float32)
    yy, zz = np.meshgrid(centers[1], centers[2], indexing="ij")
    yz = np.stack([yy.reshape(-1), zz.reshape(-1)], axis=1)  # (dy*dz, 2)
    xs = centers[0]
    for lo in range(0, yz.shape[0], chunk_rows):
        hi = min(lo + chunk_rows, yz.shape[0])
        rows = hi - lo
        pts = np.empty((rows, dx, 3), dtype=np.float32)
        pts[:, :, 0] = xs[None, :]
        pts[:, :, 1] = yz[lo:hi, 0][:, None]
        pts[:, :, 2] = yz[lo:hi, 1][:, None]
        out[lo:hi] = field_forward(field_obj, pts).data
    data = out.reshape(dy, dz, dx).transpose(2, 0, 1)
    return VoxelVolume(dims, spacing, np.ascontiguousarray(data))


def eval_ct(
    volume: VoxelVolume, reference: VoxelVolume, fingerprint: str = ""
) -> MetricsReport:
    """Volume PSNR (3-D, peak = reference max) plus slice-wise PSNR and
    SSIM over axial (z) slices."""
    if volume.dims != reference.dims:
        raise ContractError(f"dims differ: {volume.dims} vs {reference.dims}")
    peak = float(reference.data.max())
    if peak <= 0:
        peak = 1.0
    report = MetricsReport(kind="ct", config_fingerprint=fingerprint)
    report.psnr_3d = psnr(volume.data, reference.data, peak=peak)
    for k in range(volume.dims[2]):
        got = volume.data[:, :, k]
        want = reference.data[:, :, k]
        report.per_item_psnr.append(psnr(got, want, peak=peak))
        report.per_item_ssim.append(ssim(got, want, peak=peak))
    return report
