"""Procedural ground-truth volumes and the analytic forward projector.

Phantoms are sums of simple solids (ellipsoids, boxes, cylinders)
evaluated at voxel centers, with radiodensities in [0, 0.1] / mm.
The projector integrates exp(-line integral) per detector pixel with
uniform midpoint sampling, which doubles as the independent reference
for the trainable renderer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import ScanGeometry, rays_for_pixels

DENSITY_SCALE = 0.1  # peak radiodensity, 1/mm


@dataclass(frozen=True)
class VoxelVolume:
    """Radiodensity samples on a regular grid centered at the origin.

    ``data`` is indexed [x, y, z]; voxel (i, j, k) is centered at
    ((i + 0.5) - dims/2) * spacing per axis.
    """

    dims: tuple  # (Dx, Dy, Dz)
    spacing: np.ndarray  # mm per voxel, (3,)
    data: np.ndarray  # float32, shape dims

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(
            self, "spacing", np.asarray(self.spacing, dtype=np.float64)
        )
        if self.data.shape != self.dims:
            raise ContractError(
                f"payload shape {self.data.shape} != dims {self.dims}"
            )
        if np.any(self.data < 0):
            raise ContractError("radiodensity must be non-negative")

    @property
    def extent(self) -> np.ndarray:
        """Full physical edge lengths, mm."""
        return np.asarray(self.dims) * self.spacing

    def voxel_centers_1d(self, axis: int) -> np.ndarray:
        d = self.dims[axis]
        return ((np.arange(d) + 0.5) - d / 2.0) * self.spacing[axis]


@dataclass(frozen=True)
class ProjectionSet:
    """A stack of simulated detector images with their gantry angles."""

    images: np.ndarray  # (V, H, W) float32, intensities in (0, i0]
    angles: np.ndarray  # (V,)
    i0: float = 1.0
    noise_fraction: float = 0.0
    seed: int | None = None

    @property
    def n_views(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class Ellipsoid:
    density: float  # additive, before DENSITY_SCALE
    center: tuple  # normalized [-1, 1] coords
    semi_axes: tuple  # normalized
    phi_deg: float = 0.0  # rotation about z


# Head-phantom ellipsoid table (normalized coords, additive densities).
# x-mirror symmetric except for the tilted inner pair and the two small
# off-axis inserts near the bottom.
SHEPP_LOGAN_3D = (
    Ellipsoid(1.0, (0.0, 0.0, 0.0), (0.69, 0.92, 0.81)),
    Ellipsoid(-0.8, (0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78)),
    Ellipsoid(-0.2, (0.22, 0.0, 0.0), (0.11, 0.31, 0.22), -18.0),
    Ellipsoid(-0.2, (-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), 18.0),
    Ellipsoid(0.1, (0.0, 0.35, -0.15), (0.21, 0.25, 0.41)),
    Ellipsoid(0.1, (0.0, 0.1, 0.25), (0.046, 0.046, 0.05)),
    Ellipsoid(0.1, (0.0, -0.1, 0.25), (0.046, 0.046, 0.05)),
    Ellipsoid(0.1, (-0.08, -0.605, 0.0), (0.046, 0.023, 0.05)),
    Ellipsoid(0.1, (0.0, -0.605, 0.0), (0.023, 0.023, 0.02)),
    Ellipsoid(0.1, (0.06, -0.605, 0.0), (0.023, 0.046, 0.02)),
)

# indices of table entries that break x -> -x symmetry
SHEPP_LOGAN_ASYMMETRIC = (2, 3, 7, 9)


def _voxel_grid(dims, spacing):
    axes = [((np.arange(d) + 0.5) - d / 2.0) * s for d, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _block_average(data: np.ndarray, up: int) -> np.ndarray:
    d0, d1, d2 = (s // up for s in data.shape)
    return data.reshape(d0, up, d1, up, d2, up).mean(axis=(1, 3, 5))


def voxelize_ellipsoids(
    ellipsoids,
    dims,
    spacing,
    density_scale: float = DENSITY_SCALE,
    supersample: int = 1,
) -> VoxelVolume:
    """Sum ellipsoid densities on the voxel grid. Ellipsoid coordinates
    are normalized by the half-extent of the grid.

    ``supersample=1`` samples cell centers (a hard staircase);
    ``supersample=k`` averages k^3 subcells per voxel, the
    partial-volume reading that matches what a physical scan of the
    analytic object would measure."""
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=np.float64)
    if supersample > 1:
        fine = voxelize_ellipsoids(
            ellipsoids,
            tuple(d * supersample for d in dims),
            spacing / supersample,
            density_scale,
        )
        return VoxelVolume(
            dims, spacing, _block_average(fine.data, supersample).astype(np.float32)
        )
    half = np.asarray(dims) * spacing / 2.0
    gx, gy, gz = _voxel_grid(dims, spacing)
    acc = np.zeros(dims, dtype=np.float64)
    for e in ellipsoids:
        cx, cy, cz = (np.asarray(e.center) * half).tolist()
        ax, ay, az = (np.asarray(e.semi_axes) * half).tolist()
        phi = np.deg2rad(e.phi_deg)
        dx, dy, dz = gx - cx, gy - cy, gz - cz
        # rotate the offset into the ellipsoid frame (about z)
        rx = np.cos(phi) * dx + np.sin(phi) * dy
        ry = -np.sin(phi) * dx + np.cos(phi) * dy
        inside = (rx / ax) ** 2 + (ry / ay) ** 2 + (dz / az) ** 2 <= 1.0
        acc += e.density * inside
    acc = np.maximum(acc, 0.0) * density_scale
    return VoxelVolume(dims, spacing, acc.astype(np.float32))


def _nested_boxes(dims, spacing, supersample: int = 1) -> VoxelVolume:
    if supersample > 1:
        fine = _nested_boxes(
            tuple(d * supersample for d in dims),
            np.asarray(spacing, dtype=np.float64) / supersample,
        )
        return VoxelVolume(
            dims, np.asarray(spacing, dtype=np.float64),
            _block_average(fine.data, supersample).astype(np.float32),
        )
    gx, gy, gz = _voxel_grid(dims, spacing)
    half = np.asarray(dims) * spacing / 2.0
    acc = np.zeros(dims, dtype=np.float64)
    for fraction, density in ((0.85, 0.03), (0.55, 0.03), (0.25, 0.04)):
        inside = (
            (np.abs(gx) <= fraction * half[0])
            & (np.abs(gy) <= fraction * half[1])
            & (np.abs(gz) <= fraction * half[2])
        )
        acc += density * inside
    return VoxelVolume(dims, np.asarray(spacing, dtype=np.float64), acc.astype(np.float32))


def _rods(dims, spacing, supersample: int = 1) -> VoxelVolume:
    if supersample > 1:
        fine = _rods(
            tuple(d * supersample for d in dims),
            np.asarray(spacing, dtype=np.float64) / supersample,
        )
        return VoxelVolume(
            dims, np.asarray(spacing, dtype=np.float64),
            _block_average(fine.data, supersample).astype(np.float32),
        )
    gx, gy, gz = _voxel_grid(dims, spacing)
    half = np.asarray(dims) * spacing / 2.0
    acc = np.zeros(dims, dtype=np.float64)
    # three parallel rods along z at distinct offsets, plus one crossbar
    rods = (
        ((-0.45, -0.3), 0.12, 0.03),
        ((0.0, 0.35), 0.18, 0.05),
        ((0.45, -0.3), 0.1, 0.07),
    )
    for (ox, oy), radius, density in rods:
        r2 = ((gx - ox * half[0]) / (radius * half[0])) ** 2 + (
            (gy - oy * half[1]) / (radius * half[1])
        ) ** 2
        inside = (r2 <= 1.0) & (np.abs(gz) <= 0.7 * half[2])
        acc += density * inside
    crossbar = (
        (((gy + 0.0) / (0.1 * half[1])) ** 2 + ((gz - 0.6 * half[2]) / (0.1 * half[2])) ** 2
         <= 1.0)
        & (np.abs(gx) <= 0.6 * half[0])
    )
    acc += 0.04 * crossbar
    return VoxelVolume(dims, np.asarray(spacing, dtype=np.float64), acc.astype(np.float32))


def make_phantom(kind: str, dims, spacing, supersample: int = 2) -> VoxelVolume:
    """Deterministic analytic phantom on a voxel grid.

    The default supersampling gives partial-volume boundary voxels (the
    value a real scan would measure); pass ``supersample=1`` for plain
    cell-center membership.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 16 for d in dims):
        raise ContractError(f"phantom dims must be >= 16 per axis, got {dims}")
    if kind == "shepp-logan-3d":
        return voxelize_ellipsoids(SHEPP_LOGAN_3D, dims, spacing, supersample=supersample)
    if kind == "nested-boxes":
        return _nested_boxes(dims, spacing, supersample=supersample)
    if kind == "rods":
        return _rods(dims, spacing, supersample=supersample)
    raise ConfigError(f"unknown phantom kind {kind!r}")


def ellipsoid_volume(semi_axes_mm) -> float:
    """Analytic volume of an ellipsoid, mm^3."""
    a, b, c = semi_axes_mm
    return 4.0 / 3.0 * np.pi * a * b * c


def trilinear(vol: VoxelVolume, point) -> float:
    """Interpolate the radiodensity at one world position (mm).

    Positions up to half a voxel outside the grid clamp to the border;
    farther out is a contract error.
    """
    point = np.asarray(point, dtype=np.float64)
    half = vol.extent / 2.0
    if np.any(np.abs(point) > half + 0.5 * vol.spacing):
        raise ContractError(f"point {point} is outside the volume extent")
    return float(trilinear_batch(vol, point[None])[0])


def trilinear_batch(vol: VoxelVolume, points: np.ndarray) -> np.ndarray:
    """Vectorized trilinear interpolation; clamps to the border."""
    dims = np.asarray(vol.dims)
    # continuous voxel-center coordinates
    u = points / vol.spacing + dims / 2.0 - 0.5
    u = np.clip(u, 0.0, dims - 1)
    i0 = np.minimum(u.astype(np.int64), dims - 2)
    frac = (u - i0).astype(vol.data.dtype)
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    d = vol.data
    c000 = d[x0, y0, z0]
    c100 = d[x0 + 1, y0, z0]
    c010 = d[x0, y0 + 1, z0]
    c110 = d[x0 + 1, y0 + 1, z0]
    c001 = d[x0, y0, z0 + 1]
    c101 = d[x0 + 1, y0, z0 + 1]
    c011 = d[x0, y0 + 1, z0 + 1]
    c111 = d[x0 + 1, y0 + 1, z0 + 1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def project(
    vol: VoxelVolume,
    geom: ScanGeometry,
    n_steps: int = 512,
    i0: float = 1.0,
    chunk_pixels: int = 4096,
) -> ProjectionSet:
    """Exponential-attenuation forward projection of a voxel volume.

    Pixels whose rays miss the volume box read the unattenuated
    intensity ``i0`` exactly.
    """
    if not np.allclose(vol.extent, geom.volume_extent):
        raise ContractError(
            f"volume extent {vol.extent} != geometry extent {geom.volume_extent}"
        )
    h, w = geom.det_rows, geom.det_cols
    rows, cols = np.divmod(np.arange(h * w), w)
    images = np.empty((geom.n_views, h, w), dtype=np.float32)
    for view in range(geom.n_views):
        out = np.full(h * w, i0, dtype=np.float64)
        views = np.full(h * w, view)
        for lo in range(0, h * w, chunk_pixels):
            sel = slice(lo, min(lo + chunk_pixels, h * w))
            bundle = rays_for_pixels(geom, views[sel], rows[sel], cols[sel])
            hit = bundle.hit
            if not hit.any():
                continue
            t_near = bundle.t_near[hit]
            t_far = bundle.t_far[hit]
            width = (t_far - t_near) / n_steps
            t = t_near[:, None] + (np.arange(n_steps) + 0.5) * width[:, None]
            pts = (
                bundle.origins[hit][:, None, :]
                + t[:, :, None] * bundle.directions[hit][:, None, :]
            )
            rho = trilinear_batch(vol, pts.reshape(-1, 3)).reshape(t.shape)
            absorption = (rho.astype(np.float64) * width[:, None]).sum(axis=1)
            hit_idx = np.flatnonzero(hit) + lo
            out[hit_idx] = i0 * np.exp(-absorption)
        images[view] = out.reshape(h, w).astype(np.float32)
    return ProjectionSet(images=images, angles=geom.angles.copy(), i0=i0)


def add_noise(
    proj: ProjectionSet, fraction: float, rng: np.random.Generator
) -> ProjectionSet:
    """Multiplicative Gaussian noise: I' = I * (1 + fraction * eps),
    clamped into (0, i0]. fraction 0 returns the input bit-identically."""
    if fraction < 0:
        raise ContractError("noise fraction must be >= 0")
    if fraction == 0:
        return proj
    eps = rng.standard_normal(proj.images.shape)
    noisy = proj.images * (1.0 + fraction * eps)
    noisy = np.clip(noisy, 1e-8, proj.i0).astype(np.float32)
    return ProjectionSet(
        images=noisy,
        angles=proj.angles,
        i0=proj.i0,
        noise_fraction=fraction,
        seed=proj.seed,
    )
