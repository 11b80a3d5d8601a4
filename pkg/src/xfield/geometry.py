"""Circular cone-beam scanner model.

A point source orbits the origin in the z=0 plane at radius ``dso``;
a flat detector (H x W square pixels, perpendicular to the
source-to-center axis) sits opposite at distance ``dsd`` from the
source. Rays go from the source through physical pixel centers and are
clipped to the axis-aligned reconstruction box centered at the origin.
All world units are millimeters; the field consumes positions
normalized to the unit cube by the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ScanGeometry:
    """Scanner description; immutable and validated on construction."""

    dso: float  # source to rotation center, mm
    dsd: float  # source to detector, mm
    det_rows: int
    det_cols: int
    pixel_pitch: float  # mm per detector pixel, both axes
    angles: np.ndarray  # gantry angles, radians, strictly increasing in [0, pi)
    volume_extent: np.ndarray  # full box edge lengths (3,), mm, centered at origin

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64))
        object.__setattr__(
            self, "volume_extent", np.asarray(self.volume_extent, dtype=np.float64)
        )
        if self.angles.ndim != 1 or self.angles.size == 0:
            raise ContractError("angles must be a non-empty 1-D array")
        if np.any(np.diff(self.angles) <= 0):
            raise ContractError("angles must be strictly increasing")
        if self.angles[0] < 0 or self.angles[-1] >= np.pi:
            raise ContractError("angles must lie in [0, pi)")
        half_diagonal = 0.5 * float(np.linalg.norm(self.volume_extent))
        if not (self.dsd > self.dso > half_diagonal):
            raise ContractError(
                f"need dsd > dso > half volume diagonal "
                f"({self.dsd} > {self.dso} > {half_diagonal:.2f} fails)"
            )

    @property
    def n_views(self) -> int:
        return self.angles.size

    @property
    def box_min(self) -> np.ndarray:
        return -0.5 * self.volume_extent

    @property
    def box_max(self) -> np.ndarray:
        return 0.5 * self.volume_extent


def uniform_half_turn(n_views: int, offset: float = 0.0) -> np.ndarray:
    """``n_views`` angles uniformly spaced over [0, pi), shifted by
    ``offset`` fractions of a step (0.5 gives the interleaved set used
    for held-out views)."""
    step = np.pi / n_views
    return (np.arange(n_views) + offset) * step


@dataclass(frozen=True)
class Ray:
    """One ray through a detector pixel, clipped to the volume box."""

    origin: np.ndarray  # (3,) mm
    direction: np.ndarray  # (3,) unit
    t_near: float
    t_far: float
    pixel: tuple  # (view, row, col)
    i_gt: float | None = None


@dataclass(frozen=True)
class RayBundle:
    """Vectorized rays for a batch of pixels. ``hit`` is False where the
    ray misses the volume box (there t_near == t_far == 0)."""

    origins: np.ndarray  # (B, 3)
    directions: np.ndarray  # (B, 3)
    t_near: np.ndarray  # (B,)
    t_far: np.ndarray  # (B,)
    hit: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass(frozen=True)
class PointBatch:
    """Sample points along rays with their quadrature spacing.

    ``positions`` is (..., n, 3) in mm, ``delta`` the per-ray constant
    bin width (..., n), and ``normalized`` the positions mapped into
    the unit cube by the volume box.
    """

    positions: np.ndarray
    delta: np.ndarray
    normalized: np.ndarray


def source_position(geom: ScanGeometry, view: int) -> np.ndarray:
    a = geom.angles[view]
    return geom.dso * np.array([np.cos(a), np.sin(a), 0.0])


def detector_frame(geom: ScanGeometry, view: int):
    """Detector center plus in-plane unit axes (u along columns,
    v along rows / world z)."""
    a = geom.angles[view]
    radial = np.array([np.cos(a), np.sin(a), 0.0])
    center = (geom.dso - geom.dsd) * radial
    u_axis = np.array([-np.sin(a), np.cos(a), 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    return center, u_axis, v_axis


def clip_to_box(origin, direction, box_min, box_max):
    """Slab intersection of a unit-direction ray with an axis-aligned
    box. Returns (t_near, t_far) with t_near >= 0, or None on miss."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ContractError("clip_to_box requires a unit direction")
    t_near, t_far = _clip_batch(
        origin[None], direction[None], np.asarray(box_min), np.asarray(box_max)
    )
    if not np.isfinite(t_near[0]):
        return None
    return float(t_near[0]), float(t_far[0])


def _clip_batch(origins, directions, box_min, box_max):
    """Vectorized slab clipping. Misses yield NaN bounds."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (box_min[None] - origins) * inv
        t1 = (box_max[None] - origins) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    parallel = directions == 0.0
    inside = (origins >= box_min[None]) & (origins <= box_max[None])
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    t_near = np.maximum(t_near, 0.0)
    miss = ~(t_near < t_far)
    t_near = np.where(miss, np.nan, t_near)
    t_far = np.where(miss, np.nan, t_far)
    return t_near, t_far


def ray_for_pixel(geom: ScanGeometry, view: int, row: int, col: int) -> Ray | None:
    """Ray from the rotated source through the physical center of a
    detector pixel; None if it misses the volume box."""
    if not (0 <= view < geom.n_views):
        raise ContractError(f"view {view} out of range")
    if not (0 <= row < geom.det_rows and 0 <= col < geom.det_cols):
        raise ContractError(f"pixel ({row}, {col}) out of range")
    bundle = rays_for_pixels(
        geom, np.array([view]), np.array([row]), np.array([col])
    )
    if not bundle.hit[0]:
        return None
    return Ray(
        origin=bundle.origins[0],
        direction=bundle.directions[0],
        t_near=float(bundle.t_near[0]),
        t_far=float(bundle.t_far[0]),
        pixel=(view, row, col),
    )


def rays_for_pixels(geom: ScanGeometry, views, rows, cols) -> RayBundle:
    """Vectorized ``ray_for_pixel`` over parallel index arrays."""
    views = np.asarray(views)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    a = geom.angles[views]
    cos_a, sin_a = np.cos(a), np.sin(a)
    radial = np.stack([cos_a, sin_a, np.zeros_like(a)], axis=1)
    u_axis = np.stack([-sin_a, cos_a, np.zeros_like(a)], axis=1)
    v_axis = np.array([0.0, 0.0, 1.0])

    sources = geom.dso * radial
    centers = (geom.dso - geom.dsd) * radial
    u = (cols - (geom.det_cols - 1) / 2.0) * geom.pixel_pitch
    v = (rows - (geom.det_rows - 1) / 2.0) * geom.pixel_pitch
    pixels = centers + u[:, None] * u_axis + v[:, None] * v_axis

    directions = pixels - sources
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    t_near, t_far = _clip_batch(sources, directions, geom.box_min, geom.box_max)
    hit = np.isfinite(t_near)
    return RayBundle(
        origins=sources,
        directions=directions,
        t_near=np.where(hit, t_near, 0.0),
        t_far=np.where(hit, t_far, 0.0),
        hit=hit,
    )


def project_point(geom: ScanGeometry, view: int, point) -> tuple[float, float]:
    """Fractional (row, col) detector coordinates of a world point seen
    from ``view``; the inverse of ray_for_pixel up to pixel quantization."""
    point = np.asarray(point, dtype=np.float64)
    source = source_position(geom, view)
    center, u_axis, v_axis = detector_frame(geom, view)
    axis = (center - source) / geom.dsd
    rel = point - source
    depth = rel @ axis
    if depth <= 0:
        raise ContractError("point is behind the source")
    foot = source + rel * (geom.dsd / depth)
    offset = foot - center
    col = offset @ u_axis / geom.pixel_pitch + (geom.det_cols - 1) / 2.0
    row = offset @ v_axis / geom.pixel_pitch + (geom.det_rows - 1) / 2.0
    return float(row), float(col)


def sample_points(
    ray: Ray,
    n: int,
    mode: str = "uniform",
    rng: np.random.Generator | None = None,
    extent: np.ndarray | None = None,
) -> PointBatch:
    """Split [t_near, t_far] into ``n`` equal bins and place one point
    per bin: at the center (uniform) or uniformly within it
    (stratified). All bins share the same width, so the spacing used by
    the renderer's quadrature is exact."""
    bundle = RayBundle(
        origins=ray.origin[None],
        directions=ray.direction[None],
        t_near=np.array([ray.t_near]),
        t_far=np.array([ray.t_far]),
        hit=np.array([True]),
    )
    batch = sample_points_batch(bundle, n, mode=mode, rng=rng, extent=extent)
    return PointBatch(
        positions=batch.positions[0],
        delta=batch.delta[0],
        normalized=None if batch.normalized is None else batch.normalized[0],
    )


def sample_points_batch(
    bundle: RayBundle,
    n: int,
    mode: str = "uniform",
    rng: np.random.Generator | None = None,
    extent: np.ndarray | None = None,
    dtype=np.float32,
) -> PointBatch:
    if n < 2:
        raise ContractError("need at least 2 points per ray")
    if mode not in ("uniform", "stratified"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    b = len(bundle)
    width = (bundle.t_far - bundle.t_near) / n  # (B,)
    if mode == "uniform":
        offsets = np.broadcast_to(np.arange(n) + 0.5, (b, n))
    else:
        if rng is None:
            raise ContractError("stratified sampling needs an rng")
        offsets = np.arange(n) + rng.random((b, n))
    t = bundle.t_near[:, None] + offsets * width[:, None]  # (B, n)
    positions = bundle.origins[:, None, :] + t[:, :, None] * bundle.directions[:, None, :]
    delta = np.broadcast_to(width[:, None], (b, n))
    if extent is None:
        normalized = None
    else:
        extent = np.asarray(extent, dtype=np.float64)
        normalized = np.clip(positions / extent + 0.5, 0.0, 1.0)
        normalized = normalized.astype(dtype)
    return PointBatch(
        positions=positions.astype(dtype),
        delta=delta.astype(dtype),
        normalized=normalized,
    )
