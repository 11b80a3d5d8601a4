"""Masked local-global ray sampling over projection stacks.

Foreground masks are built in the absorption domain (-log intensity),
where unattenuated background is exactly zero, then thresholded at a
fraction of the per-view maximum. Batches combine patch-level draws
(whole windows fully inside the foreground) with pixel-level draws
(scattered foreground pixels outside the chosen windows), so every
training ray intersects the imaged object and no pixel repeats. The
naive whole-image sampler used as an ablation baseline lives here too.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NoForegroundError
from .phantoms import ProjectionSet

log = logging.getLogger(__name__)

PATCH = 0  # provenance codes
PIXEL = 1
PROVENANCE_NAMES = {PATCH: "patch", PIXEL: "pixel"}


@dataclass(frozen=True)
class ForegroundMask:
    bits: np.ndarray  # (H, W) bool
    threshold: float  # absorption threshold actually applied
    view_index: int


@dataclass(frozen=True)
class WindowSet:
    """All non-overlapping windows on the stride grid of one mask, each
    flagged fully-foreground or not. Border strips that do not fit a
    whole window are not represented (pixel sampling still sees them)."""

    size: int
    origins: np.ndarray  # (n_windows, 2) top-left (row, col)
    fully_foreground: np.ndarray  # (n_windows,) bool

    @property
    def foreground_origins(self) -> np.ndarray:
        return self.origins[self.fully_foreground]


@dataclass(frozen=True)
class PixelBatch:
    """A sampled ray batch, stored as parallel pixel arrays.

    ``provenance`` marks each entry PATCH or PIXEL. ``patch_shortfall``
    counts patch rays that were diverted to pixel sampling because too
    few fully-foreground windows existed; ``with_replacement`` flags the
    last-resort pixel fallback (both are zero/False in normal runs, and
    the no-duplicates guarantee holds exactly then).
    """

    views: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    i_gt: np.ndarray
    provenance: np.ndarray
    window_size: int
    patch_shortfall: int = 0
    with_replacement: bool = False

    def __len__(self) -> int:
        return self.views.size


def build_mask(
    image: np.ndarray, i0: float = 1.0, tau: float = 0.05, view_index: int = 0
) -> ForegroundMask:
    """Binarize one projection into foreground (attenuated) pixels.

    The threshold is ``tau`` times the view's maximum absorption, so
    zero-absorption background never qualifies; a view with no
    attenuation at all has no foreground to sample and is an error.
    """
    image = np.asarray(image)
    if image.min() <= 0 or image.max() > i0 * (1 + 1e-6):
        raise ContractError("projection intensities must lie in (0, i0]")
    absorption = -np.log(image / i0)
    peak = float(absorption.max())
    if peak <= 0.0:
        raise NoForegroundError(
            f"view {view_index}: no attenuated pixels (all intensities at i0)"
        )
    threshold = tau * peak
    return ForegroundMask(
        bits=absorption > threshold, threshold=threshold, view_index=view_index
    )


def foreground_windows(mask: ForegroundMask, size: int) -> WindowSet:
    """Enumerate windows on the size-stride grid and flag the fully
    foreground ones."""
    if size < 1:
        raise ContractError("window size must be positive")
    h, w = mask.bits.shape
    n_r, n_c = h // size, w // size
    if n_r == 0 or n_c == 0:
        return WindowSet(size, np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=bool))
    trimmed = mask.bits[: n_r * size, : n_c * size]
    blocks = trimmed.reshape(n_r, size, n_c, size)
    full = blocks.all(axis=(1, 3)).reshape(-1)
    rr, cc = np.meshgrid(np.arange(n_r) * size, np.arange(n_c) * size, indexing="ij")
    origins = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)
    return WindowSet(size, origins, full)


class MlgSampler:
    """Precomputes foreground structure once, then draws batches.

    Window and pixel draws pool across all training views, matching a
    single global ray batch per iteration.
    """

    def __init__(self, projections: ProjectionSet, size: int, tau: float = 0.05):
        self.projections = projections
        self.size = size
        v, h, w = projections.images.shape
        self.masks = [
            build_mask(projections.images[i], projections.i0, tau, i) for i in range(v)
        ]
        self.window_sets = [foreground_windows(m, size) for m in self.masks]
        candidates = []
        for i, ws in enumerate(self.window_sets):
            fg = ws.foreground_origins
            if fg.size:
                candidates.append(
                    np.concatenate([np.full((len(fg), 1), i), fg], axis=1)
                )
        self.windows = (
            np.concatenate(candidates, axis=0)
            if candidates
            else np.zeros((0, 3), dtype=np.int64)
        )
        self.fg = np.stack([m.bits for m in self.masks])  # (V, H, W)
        self.fg_flat = np.flatnonzero(self.fg.reshape(-1))
        offs = np.arange(size)
        self._offset_rows = np.repeat(offs, size)
        self._offset_cols = np.tile(offs, size)
        self._shape = (v, h, w)

    def sample(
        self, n_patch_rays: int, n_pixel_rays: int, rng: np.random.Generator
    ) -> PixelBatch:
        s2 = self.size * self.size
        if n_patch_rays % s2:
            raise ContractError(
                f"patch ray count {n_patch_rays} not divisible by window area {s2}"
            )
        v, h, w = self._shape
        want_windows = n_patch_rays // s2
        available = len(self.windows)
        n_windows = min(want_windows, available)
        shortfall = (want_windows - n_windows) * s2
        if shortfall:
            log.warning(
                "only %d fully-foreground windows for %d requested; moving "
                "%d rays to pixel sampling",
                available,
                want_windows,
                shortfall,
            )
        if n_windows:
            chosen = self.windows[rng.choice(available, n_windows, replace=False)]
        else:
            chosen = np.zeros((0, 3), dtype=np.int64)

        patch_views = np.repeat(chosen[:, 0], s2)
        patch_rows = np.repeat(chosen[:, 1], s2) + np.tile(self._offset_rows, n_windows)
        patch_cols = np.repeat(chosen[:, 2], s2) + np.tile(self._offset_cols, n_windows)

        excluded = np.zeros(self._shape, dtype=bool)
        if n_windows:
            excluded[patch_views, patch_rows, patch_cols] = True
        pool = self.fg_flat[~excluded.reshape(-1)[self.fg_flat]]

        n_pixels = n_pixel_rays + shortfall
        replaced = False
        if len(pool) >= n_pixels:
            picks = rng.choice(len(pool), n_pixels, replace=False)
            flat = pool[picks]
        else:
            replaced = True
            log.warning(
                "pixel pool has %d candidates for %d requested; sampling "
                "with replacement",
                len(pool),
                n_pixels,
            )
            source = pool if len(pool) else self.fg_flat
            flat = source[rng.integers(0, len(source), n_pixels)]
        pix_views, rest = np.divmod(flat, h * w)
        pix_rows, pix_cols = np.divmod(rest, w)

        views = np.concatenate([patch_views, pix_views])
        rows = np.concatenate([patch_rows, pix_rows])
        cols = np.concatenate([patch_cols, pix_cols])
        provenance = np.concatenate(
            [np.full(len(patch_views), PATCH, dtype=np.uint8),
             np.full(len(pix_views), PIXEL, dtype=np.uint8)]
        )
        return PixelBatch(
            views=views,
            rows=rows,
            cols=cols,
            i_gt=self.projections.images[views, rows, cols].astype(np.float32),
            provenance=provenance,
            window_size=self.size,
            patch_shortfall=shortfall,
            with_replacement=replaced,
        )


def sample_batch(
    projections: ProjectionSet,
    size: int,
    n_patch_rays: int,
    n_pixel_rays: int,
    rng: np.random.Generator,
    tau: float = 0.05,
) -> PixelBatch:
    """One-shot batch draw (builds the sampler structures each call;
    training loops should hold an ``MlgSampler``)."""
    return MlgSampler(projections, size, tau).sample(n_patch_rays, n_pixel_rays, rng)


def naive_sample(
    projections: ProjectionSet, n_rays: int, rng: np.random.Generator
) -> PixelBatch:
    """Baseline: uniform over every pixel of every view, background
    included, without replacement."""
    v, h, w = projections.images.shape
    total = v * h * w
    if n_rays > total:
        raise ContractError(f"{n_rays} rays requested from {total} pixels")
    flat = rng.choice(total, n_rays, replace=False)
    views, rest = np.divmod(flat, h * w)
    rows, cols = np.divmod(rest, w)
    return PixelBatch(
        views=views,
        rows=rows,
        cols=cols,
        i_gt=projections.images[views, rows, cols].astype(np.float32),
        provenance=np.full(n_rays, PIXEL, dtype=np.uint8),
        window_size=0,
    )


def window_debug_image(
    mask: ForegroundMask, window_set: WindowSet, chosen_origins: np.ndarray
) -> np.ndarray:
    """Grayscale debug view: background 0, foreground 96, candidate
    windows 160, chosen windows 255. Written as PGM by the trainer."""
    img = np.where(mask.bits, 96, 0).astype(np.uint8)
    s = window_set.size
    for r, c in window_set.foreground_origins:
        img[r : r + s, c : c + s] = 160
    for r, c in chosen_origins:
        img[r : r + s, c : c + s] = 255
    return img
