"""Sampler tests: mask thresholds, window enumeration against brute
force, batch composition invariants, fallbacks, and the naive baseline."""

import numpy as np
import pytest

from xfield.errors import ContractError, NoForegroundError
from xfield.geometry import uniform_half_turn
from xfield.phantoms import ProjectionSet
from xfield.sampling import (
    PATCH,
    PIXEL,
    MlgSampler,
    build_mask,
    foreground_windows,
    naive_sample,
    sample_batch,
    window_debug_image,
)


def disk_projection(h=32, w=32, centers=((16, 16, 10),), depth=2.0):
    """Synthetic view: exponential shadow of one or more disks."""
    img = np.ones((h, w), dtype=np.float32)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for r0, c0, radius in centers:
        inside = (rr - r0) ** 2 + (cc - c0) ** 2 <= radius**2
        img[inside] = np.exp(-depth)
    return img


def projection_set(images):
    images = np.stack(images)
    return ProjectionSet(
        images=images.astype(np.float32),
        angles=uniform_half_turn(images.shape[0]),
    )


class TestBuildMask:
    def test_unattenuated_view_has_no_foreground(self):
        with pytest.raises(NoForegroundError):
            build_mask(np.ones((8, 8), dtype=np.float32))

    def test_disk_mask_matches_per_pixel_oracle(self):
        img = disk_projection()
        mask = build_mask(img, tau=0.05)
        absorption = -np.log(img)
        want = absorption > 0.05 * absorption.max()
        np.testing.assert_array_equal(mask.bits, want)

    def test_tau_zero_marks_any_attenuation(self):
        img = disk_projection(depth=0.001)
        img[0, 0] = np.float32(1.0 - 1e-4)  # barely attenuated pixel
        mask = build_mask(img, tau=0.0)
        want = img < 1.0
        np.testing.assert_array_equal(mask.bits, want)

    def test_invalid_intensities_rejected(self):
        with pytest.raises(ContractError):
            build_mask(np.full((4, 4), 1.5, dtype=np.float32))


class TestForegroundWindows:
    def test_all_true_mask_counts(self):
        mask = build_mask(np.full((8, 8), 0.5, dtype=np.float32))
        ws = foreground_windows(mask, 4)
        assert len(ws.origins) == 4
        assert ws.fully_foreground.all()

    def test_single_false_bit_unflags_exactly_one_window(self):
        img = np.full((8, 8), 0.5, dtype=np.float32)
        img[5, 2] = 1.0  # clears mask bit in window (4, 0)
        ws = foreground_windows(build_mask(img), 4)
        flags = dict(zip(map(tuple, ws.origins), ws.fully_foreground))
        assert not flags[(4, 0)]
        assert sum(ws.fully_foreground) == 3

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            bits = rng.random((16, 16)) < 0.7
            bits[0, 0] = True  # keep at least one foreground pixel
            img = np.where(bits, 0.5, 1.0).astype(np.float32)
            mask = build_mask(img, tau=0.5)
            np.testing.assert_array_equal(mask.bits, bits)
            for s in (2, 4, 8):
                ws = foreground_windows(mask, s)
                got = set(map(tuple, ws.foreground_origins))
                want = set()
                for r in range(0, 16, s):
                    for c in range(0, 16, s):
                        if bits[r : r + s, c : c + s].all():
                            want.add((r, c))
                assert got == want

    def test_border_strip_excluded_when_size_does_not_divide(self):
        mask = build_mask(np.full((10, 10), 0.5, dtype=np.float32))
        ws = foreground_windows(mask, 4)
        assert len(ws.origins) == 4  # 2x2 grid; rows/cols 8..9 unused
        assert ws.origins.max() == 4


class TestMlgSampler:
    def make_sampler(self, size=4):
        views = [
            disk_projection(centers=((16, 16, 12),)),
            disk_projection(centers=((10, 20, 9), (22, 10, 6))),
            disk_projection(centers=((16, 12, 11),)),
        ]
        return MlgSampler(projection_set(views), size)

    def test_counts_and_split(self):
        sampler = self.make_sampler(size=4)
        batch = sampler.sample(n_patch_rays=64, n_pixel_rays=32, rng=np.random.default_rng(0))
        assert len(batch) == 96
        assert (batch.provenance == PATCH).sum() == 64
        assert (batch.provenance == PIXEL).sum() == 32
        assert batch.patch_shortfall == 0 and not batch.with_replacement

    def test_reference_batch_arithmetic(self):
        # 1024 patch rays with 4x4 windows means 64 windows drawn
        sampler = self.make_sampler(size=4)
        assert len(sampler.windows) >= 64 // len(sampler.masks)
        rng = np.random.default_rng(1)
        if len(sampler.windows) >= 64:
            batch = sampler.sample(1024, 1024, rng)
            assert (batch.provenance == PATCH).sum() == 64 * 16
            assert len(batch) == 2048

    def test_every_ray_is_foreground_and_unique(self):
        sampler = self.make_sampler()
        rng = np.random.default_rng(2)
        for _ in range(20):
            batch = sampler.sample(48, 40, rng)
            fg = sampler.fg[batch.views, batch.rows, batch.cols]
            assert fg.all()
            flat = batch.views * 32 * 32 + batch.rows * 32 + batch.cols
            assert len(np.unique(flat)) == len(batch)

    def test_patch_rays_tile_chosen_windows_exactly(self):
        # set-equality with a brute-force expansion of the chosen windows
        sampler = self.make_sampler(size=4)
        rng = np.random.default_rng(3)
        batch = sampler.sample(80, 16, rng)
        patch = batch.provenance == PATCH
        got = set(zip(batch.views[patch], batch.rows[patch], batch.cols[patch]))
        # reconstruct windows from the patch pixels' top-left corners
        origins = set(
            (v, r - r % 4, c - c % 4)
            for v, r, c in zip(batch.views[patch], batch.rows[patch], batch.cols[patch])
        )
        assert len(origins) == 5
        want = set()
        for v, r0, c0 in origins:
            for dr in range(4):
                for dc in range(4):
                    want.add((v, r0 + dr, c0 + dc))
        assert got == want
        # zero overlap with pixel-level picks
        pix = set(zip(batch.views[~patch], batch.rows[~patch], batch.cols[~patch]))
        assert not (got & pix)

    def test_deterministic_under_seed(self):
        sampler = self.make_sampler()
        a = sampler.sample(32, 32, np.random.default_rng(42))
        b = sampler.sample(32, 32, np.random.default_rng(42))
        np.testing.assert_array_equal(a.views, b.views)
        np.testing.assert_array_equal(a.rows, b.rows)
        np.testing.assert_array_equal(a.cols, b.cols)

    def test_window_shortfall_moves_rays_to_pixels(self):
        # tiny disk: few fully-foreground windows
        proj = projection_set([disk_projection(centers=((16, 16, 5),))])
        sampler = MlgSampler(proj, 4)
        available = len(sampler.windows)
        rng = np.random.default_rng(4)
        want_windows = available + 3
        batch = sampler.sample(want_windows * 16, 8, rng)
        assert batch.patch_shortfall == 3 * 16
        assert (batch.provenance == PATCH).sum() == available * 16
        assert (batch.provenance == PIXEL).sum() == 8 + 3 * 16
        assert len(batch) == want_windows * 16 + 8

    def test_pixel_pool_exhaustion_samples_with_replacement(self):
        proj = projection_set([disk_projection(centers=((16, 16, 4),))])
        sampler = MlgSampler(proj, 2)
        n_fg = int(sampler.fg.sum())
        batch = sampler.sample(0, n_fg + 50, np.random.default_rng(5))
        assert batch.with_replacement
        assert len(batch) == n_fg + 50
        assert sampler.fg[batch.views, batch.rows, batch.cols].all()

    def test_patch_quota_must_tile_windows(self):
        sampler = self.make_sampler(size=4)
        with pytest.raises(ContractError):
            sampler.sample(30, 8, np.random.default_rng(6))

    def test_one_shot_wrapper(self):
        proj = projection_set([disk_projection()])
        batch = sample_batch(proj, 4, 32, 16, np.random.default_rng(7))
        assert len(batch) == 48


class TestNaiveSampler:
    def test_exhaustive_draw_hits_every_pixel(self):
        proj = projection_set([disk_projection(h=8, w=8)])
        batch = naive_sample(proj, 64, np.random.default_rng(0))
        flat = sorted(batch.rows * 8 + batch.cols)
        assert flat == list(range(64))

    def test_seeded_reproducibility(self):
        proj = projection_set([disk_projection()])
        a = naive_sample(proj, 100, np.random.default_rng(3))
        b = naive_sample(proj, 100, np.random.default_rng(3))
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_background_fraction_matches_area(self):
        # Monte-Carlo: background hit rate ~ background area fraction
        img = disk_projection(h=32, w=32, centers=((16, 16, 10),))
        proj = projection_set([img])
        background = img >= 1.0
        p_bg = background.mean()
        rng = np.random.default_rng(4)
        n, draws = 64, 300
        hits = 0
        for _ in range(draws):
            batch = naive_sample(proj, n, rng)
            hits += background[batch.rows, batch.cols].sum()
        total = n * draws
        se = np.sqrt(total * p_bg * (1 - p_bg))
        assert abs(hits - total * p_bg) < 3 * se + 1e-9

    def test_overdraw_rejected(self):
        proj = projection_set([disk_projection(h=8, w=8)])
        with pytest.raises(ContractError):
            naive_sample(proj, 65, np.random.default_rng(0))


class TestDebugImage:
    def test_levels_present(self):
        img = disk_projection()
        mask = build_mask(img)
        ws = foreground_windows(mask, 4)
        chosen = ws.foreground_origins[:2]
        debug = window_debug_image(mask, ws, chosen)
        assert set(np.unique(debug)) <= {0, 96, 160, 255}
        assert (debug == 255).sum() == 2 * 16
