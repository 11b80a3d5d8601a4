"""Acceptance criteria, one test per criterion.

Each test prints a single PASS line with the numbers it measured.
Criteria 6-8 train real models on the desk-scale scene (64^3 phantom,
64x64 detector, 25 views over a half turn, 3% noise) and together take
roughly an hour on one core; run this module alone with
``pytest tests/test_acceptance.py -v`` when iterating elsewhere.
"""

import json
import time

import numpy as np
import pytest

from xfield.bench import bench_attention, scaling_exponents
from xfield.cli import main as cli_main
from xfield.config import (
    build_field_config,
    build_geometry,
    build_train_config,
    resolve_config,
)
from xfield.evaluator import eval_ct, eval_nvs, extract_ct
from xfield.gradcheck import full_pipeline_exhaustive, full_suite
from xfield.lineformer import (
    LineformerConfig,
    count_macs,
    flops,
    g_msa,
    init_attention,
    ls_msa,
)
from xfield.phantoms import add_noise, make_phantom, project
from xfield.renderer import render
from xfield.sampling import MlgSampler, build_mask, foreground_windows
from xfield.tensor import Tensor
from xfield.trainer import load_checkpoint, train

# ---------------------------------------------------------------------------
# pinned desk-scale acceptance configuration (frozen after the first
# converged run, per the calibration notes in the repo history)
# ---------------------------------------------------------------------------

DESK_OVERRIDES = {
    "encoder": {
        "levels": 8,
        "log2_table_size": 15,
        "features_per_level": 2,
        "base_resolution": 16,
        "growth": 1.5,
    },
    "lineformer": {"channels": 16, "head_bias_init": -3.5},
    "sampler": {"tau": 0.01},
    "train": {
        "total_iterations": 3000,
        "patch_rays": 96,
        "pixel_rays": 96,
        "points_per_ray": 96,
        "lr0": 2e-3,
        "halve_every": 1500,
        "seed": 0,
        "checkpoint_every": 0,
    },
}

NVS_THRESHOLD_DB = 30.0
CT_THRESHOLD_DB = 25.0

# ablation study scale (criterion 7): same scene, shorter runs
ABLATION_ITERATIONS = 800
ABLATION_SEEDS = (0, 1, 2)
ABLATION_MIN_GAP_DB = 0.3


@pytest.fixture(scope="module")
def desk_scene():
    """The desk-scale scene: phantom, noisy train views, clean test views."""
    resolved = resolve_config(DESK_OVERRIDES)
    geom = build_geometry(resolved, "train")
    test_geom = build_geometry(resolved, "test")
    vol = make_phantom("shepp-logan-3d", (64, 64, 64), (2.0, 2.0, 2.0))
    train_proj = add_noise(
        project(vol, geom, n_steps=512), 0.03, np.random.default_rng(0)
    )
    test_proj = project(vol, test_geom, n_steps=512)
    return resolved, geom, test_geom, vol, train_proj, test_proj


def test_criterion_1_gradient_correctness():
    started = time.time()
    entries = full_suite(n_seeds=20)
    entries.append(full_pipeline_exhaustive(seed=0))
    elapsed = time.time() - started
    failed = [e for e in entries if not e.passed]
    assert not failed, failed
    coords = sum(e.checked_coords for e in entries)
    worst = max(e.max_rel_err for e in entries)
    assert elapsed < 120.0, f"suite took {elapsed:.0f}s (budget 120s)"
    print(
        f"\nPASS criterion 1: {len(entries)} gradient checks over 20 seeds, "
        f"{coords} coordinates, worst rel err {worst:.2e} < 1e-3, {elapsed:.0f}s"
    )


def _loop_oracle(p, x):
    def softmax_cols(a):
        e = np.exp(a - a.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)

    k = p.alpha.size
    s = p.pos.shape[0]
    n, c = x.shape
    dh = c // k
    out = np.empty_like(x)
    for i in range(n // s):
        xi = x[i * s : (i + 1) * s]
        qi = xi @ p.wq.data + p.bq.data
        ki = xi @ p.wk.data + p.bk.data
        vi = xi @ p.wv.data + p.bv.data
        heads = []
        for j in range(k):
            sl = slice(j * dh, (j + 1) * dh)
            att = softmax_cols(ki[:, sl].T @ qi[:, sl] / p.alpha.data[j])
            heads.append(vi[:, sl] @ att)
        out[i * s : (i + 1) * s] = (
            np.concatenate(heads, axis=1) @ p.wo.data + p.bo.data + p.pos.data
        )
    return out


def test_criterion_2_attention_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        k = int(rng.choice([1, 2, 4, 8]))
        dh = int(rng.choice([1, 2, 4]))
        c = k * dh
        if c > 32:
            continue
        s = int(rng.choice([1, 2, 4, 8]))
        m = int(rng.integers(1, max(2, 64 // max(s, 1))))
        n = s * m
        if n > 64:
            continue
        cfg = LineformerConfig(channels=c, heads=k, segment_length=s, n_points=n)
        p = init_attention(cfg, rng, dtype=np.float32)
        p.alpha.data[:] = rng.uniform(0.5, 2.0, k).astype(np.float32)
        x = rng.standard_normal((n, c)).astype(np.float32)
        got = ls_msa(p, Tensor(x)).data
        diff = float(np.abs(got - _loop_oracle(p, x)).max())
        worst = max(worst, diff)
        assert diff < 1e-5, f"trial {trial}: max abs diff {diff}"
    # M=1: the segmented path must equal the dense whole-ray computation
    # exactly (bit for bit)
    for dtype in (np.float32, np.float64):
        cfg = LineformerConfig(channels=16, heads=4, segment_length=16, n_points=16)
        p = init_attention(cfg, np.random.default_rng(7), dtype=dtype)
        x = np.random.default_rng(8).standard_normal((16, 16)).astype(dtype)
        got = ls_msa(p, Tensor(x, dtype=dtype)).data
        np.testing.assert_array_equal(got, _loop_oracle(p, x))
    print(
        f"\nPASS criterion 2: 100 random configs within 1e-5 of the loop "
        f"oracle (worst {worst:.2e}); M=1 equals dense attention exactly"
    )


def test_criterion_3_complexity_validation():
    # closed-form reference values
    ref = LineformerConfig(channels=32, heads=8, segment_length=2, n_points=320)
    assert flops(ref, "ls-msa") == 81920
    assert flops(ref, "g-msa") == 6553600
    ratio = flops(ref, "ls-msa") / flops(ref, "g-msa")
    assert ratio == pytest.approx(0.0125)

    # instrumented counts match the formulas exactly
    rng = np.random.default_rng(0)
    for c, k, s, n in [(16, 4, 2, 64), (32, 8, 4, 320), (8, 2, 8, 128), (32, 4, 2, 192)]:
        cfg = LineformerConfig(channels=c, heads=k, segment_length=s, n_points=n)
        p = init_attention(cfg, rng)
        x = Tensor(rng.standard_normal((n, c)).astype(np.float32))
        with count_macs() as counter:
            ls_msa(p, x)
        assert counter[0] == flops(cfg, "ls-msa")
        with count_macs() as counter:
            g_msa(p, x)
        assert counter[0] == flops(cfg, "g-msa")

    # measured wall-time scaling over N in {64..4096}
    rows = bench_attention(
        [64, 128, 256, 512, 1024, 2048, 4096], channels=16, heads=4, repeats=2
    )
    for r in rows:
        assert r.macs_analytic == r.macs_measured
    exponents = scaling_exponents(rows)
    assert 0.8 <= exponents["ls-msa"] <= 1.2, exponents
    assert exponents["g-msa"] > 1.6, exponents
    print(
        f"\nPASS criterion 3: MAC counts exact; wall-time exponents "
        f"ls-msa {exponents['ls-msa']:.2f} in [0.8, 1.2], "
        f"g-msa {exponents['g-msa']:.2f} > 1.6; N=320 ratio 1.25%"
    )


def test_criterion_4_attenuation_correctness():
    from xfield.geometry import ScanGeometry
    from xfield.phantoms import VoxelVolume

    # homogeneous cube: chord 100 mm at rho = 0.01/mm reads e^-1
    vol = VoxelVolume(
        (50,) * 3, [2.0] * 3, np.full((50,) * 3, 0.01, dtype=np.float32)
    )
    geom = ScanGeometry(
        dso=500.0, dsd=1000.0, det_rows=9, det_cols=9, pixel_pitch=4.0,
        angles=np.array([0.0]), volume_extent=np.array([100.0] * 3),
    )
    got = project(vol, geom, n_steps=512).images[0, 4, 4]
    rel = abs(got - np.exp(-1.0)) / np.exp(-1.0)
    assert rel < 0.005

    # quadrature error at least halves when the point count doubles
    def rho_fn(t):
        return 0.08 * np.exp(-((t - 0.4) ** 2) / 0.05) + 0.01 * t

    t_ref = np.linspace(0.0, 1.0, 100001)  # 1e-5-step reference integral
    reference = np.trapezoid(rho_fn(t_ref), t_ref)
    errors = []
    for n in (16, 32, 64, 128, 256):
        t = (np.arange(n) + 0.5) / n
        got_abs = render(
            Tensor(rho_fn(t), dtype=np.float64), np.full(n, 1.0 / n)
        ).absorption.item()
        errors.append(abs(got_abs - reference))
    ratios = [fine / coarse for coarse, fine in zip(errors, errors[1:])]
    assert all(r <= 0.5 for r in ratios), ratios
    print(
        f"\nPASS criterion 4: cube attenuation within {100 * rel:.3f}% of "
        f"e^-1; quadrature error ratios {['%.3f' % r for r in ratios]} all <= 0.5"
    )


def test_criterion_5_sampler_properties():
    from xfield.phantoms import ProjectionSet

    rng = np.random.default_rng(5)
    draw_rng = np.random.default_rng(6)
    total_draws = 0
    started = time.time()
    n_mask_sets = 100
    draws_per_sampler = 1000
    for mask_set in range(n_mask_sets):
        # random 16x16 masks across 2 views, as intensity images
        bits = rng.random((2, 16, 16)) < rng.uniform(0.35, 0.9)
        bits[:, 0, 0] = True
        images = np.where(bits, 0.4, 1.0).astype(np.float32)
        proj = ProjectionSet(images=images, angles=np.array([0.0, 1.0]))
        sampler = MlgSampler(proj, size=2, tau=0.5)
        np.testing.assert_array_equal(sampler.fg, bits)

        # brute-force window enumeration agrees exactly
        for view in range(2):
            got = set(map(tuple, sampler.window_sets[view].foreground_origins))
            want = {
                (r, c)
                for r in range(0, 16, 2)
                for c in range(0, 16, 2)
                if bits[view, r : r + 2, c : c + 2].all()
            }
            assert got == want

        n_windows = min(len(sampler.windows), 8)
        n_patch = n_windows * 4
        n_pixel = 16
        for _ in range(draws_per_sampler):
            batch = sampler.sample(n_patch, n_pixel, draw_rng)
            total_draws += 1
            # composition: exact counts when no fallback fired
            if not batch.patch_shortfall and not batch.with_replacement:
                assert len(batch) == n_patch + n_pixel
            # every ray on foreground
            assert sampler.fg[batch.views, batch.rows, batch.cols].all()
            # pairwise distinct pixels
            flat = batch.views * 256 + batch.rows * 16 + batch.cols
            if not batch.with_replacement:
                assert len(np.unique(flat)) == len(batch)
            # window completeness: patch rays tile whole windows
            patch = batch.provenance == 0
            if patch.any():
                keys = (
                    batch.views[patch] * 256
                    + (batch.rows[patch] - batch.rows[patch] % 2) * 16
                    + (batch.cols[patch] - batch.cols[patch] % 2)
                )
                unique, counts = np.unique(keys, return_counts=True)
                assert (counts == 4).all()
    elapsed = time.time() - started
    assert total_draws == n_mask_sets * draws_per_sampler == 100_000
    print(
        f"\nPASS criterion 5: {total_draws} batches over {n_mask_sets} random "
        f"mask sets: zero background rays, zero duplicates, whole windows, "
        f"exact counts ({elapsed:.0f}s)"
    )


@pytest.fixture(scope="module")
def desk_run(desk_scene, tmp_path_factory):
    resolved, geom, test_geom, vol, train_proj, test_proj = desk_scene
    out = tmp_path_factory.mktemp("desk_run")
    started = time.time()
    result = train(
        geom,
        train_proj,
        build_field_config(resolved),
        build_train_config(resolved),
        out,
    )
    minutes = (time.time() - started) / 60.0
    return result, minutes


def test_criterion_6_desk_scale_fit(desk_scene, desk_run):
    resolved, geom, test_geom, vol, train_proj, test_proj = desk_scene
    result, minutes = desk_run
    assert len(result.losses) == 3000
    field_obj, *_ = load_checkpoint(result.checkpoint_path)
    n_points = resolved["train"]["points_per_ray"]
    report, _ = eval_nvs(field_obj, test_geom, test_proj, n_points=n_points)
    ct_report = eval_ct(
        extract_ct(field_obj, vol.dims, vol.spacing, geom.volume_extent), vol
    )
    assert minutes < 30.0, f"training took {minutes:.1f} min (budget 30)"
    assert report.mean_psnr >= NVS_THRESHOLD_DB, report.mean_psnr
    assert ct_report.psnr_3d >= CT_THRESHOLD_DB, ct_report.psnr_3d
    # sanity: training views are fit at least as well as held-out views
    train_clean = project(vol, geom, n_steps=512)
    train_report, _ = eval_nvs(field_obj, geom, train_clean, n_points=n_points)
    assert train_report.mean_psnr >= report.mean_psnr - 0.5
    print(
        f"\nPASS criterion 6: 3000 iterations in {minutes:.1f} min; held-out "
        f"NVS {report.mean_psnr:.2f} dB >= {NVS_THRESHOLD_DB}, CT "
        f"{ct_report.psnr_3d:.2f} dB >= {CT_THRESHOLD_DB} "
        f"(slice-mean {ct_report.mean_psnr:.2f} dB, train NVS "
        f"{train_report.mean_psnr:.2f} dB)"
    )


def _ablation_variant(resolved, use_attention, use_mlg):
    cfg = json.loads(json.dumps(resolved))  # deep copy
    cfg["lineformer"]["mix"] = "ls-msa" if use_attention else "mlp"
    cfg["sampler"]["mode"] = "mlg" if use_mlg else "naive"
    cfg["train"]["total_iterations"] = ABLATION_ITERATIONS
    return cfg


@pytest.fixture(scope="module")
def ablation_scores(desk_scene, tmp_path_factory):
    resolved, geom, test_geom, vol, train_proj, test_proj = desk_scene
    out = tmp_path_factory.mktemp("ablation")
    variants = {
        "baseline": (False, False),
        "ls_msa": (True, False),
        "mlg": (False, True),
        "full": (True, True),
    }
    scores = {name: [] for name in variants}
    for seed in ABLATION_SEEDS:
        for name, (use_attention, use_mlg) in variants.items():
            cfg = _ablation_variant(resolved, use_attention, use_mlg)
            cfg["train"]["seed"] = seed
            result = train(
                geom,
                train_proj,
                build_field_config(cfg),
                build_train_config(cfg),
                out / f"{name}_s{seed}",
            )
            field_obj, *_ = load_checkpoint(result.checkpoint_path)
            report, _ = eval_nvs(
                field_obj, test_geom, test_proj,
                n_points=cfg["train"]["points_per_ray"],
            )
            scores[name].append(report.mean_psnr)
    return {name: float(np.mean(vals)) for name, vals in scores.items()}, scores


def test_criterion_7_ablation_ordering(ablation_scores):
    means, raw = ablation_scores
    gaps = {
        "full - ls_msa": means["full"] - means["ls_msa"],
        "full - mlg": means["full"] - means["mlg"],
        "ls_msa - baseline": means["ls_msa"] - means["baseline"],
        "mlg - baseline": means["mlg"] - means["baseline"],
    }
    for name, gap in gaps.items():
        assert gap >= ABLATION_MIN_GAP_DB, (name, gap, means, raw)
    print(
        f"\nPASS criterion 7: mean held-out NVS over {len(ABLATION_SEEDS)} "
        f"paired seeds: baseline {means['baseline']:.2f}, +attention "
        f"{means['ls_msa']:.2f}, +masked-sampling {means['mlg']:.2f}, full "
        f"{means['full']:.2f} dB; all gaps >= {ABLATION_MIN_GAP_DB} dB "
        f"({ {k: round(v, 2) for k, v in gaps.items()} })"
    )


def test_criterion_8_parameter_sweeps(tmp_path):
    # small-scale sweeps driven through the CLI ablation flags; emits a
    # combined CSV (no ordering asserted, scale-dependent optima)
    config = {
        "geometry": {"det_rows": 24, "det_cols": 24, "pixel_pitch": 18.7,
                     "n_train_views": 6, "n_test_views": 6},
        "phantom": {"dims": [32, 32, 32], "spacing": [4.0, 4.0, 4.0],
                    "projection_steps": 128},
        "encoder": {"levels": 4, "log2_table_size": 13, "base_resolution": 8,
                    "growth": 2.0},
        "lineformer": {"channels": 16},
        "sampler": {"patch_size": 4, "tau": 0.01},
        "train": {"total_iterations": 200, "patch_rays": 64, "pixel_rays": 64,
                  "points_per_ray": 32, "lr0": 3e-3, "checkpoint_every": 0},
    }
    cfg_path = tmp_path / "sweep_config.json"
    cfg_path.write_text(json.dumps(config))
    assert cli_main(["phantom", "--config", str(cfg_path),
                     "--out", str(tmp_path / "vol.xfevol")]) == 0
    assert cli_main(["project", "--volume", str(tmp_path / "vol.xfevol"),
                     "--config", str(cfg_path),
                     "--out-dir", str(tmp_path / "data")]) == 0

    rows = ["sweep,value,final_loss,mean_nvs_psnr_db"]
    n_points = config["train"]["points_per_ray"]
    for segment_length in (2, 4, 8):
        segments = n_points // segment_length
        run_dir = tmp_path / f"seg_{segment_length}"
        assert cli_main(["train", "--config", str(cfg_path),
                         "--data-dir", str(tmp_path / "data"),
                         "--out-dir", str(run_dir),
                         "--segments", str(segments)]) == 0
        rows.append(_sweep_row("segment_length", segment_length, run_dir, tmp_path))
    for patch_size in (2, 4, 8):
        run_dir = tmp_path / f"patch_{patch_size}"
        assert cli_main(["train", "--config", str(cfg_path),
                         "--data-dir", str(tmp_path / "data"),
                         "--out-dir", str(run_dir),
                         "--patch-size", str(patch_size)]) == 0
        rows.append(_sweep_row("patch_size", patch_size, run_dir, tmp_path))
    sweep_csv = tmp_path / "sweeps.csv"
    sweep_csv.write_text("\n".join(rows) + "\n")
    assert len(rows) == 7
    print(f"\nPASS criterion 8: 6 sweep runs completed; CSV at {sweep_csv}")


def _sweep_row(kind, value, run_dir, tmp_path):
    metrics = (run_dir / "metrics.csv").read_text().strip().splitlines()
    final_loss = float(metrics[-1].split(",")[2])
    assert cli_main(["eval-nvs",
                     "--checkpoint", str(run_dir / "checkpoint_final.xfeckp"),
                     "--data", str(tmp_path / "data" / "test_projections.xfeprj"),
                     "--out-dir", str(run_dir / "eval")]) == 0
    report = json.loads((run_dir / "eval" / "nvs_report.json").read_text())
    return f"{kind},{value},{final_loss:.6e},{report['mean_psnr_db']:.4f}"


def test_criterion_9_determinism(desk_scene, tmp_path):
    resolved, geom, test_geom, vol, train_proj, test_proj = desk_scene
    cfg = json.loads(json.dumps(resolved))
    cfg["train"]["total_iterations"] = 120
    cfg["train"]["checkpoint_every"] = 60
    runs = []
    for tag in ("a", "b"):
        result = train(
            geom, train_proj, build_field_config(cfg), build_train_config(cfg),
            tmp_path / tag,
        )
        runs.append(result)
    for name in ("checkpoint_000060.xfeckp", "checkpoint_000120.xfeckp",
                 "checkpoint_final.xfeckp"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes(), name
    rows_a = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    rows_b = (tmp_path / "b" / "metrics.csv").read_text().splitlines()
    deterministic = lambda lines: [",".join(r.split(",")[:3]) for r in lines]
    assert deterministic(rows_a) == deterministic(rows_b)
    print(
        "\nPASS criterion 9: re-run with identical config+seed reproduced "
        "3 checkpoints byte-identically and the metrics log exactly "
        "(iteration, lr, loss columns; wall_ms is wall time)"
    )
