"""Small end-to-end experiment: fit the field, then score it.

Runs a reduced-size version of the full loop (a 32^3 phantom, a 24x24
detector, a few hundred iterations) so it finishes in about a minute,
then renders held-out views and extracts the volume. The CLI wraps
exactly this sequence; see README for the equivalent commands.
"""

import time
from pathlib import Path

import numpy as np

from xfield.config import (
    build_field_config,
    build_geometry,
    build_train_config,
    resolve_config,
)
from xfield.evaluator import eval_ct, eval_nvs, extract_ct
from xfield.fileio import write_pgm
from xfield.phantoms import add_noise, make_phantom, project
from xfield.trainer import load_checkpoint, train

out = Path(__file__).parent / "output" / "04"
out.mkdir(parents=True, exist_ok=True)

resolved = resolve_config({
    "geometry": {"det_rows": 24, "det_cols": 24, "pixel_pitch": 18.7,
                 "n_train_views": 8, "n_test_views": 8},
    "phantom": {"dims": [32, 32, 32], "spacing": [4.0, 4.0, 4.0],
                "projection_steps": 256},
    "encoder": {"levels": 4, "log2_table_size": 13, "base_resolution": 8,
                "growth": 2.0},
    "lineformer": {"channels": 16},
    "sampler": {"patch_size": 2},
    "train": {"total_iterations": 400, "patch_rays": 96, "pixel_rays": 96,
              "points_per_ray": 48, "lr0": 2e-3, "halve_every": 300,
              "checkpoint_every": 0},
})

vol = make_phantom("shepp-logan-3d", resolved["phantom"]["dims"],
                   resolved["phantom"]["spacing"])
train_geom = build_geometry(resolved, "train")
test_geom = build_geometry(resolved, "test")
train_proj = add_noise(
    project(vol, train_geom, n_steps=256), 0.03, np.random.default_rng(0)
)
test_proj = project(vol, test_geom, n_steps=256)

print("training on 8 noisy views...")
t0 = time.time()
result = train(train_geom, train_proj, build_field_config(resolved),
               build_train_config(resolved), out / "run")
print(f"  {len(result.losses)} iterations in {time.time() - t0:.0f}s, "
      f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.5f}")

field_obj, *_ = load_checkpoint(result.checkpoint_path)

report, rendered = eval_nvs(field_obj, test_geom, test_proj, n_points=48)
print(f"held-out views: PSNR {report.mean_psnr:.2f} dB, "
      f"SSIM {report.mean_ssim:.4f}")
write_pgm(out / "heldout_rendered.pgm", rendered[0], 0.0, 1.0)
write_pgm(out / "heldout_truth.pgm", test_proj.images[0], 0.0, 1.0)

recon = extract_ct(field_obj, vol.dims, vol.spacing, train_geom.volume_extent)
ct = eval_ct(recon, vol)
print(f"volume: PSNR {ct.psnr_3d:.2f} dB (slice mean {ct.mean_psnr:.2f} dB)")
write_pgm(out / "recon_midslice.pgm", recon.data[:, :, 16], 0.0,
          float(vol.data.max()))
write_pgm(out / "truth_midslice.pgm", vol.data[:, :, 16], 0.0,
          float(vol.data.max()))
print(f"wrote previews to {out}")
