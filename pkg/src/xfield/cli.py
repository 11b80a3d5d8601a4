"""Command-line surface: phantom/project/train/eval/gradcheck/bench.

Exit codes: 0 success, 1 configuration error, 2 data error,
3 numerical failure. ``XFE_THREADS`` caps BLAS parallelism and must be
honored before numpy loads, so heavy imports happen inside handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems as config errors (exit 1)."""

    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _apply_thread_cap() -> None:
    cap = os.environ.get("XFE_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _version_string() -> str:
    from . import __version__

    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"xfield {__version__}" + (f" ({described})" if described else "")


def _load_config(path):
    from .config import load_config, resolve_config

    if path is None:
        return resolve_config(None)
    return load_config(path)


def _write_run_manifest(out_dir, resolved, argv) -> None:
    from pathlib import Path

    from .config import config_fingerprint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )
    manifest = {
        "seed": resolved["train"]["seed"],
        "version": _version_string(),
        "fingerprint": config_fingerprint(resolved),
        "argv": argv,
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_phantom(args, argv) -> int:
    from .config import build_geometry
    from .fileio import write_volume
    from .phantoms import make_phantom

    resolved = _load_config(args.config)
    p = resolved["phantom"]
    vol = make_phantom(p["kind"], p["dims"], p["spacing"],
                       supersample=int(p["supersample"]))
    geom = build_geometry(resolved)
    import numpy as np

    if not np.allclose(vol.extent, geom.volume_extent):
        from .errors import ConfigError

        raise ConfigError(
            f"phantom extent {vol.extent.tolist()} != geometry extent "
            f"{geom.volume_extent.tolist()}"
        )
    from pathlib import Path

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_volume(args.out, vol)
    print(f"wrote {args.out} ({p['kind']}, dims {tuple(vol.dims)})")
    return 0


def cmd_project(args, argv) -> int:
    import numpy as np

    from .config import build_geometry
    from .fileio import read_volume, write_projections
    from .phantoms import add_noise, project

    resolved = _load_config(args.config)
    p = resolved["phantom"]
    vol = read_volume(args.volume)
    from pathlib import Path

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(p["noise_seed"]))
    for which, noise_key in (("train", "noise_fraction"), ("test", "test_noise_fraction")):
        geom = build_geometry(resolved, which)
        proj = project(vol, geom, n_steps=int(p["projection_steps"]), i0=float(p["i0"]))
        fraction = float(p[noise_key])
        proj = add_noise(proj, fraction, rng)
        proj = type(proj)(
            images=proj.images,
            angles=proj.angles,
            i0=proj.i0,
            noise_fraction=fraction,
            seed=int(p["noise_seed"]),
        )
        path = out / f"{which}_projections.xfeprj"
        write_projections(path, proj)
        print(f"wrote {path} ({proj.n_views} views, noise {fraction:g})")
    return 0


def _training_inputs(args):
    from pathlib import Path

    from .errors import DataError
    from .fileio import read_projections

    data = Path(args.data_dir)
    train_path = data / "train_projections.xfeprj"
    if not train_path.exists():
        raise DataError(f"missing {train_path}")
    return read_projections(train_path)


def cmd_train(args, argv) -> int:
    from .config import build_field_config, build_geometry, build_train_config
    from .trainer import train

    resolved = _load_config(args.config)
    if args.no_ls_msa:
        resolved["lineformer"]["mix"] = "mlp"
    if args.no_mlg:
        resolved["sampler"]["mode"] = "naive"
    if args.segments is not None:
        n_points = int(resolved["train"]["points_per_ray"])
        if n_points % args.segments:
            from .errors import ConfigError

            raise ConfigError(
                f"--segments {args.segments} does not divide {n_points} points"
            )
        resolved["lineformer"]["segment_length"] = n_points // args.segments
    if args.patch_size is not None:
        resolved["sampler"]["patch_size"] = args.patch_size
        if int(resolved["train"]["patch_rays"]) % (args.patch_size**2):
            # keep the window tiling invariant under sweep overrides
            per = int(resolved["train"]["patch_rays"]) // (args.patch_size**2)
            resolved["train"]["patch_rays"] = max(per, 1) * args.patch_size**2
    if args.iterations is not None:
        resolved["train"]["total_iterations"] = args.iterations
    if args.seed is not None:
        resolved["train"]["seed"] = args.seed

    projections = _training_inputs(args)
    geom = build_geometry(resolved, "train")
    field_cfg = build_field_config(resolved)
    train_cfg = build_train_config(resolved)
    _write_run_manifest(args.out_dir, resolved, argv)
    result = train(
        geom,
        projections,
        field_cfg,
        train_cfg,
        args.out_dir,
        resume=args.resume,
        window_debug=bool(resolved["sampler"]["window_debug"]),
    )
    print(f"finished {train_cfg.total_iterations} iterations")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def cmd_eval_nvs(args, argv) -> int:
    from pathlib import Path

    import numpy as np

    from .evaluator import eval_nvs
    from .fileio import read_projections, write_pgm, write_raw_f32
    from .geometry import ScanGeometry
    from .trainer import load_checkpoint

    field_obj, _, _, _, field_cfg, train_cfg, geom = load_checkpoint(args.checkpoint)
    projections = read_projections(args.data)
    eval_geom = ScanGeometry(
        dso=geom.dso,
        dsd=geom.dsd,
        det_rows=geom.det_rows,
        det_cols=geom.det_cols,
        pixel_pitch=geom.pixel_pitch,
        angles=projections.angles,
        volume_extent=geom.volume_extent,
    )
    n_points = args.points or train_cfg.points_per_ray
    report, rendered = eval_nvs(
        field_obj, eval_geom, projections, n_points=n_points
    )
    out = Path(args.out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    (out / "nvs_report.json").write_text(report.to_json() + "\n")
    (out / "nvs_report.csv").write_text(report.to_csv())
    for view in range(rendered.shape[0]):
        write_pgm(out / "views" / f"view_{view:03d}.pgm", rendered[view], 0.0, 1.0)
        write_raw_f32(out / "views" / f"view_{view:03d}.f32", rendered[view])
    print(f"NVS over {rendered.shape[0]} views: "
          f"PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")
    return 0


def cmd_eval_ct(args, argv) -> int:
    from pathlib import Path

    from .evaluator import eval_ct, extract_ct
    from .fileio import read_volume, write_pgm, write_raw_f32, write_volume
    from .trainer import load_checkpoint

    field_obj, _, _, _, field_cfg, train_cfg, geom = load_checkpoint(args.checkpoint)
    reference = read_volume(args.reference)
    volume = extract_ct(
        field_obj, reference.dims, reference.spacing, geom.volume_extent
    )
    report = eval_ct(volume, reference)
    out = Path(args.out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    write_volume(out / "reconstruction.xfevol", volume)
    (out / "ct_report.json").write_text(report.to_json() + "\n")
    (out / "ct_report.csv").write_text(report.to_csv())
    peak = float(reference.data.max()) or 1.0
    for k in range(volume.dims[2]):
        write_pgm(out / "slices" / f"slice_{k:03d}.pgm", volume.data[:, :, k], 0.0, peak)
    write_raw_f32(out / "reconstruction.f32", volume.data)
    print(f"CT volume PSNR {report.psnr_3d:.2f} dB "
          f"(slice mean {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f})")
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import full_pipeline_exhaustive, full_suite

    entries = full_suite(n_seeds=args.seeds)
    entries.append(full_pipeline_exhaustive())
    failed = [e for e in entries if not e.passed]
    for e in sorted(entries, key=lambda x: x.name):
        status = "PASS" if e.passed else "FAIL"
        print(
            f"{status} {e.name:32s} max_rel_err={e.max_rel_err:.3e} "
            f"tol={e.tol:g} coords={e.checked_coords}"
        )
    if failed:
        print(f"{len(failed)} gradient checks failed", file=sys.stderr)
        return 3
    print(f"all {len(entries)} gradient checks passed over {args.seeds} seeds")
    return 0


def cmd_bench_attn(args, argv) -> int:
    from pathlib import Path

    from .bench import bench_attention, rows_to_csv, scaling_exponents

    n_list = [int(x) for x in args.n_list.split(",") if x]
    rows = bench_attention(n_list, channels=args.channels, heads=args.heads,
                           segment_length=args.segment_length)
    mismatched = [r for r in rows if r.macs_analytic != r.macs_measured]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench_attn.csv").write_text(rows_to_csv(rows))
    exponents = scaling_exponents(rows)
    (out / "bench_attn_summary.json").write_text(
        json.dumps({"exponents": exponents}, indent=2, sort_keys=True) + "\n"
    )
    for mode, exponent in exponents.items():
        print(f"{mode}: fitted time exponent {exponent:.3f}")
    if mismatched:
        for r in mismatched:
            print(
                f"MAC mismatch {r.mode} N={r.n_points}: analytic "
                f"{r.macs_analytic} measured {r.macs_measured}",
                file=sys.stderr,
            )
        return 3
    print(f"wrote {out / 'bench_attn.csv'}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="xfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a voxel phantom file")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("project", help="simulate train/test projection stacks")
    p.add_argument("--volume", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_project)

    p = sub.add_parser("train", help="fit the field to training projections")
    p.add_argument("--config", default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--no-ls-msa", action="store_true",
                   help="ablation: replace attention with a per-point MLP")
    p.add_argument("--no-mlg", action="store_true",
                   help="ablation: naive whole-image ray sampling")
    p.add_argument("--segments", type=int, default=None,
                   help="number of segments per ray (sets segment length)")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval-nvs", help="render and score held-out views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="projection file with ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--points", type=int, default=None)
    p.set_defaults(handler=cmd_eval_nvs)

    p = sub.add_parser("eval-ct", help="extract the volume and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True, help="ground-truth volume file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_eval_ct)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("bench-attn", help="attention timing and complexity check")
    p.add_argument("--n-list", default="64,128,256,512,1024,2048,4096")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--segment-length", type=int, default=2)
    p.set_defaults(handler=cmd_bench_attn)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    from .errors import ConfigError, DataError, NumericalError

    try:
        args = parser.parse_args(argv)
        return args.handler(args, argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
