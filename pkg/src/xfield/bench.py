"""Timing and complexity validation for the two attention mechanisms.

Measures wall time per ray across point counts, verifies the
instrumented multiply-accumulate counts against the closed forms, and
fits log-log scaling exponents. Ray batches shrink as N grows so each
timed call does comparable total work and per-call overhead stays
negligible; per-ray time still reveals the true N-scaling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .lineformer import (
    LineformerConfig,
    count_macs,
    flops,
    g_msa,
    init_attention,
    ls_msa,
)
from .tensor import Tensor


@dataclass(frozen=True)
class BenchRow:
    mode: str
    n_points: int
    rays: int
    seconds_per_ray: float
    macs_analytic: int
    macs_measured: int


def _attention_fn(mode: str):
    return ls_msa if mode == "ls-msa" else g_msa


def bench_attention(
    n_list,
    channels: int = 32,
    heads: int = 4,
    segment_length: int = 2,
    repeats: int = 3,
    ray_points_budget: int = 8192,
    seed: int = 0,
) -> list[BenchRow]:
    rows = []
    rng = np.random.default_rng(seed)
    for mode in ("ls-msa", "g-msa"):
        fn = _attention_fn(mode)
        for n in n_list:
            cfg = LineformerConfig(
                channels=channels,
                heads=heads,
                segment_length=segment_length,
                n_points=n,
                mix=mode,
            )
            params = init_attention(cfg, rng, dtype=np.float32)
            rays = max(1, ray_points_budget // n)
            if mode == "g-msa":
                # keep the (rays, heads, N, N) score tensor under ~256 MB
                cap = max(1, int(2.5e8 / (heads * n * n)))
                rays = min(rays, cap)
            x = Tensor(
                rng.standard_normal((rays, n, channels)).astype(np.float32)
            )
            with count_macs() as counter:
                fn(params, x)
            measured = counter[0] // rays
            best = np.inf
            for _ in range(repeats):
                start = time.perf_counter()
                fn(params, x)
                best = min(best, time.perf_counter() - start)
            rows.append(
                BenchRow(
                    mode=mode,
                    n_points=n,
                    rays=rays,
                    seconds_per_ray=best / rays,
                    macs_analytic=flops(cfg, mode),
                    macs_measured=measured,
                )
            )
    return rows


def fit_exponent(n_values, times) -> float:
    """Least-squares slope of log(time) against log(N)."""
    return float(np.polyfit(np.log(np.asarray(n_values, dtype=float)),
                            np.log(np.asarray(times, dtype=float)), 1)[0])


def scaling_exponents(rows: list[BenchRow]) -> dict[str, float]:
    out = {}
    for mode in ("ls-msa", "g-msa"):
        mode_rows = [r for r in rows if r.mode == mode]
        out[mode] = fit_exponent(
            [r.n_points for r in mode_rows], [r.seconds_per_ray for r in mode_rows]
        )
    return out


def rows_to_csv(rows: list[BenchRow]) -> str:
    lines = ["mode,n_points,rays,seconds_per_ray,macs_analytic,macs_measured"]
    for r in rows:
        lines.append(
            f"{r.mode},{r.n_points},{r.rays},{r.seconds_per_ray:.9e},"
            f"{r.macs_analytic},{r.macs_measured}"
        )
    return "\n".join(lines) + "\n"
