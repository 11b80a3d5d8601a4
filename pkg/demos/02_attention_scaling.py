"""Compare the segmented channel attention against global attention.

The segmented form computes a (head_dim x head_dim) attention map per
segment, so its multiply-accumulate count is 2·N·C²/heads — linear in
the number of ray samples. Global token attention builds an (N x N)
map and scales quadratically. This script verifies the closed-form
counts against instrumented execution and times both over a sweep.
"""

import numpy as np

from xfield.bench import bench_attention, fit_exponent, scaling_exponents
from xfield.lineformer import LineformerConfig, flops

# Closed-form counts at the reference configuration.
cfg = LineformerConfig(channels=32, heads=8, segment_length=2, n_points=320)
linear_macs = flops(cfg, "ls-msa")
global_macs = flops(cfg, "g-msa")
print(f"N=320, C=32, 8 heads:")
print(f"  segmented attention: {linear_macs:,} MACs")
print(f"  global attention:    {global_macs:,} MACs")
print(f"  ratio: {100 * linear_macs / global_macs:.2f}%")

# Instrumented timing sweep. Each row also re-counts MACs during
# execution; the bench asserts nothing, it just reports.
rows = bench_attention([64, 128, 256, 512, 1024], channels=16, heads=4)
print(f"\n{'mode':8s} {'N':>5s} {'us/ray':>10s} {'analytic':>12s} {'measured':>12s}")
for r in rows:
    print(
        f"{r.mode:8s} {r.n_points:5d} {r.seconds_per_ray * 1e6:10.1f} "
        f"{r.macs_analytic:12,} {r.macs_measured:12,}"
    )

exponents = scaling_exponents(rows)
print(f"\nfitted wall-time exponents: "
      f"segmented {exponents['ls-msa']:.2f} (linear), "
      f"global {exponents['g-msa']:.2f} (quadratic)")
