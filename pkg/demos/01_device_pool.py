"""Generate a synthetic device pool and look at its latency landscape.

Builds the default 18-device layerwise pool (GPU batch variants, CPUs,
mobile SoCs, and accelerators held out as an unseen platform), then prints
the pairwise rank-correlation structure that makes cross-device latency
prediction non-trivial: no two devices rank architectures identically, but
none are unrelated either.
"""

import itertools

import numpy as np

from latpred.archspace import sample_architectures
from latpred.devicesim import PoolConfig, generate_pool, measure_many, _spearman_np

pool = generate_pool(PoolConfig(space="layerwise"), n_devices=18, seed=7)

print(f"devices ({len(pool.devices)}):")
for split, ids in pool.splits.items():
    print(f"  {split}: {', '.join(ids)}")

cal = pool.calibration
print(f"\ncalibration: pairwise Spearman in [{cal['rho_min']:.3f}, "
      f"{cal['rho_max']:.3f}] on the {cal['probe_size']}-architecture probe")

probe = sample_architectures("layerwise", 300, seed=1)
lats = {d.device_id: measure_many(d, probe, seed=5) for d in pool.devices}

print("\nlatency ranges (ms) over 300 random architectures:")
for d in pool.devices[:6]:
    lo, hi = lats[d.device_id].min(), lats[d.device_id].max()
    print(f"  {d.device_id:<14} {lo:7.2f} .. {hi:7.2f}   ({d.archetype})")

some = [d.device_id for d in pool.devices[:8]]
print("\nrank correlations among the first 8 devices:")
print("            " + "".join(f"{i:>7}" for i in range(8)))
for i, a in enumerate(some):
    row = []
    for b in some:
        row.append(_spearman_np(lats[a], lats[b]))
    print(f"{a:<12}" + "".join(f"{r:7.2f}" for r in row))

print("\nbatch variants of one GPU re-rank architectures (dispatch-bound at "
      "batch 1, compute-bound at batch 256), mirroring real measurements.")
