"""Fingerprint devices with reference-architecture latencies.

A device is summarized by measuring ten fixed reference architectures and
min-max standardizing the vector. Two devices of the same platform get
similar fingerprints; different platforms separate cleanly. The same script
then assembles one few-shot episode, the unit of meta-training.
"""

import numpy as np

from latpred.archspace import default_reference_set, sample_architectures
from latpred.devicesim import PoolConfig, build_dataset, generate_pool
from latpred.embedding import compute_embedding, sample_episode

pool = generate_pool(PoolConfig(space="layerwise"), 18, seed=7)
refset = default_reference_set("layerwise", seed=7)
print(f"reference set: {refset.d} architectures, MAC span "
      f">= {3.0}x by construction\n")

embeddings = {}
for d in pool.devices:
    emb = compute_embedding(d, refset, seed=0)
    embeddings[d.device_id] = emb
    bar = "".join("#" if v > t else "." for v in emb.values for t in [0.5])
    print(f"{d.device_id:<14} [{bar}]  raw {emb.raw_min:6.2f}..{emb.raw_max:7.2f} ms")

print("\nfingerprints are scale-free: they depend on relative latencies only,")
print("so a 2x faster clone of a device maps to the same vector.\n")

archs = sample_architectures("layerwise", 800, seed=1)
dataset = build_dataset(pool, archs, samples_per_device=200, seed=2)
device_id = pool.splits["meta_train"][0]
episode = sample_episode(dataset, device_id, embeddings[device_id],
                         k_shot=10, query_size=128, seed=3)
print(f"episode on {device_id}: {len(episode.support)} support + "
      f"{len(episode.query)} query rows (disjoint)")
support_ms = [lat for _, lat in episode.support]
print(f"support latencies: {np.round(support_ms, 2)}")
print(f"standardized:      {np.round(episode.v_h.standardize(support_ms), 3)}")
