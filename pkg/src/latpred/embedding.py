"""Device fingerprints and few-shot task assembly.

A device is embedded by measuring the fixed reference architectures on it and
min-max standardizing the raw vector: v* = (v - min) / (max - min), so every
embedding lies in [0, 1] with its smallest entry at 0 and largest at 1. The
raw min/max anchors are kept for mapping standardized predictions back to
milliseconds.

Episodes pair one device's embedding with disjoint support and query
measurement sets drawn from a latency dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .archspace import Architecture, ReferenceSet
from .devicesim import DeviceProfile, LatencyDataset, measure
from .seeds import rng_for

DEFAULT_K_SHOT = 10
DEFAULT_QUERY_SIZE = 128


class EmbeddingError(ValueError):
    pass


class DegenerateDeviceError(EmbeddingError):
    """All reference latencies equal; the device cannot be conditioned on."""


@dataclass(frozen=True)
class DeviceEmbedding:
    device_id: str
    values: np.ndarray  # length d, in [0, 1]
    raw_min: float  # ms
    raw_max: float  # ms

    @property
    def d(self) -> int:
        return len(self.values)

    def standardize(self, latency_ms):
        """Map milliseconds into the embedding's [0, 1] reference scale."""
        return (np.asarray(latency_ms, dtype=float) - self.raw_min) / (
            self.raw_max - self.raw_min)

    def destandardize(self, value):
        return np.asarray(value, dtype=float) * (self.raw_max - self.raw_min) + self.raw_min

    def to_json_obj(self) -> dict:
        return {"device_id": self.device_id, "values": self.values.tolist(),
                "raw_min": self.raw_min, "raw_max": self.raw_max}


def standardize_latencies(raw: Sequence[float]) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= lo:
        raise DegenerateDeviceError(
            "all reference latencies are equal; min-max standardization is undefined")
    return (raw - lo) / (hi - lo)


def compute_embedding(device: DeviceProfile, refset: ReferenceSet, seed: int) -> DeviceEmbedding:
    """Measure the reference set on the device and standardize."""
    raw = np.array([measure(device, a, seed=rng_for(seed, "embed", device.device_id, i)
                            .integers(0, 2 ** 31))
                    for i, a in enumerate(refset.architectures)])
    values = standardize_latencies(raw)
    return DeviceEmbedding(device.device_id, values,
                           raw_min=float(raw.min()), raw_max=float(raw.max()))


def embedding_from_raw(device_id: str, raw: Sequence[float]) -> DeviceEmbedding:
    raw = np.asarray(raw, dtype=float)
    return DeviceEmbedding(device_id, standardize_latencies(raw),
                           raw_min=float(raw.min()), raw_max=float(raw.max()))


def save_embedding(path, emb: DeviceEmbedding) -> None:
    with open(path, "w") as fh:
        json.dump(emb.to_json_obj(), fh)


def load_embedding(path) -> DeviceEmbedding:
    with open(path) as fh:
        obj = json.load(fh)
    return DeviceEmbedding(obj["device_id"], np.array(obj["values"]),
                           obj["raw_min"], obj["raw_max"])


# ---------------------------------------------------------------------------
# Episodes


@dataclass(frozen=True)
class Episode:
    """One few-shot regression task: a device plus disjoint sample sets."""

    device_id: str
    v_h: DeviceEmbedding
    support: tuple[tuple[Architecture, float], ...]
    query: tuple[tuple[Architecture, float], ...]

    def __post_init__(self):
        from .archspace import arch_key

        support_keys = {arch_key(a) for a, _ in self.support}
        query_keys = {arch_key(a) for a, _ in self.query}
        if support_keys & query_keys:
            raise EmbeddingError("support and query sets overlap")


def sample_episode(dataset: LatencyDataset, device_id: str, v_h: DeviceEmbedding,
                   k_shot: int = DEFAULT_K_SHOT, query_size: int = DEFAULT_QUERY_SIZE,
                   seed: int = 0) -> Episode:
    """Draw disjoint support/query rows for one device, reproducibly."""
    rows = dataset.device_rows(device_id)
    need = k_shot + query_size
    if len(rows) < need:
        raise EmbeddingError(
            f"device {device_id} has {len(rows)} rows, episode needs "
            f"{need} (k_shot={k_shot} + query={query_size})")
    rng = rng_for(seed, "episode", device_id)
    idx = rng.choice(len(rows), size=need, replace=False)
    support = tuple(rows[i] for i in idx[:k_shot])
    query = tuple(rows[i] for i in idx[k_shot:])
    return Episode(device_id, v_h, support, query)


def build_meta_batch(dataset: LatencyDataset, device_ids: Sequence[str],
                     embedding_for, meta_batch: int,
                     k_shot: int = DEFAULT_K_SHOT,
                     query_size: int = DEFAULT_QUERY_SIZE,
                     seed: int = 0) -> list[Episode]:
    """meta_batch episodes over devices sampled with replacement.

    ``embedding_for(device_id, seed)`` supplies each episode's embedding; a
    caller that re-measures noisy devices per episode passes a refreshing
    provider, a caller with table devices passes a cached one.
    """
    if not device_ids:
        raise EmbeddingError("no devices to sample episodes from")
    rng = rng_for(seed, "meta_batch")
    picks = rng.choice(len(device_ids), size=meta_batch, replace=True)
    episodes = []
    for i, pick in enumerate(picks):
        device_id = device_ids[int(pick)]
        ep_seed = int(rng_for(seed, "batch_episode", i).integers(0, 2 ** 31))
        episodes.append(sample_episode(dataset, device_id,
                                       embedding_for(device_id, ep_seed),
                                       k_shot, query_size, seed=ep_seed))
    return episodes


def make_embedding_provider(pool_devices: dict[str, DeviceProfile],
                            refset: ReferenceSet, refresh: bool = True):
    """Provider that re-measures noisy synthetic devices per episode and
    caches everything else (table devices always answer identically)."""
    cache: dict[str, DeviceEmbedding] = {}

    def provider(device_id: str, seed: int) -> DeviceEmbedding:
        device = pool_devices[device_id]
        noisy = (device.kind == "synthetic" and device.synthetic.noise_cv > 0)
        if refresh and noisy:
            return compute_embedding(device, refset, seed=seed)
        if device_id not in cache:
            cache[device_id] = compute_embedding(device, refset, seed=0)
        return cache[device_id]

    return provider
