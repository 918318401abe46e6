"""Ground-truth latency sources: synthetic device families and lookup tables.

A synthetic device computes, for an architecture ``a``::

    latency(a) = fixed_overhead
               + sum over op instances  cost[op, stage] * adj(op)
               + sum over adjacent pairs  gamma[op_a, op_b] * |eff_a - eff_b|

where ``adj(op) = (1 - p) + p * residual[op]`` is the parallelism adjustment
(``p`` the device's parallelism factor: ops that parallelize well keep only
``residual`` of their cost on highly parallel hardware) and ``eff`` are the
adjusted per-instance costs. Interaction-free profiles are therefore exactly
additive in the adjusted per-op costs, which an op-cost regression can fit.
The pairwise terms penalize cost-heterogeneous producer/consumer pairs
(tensor layout conversions, pipeline stalls between unlike kernels); they
depend on the *arrangement* of ops, not just their counts, which is exactly
what per-op cost models cannot express and what makes interaction-heavy
devices hard for additive predictors. The result is scaled by lognormal
measurement noise with a given coefficient of variation, averaged over 50
internal draws.

Table devices simply replay stored measurements keyed by the canonical
architecture hash.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import archspace as asp
from .archspace import Architecture, arch_from_obj, arch_hash, arch_to_obj
from .seeds import rng_for

NOISE_AVERAGING_RUNS = 50
MIN_INTERACTION_COEFF = -0.2  # keeps total latency provably positive

DATASET_FORMAT_VERSION = 1


class DeviceError(ValueError):
    """Invalid device parameters or failed lookup."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic device.

    ``dispatch_overhead`` is a per-active-op launch cost (ms per instance);
    it dominates small-batch executions where kernels are issue-bound, while
    the parallelism-adjusted compute costs dominate saturated executions.
    """

    op_cost_table: np.ndarray  # (n_ops, n_stages) base cost per instance, ms
    parallelism_factor: float  # in (0, 1]
    parallel_residual: np.ndarray  # (n_ops,) cost fraction left under full overlap
    interaction_coeffs: dict[tuple[int, int], float]
    fixed_overhead: float  # ms
    noise_cv: float
    dispatch_overhead: float = 0.0  # ms per op instance with nonzero base cost

    def __post_init__(self):
        if not 0.0 < self.parallelism_factor <= 1.0:
            raise DeviceError(f"parallelism_factor must be in (0,1], got {self.parallelism_factor}")
        if self.fixed_overhead <= 0:
            raise DeviceError("fixed_overhead must be positive")
        if self.noise_cv < 0:
            raise DeviceError("noise_cv must be >= 0")
        if self.dispatch_overhead < 0:
            raise DeviceError("dispatch_overhead must be >= 0")
        if np.any(np.asarray(self.op_cost_table) < 0):
            raise DeviceError("op costs must be non-negative")
        for pair, g in self.interaction_coeffs.items():
            if g < MIN_INTERACTION_COEFF:
                raise DeviceError(f"interaction coeff {pair} = {g} below {MIN_INTERACTION_COEFF}")

    def effective_costs(self) -> np.ndarray:
        p = self.parallelism_factor
        adj = (1.0 - p) + p * self.parallel_residual
        eff = self.op_cost_table * adj[:, None]
        if self.dispatch_overhead:
            eff = eff + self.dispatch_overhead * (self.op_cost_table > 0)
        return eff


@dataclass(frozen=True)
class DeviceProfile:
    """A black-box latency function over one architecture space."""

    device_id: str
    space: str
    kind: str  # "synthetic" | "table"
    synthetic: SyntheticSpec | None = None
    table: dict[str, float] | None = None
    archetype: str = ""

    def __post_init__(self):
        if self.kind == "synthetic" and self.synthetic is None:
            raise DeviceError("synthetic profile needs a SyntheticSpec")
        if self.kind == "table" and self.table is None:
            raise DeviceError("table profile needs stored latencies")


def base_latency(profile: DeviceProfile, arch: Architecture) -> float:
    """Noiseless synthetic latency; the deterministic core of measure()."""
    spec = profile.synthetic
    if spec is None:
        raise DeviceError(f"device {profile.device_id} has no synthetic model")
    if arch.space != profile.space:
        raise DeviceError(f"device {profile.device_id} expects {profile.space} "
                          f"architectures, got {arch.space}")
    eff = spec.effective_costs()
    counts = asp.op_stage_counts(arch)
    total = spec.fixed_overhead + float((counts * eff).sum())
    if spec.interaction_coeffs:
        mult = asp.adjacent_pair_multiplicity(arch)
        for op_a, op_b, stage in asp.adjacent_op_pairs(arch):
            g = spec.interaction_coeffs.get((op_a, op_b))
            if g:
                total += mult * g * abs(eff[op_a, stage] - eff[op_b, stage])
    return total


def measure(profile: DeviceProfile, arch: Architecture, seed: int) -> float:
    """One latency measurement in milliseconds, deterministic under seed.

    Synthetic devices apply multiplicative lognormal noise averaged over
    NOISE_AVERAGING_RUNS internal draws; table devices return the stored
    value exactly.
    """
    if profile.kind == "table":
        key = arch_hash(arch)
        if key not in profile.table:
            raise DeviceError(f"device {profile.device_id} has no stored latency "
                              f"for architecture {arch.ops}")
        return profile.table[key]
    lat = base_latency(profile, arch)
    cv = profile.synthetic.noise_cv
    if cv > 0:
        sigma = math.sqrt(math.log1p(cv * cv))
        rng = rng_for(seed, "measure", profile.device_id, arch_hash(arch))
        draws = rng.lognormal(mean=-0.5 * sigma * sigma, sigma=sigma,
                              size=NOISE_AVERAGING_RUNS)
        lat *= float(draws.mean())
    if lat <= 0:
        raise DeviceError(f"non-positive latency from device {profile.device_id}")
    return lat


def measure_many(profile: DeviceProfile, archs: Sequence[Architecture], seed: int) -> np.ndarray:
    return np.array([measure(profile, a, seed) for a in archs])


# ---------------------------------------------------------------------------
# Archetype families


def _space_dims(space: str) -> tuple[int, int]:
    if space == "cell":
        return len(asp.CELL_OPS), asp.CELL_STAGES
    return len(asp.LAYERWISE_CANDIDATES), asp.LAYERWISE_N_STAGES


def _global_base_costs(space: str) -> np.ndarray:
    """Shared MAC-referenced cost scale all archetypes distort, ms units."""
    n_ops, n_stages = _space_dims(space)
    table = np.zeros((n_ops, n_stages))
    if space == "cell":
        for s, c in enumerate((16, 32, 64)):
            h = 32 // (2 ** s)
            table[asp.CELL_OPS.index("conv1x1"), s] = c * c * h * h / 1e6
            table[asp.CELL_OPS.index("conv3x3"), s] = 9 * c * c * h * h / 1e6
            table[asp.CELL_OPS.index("avgpool3x3"), s] = 0.35 * c * h * h / 1e5
            table[asp.CELL_OPS.index("skip"), s] = 0.15 * c * h * h / 1e5
        return table
    # layerwise: average per-candidate MACs over the positions of each stage
    probe = asp.LayerwiseArchitecture(tuple([asp.LAYERWISE_SKIP] * asp.LAYERWISE_POSITIONS))
    for op, name in enumerate(asp.LAYERWISE_CANDIDATES):
        for pos in range(asp.LAYERWISE_POSITIONS):
            stage = asp.LAYERWISE_STAGE_OF_POSITION[pos]
            choices = list(probe.block_choices)
            choices[pos] = op
            macs = asp.count_macs_layerwise(asp.LayerwiseArchitecture(tuple(choices))) \
                - asp.count_macs_layerwise(probe)
            cin, _, res, _ = asp._LW_SKELETON[pos]
            per = macs / 2e7 if name != "skip" else cin * res * res / 5e6
            table[op, stage] += per
        counts = np.bincount(asp.LAYERWISE_STAGE_OF_POSITION, minlength=n_stages)
        table[op] /= counts
    return table


def _op_is_conv(space: str) -> np.ndarray:
    if space == "cell":
        return np.array([name.startswith("conv") for name in asp.CELL_OPS])
    return np.array([name != "skip" for name in asp.LAYERWISE_CANDIDATES])


def _base_residuals(space: str) -> np.ndarray:
    """How much of each op survives on perfectly parallel hardware."""
    if space == "cell":
        out = {"zeroize": 1.0, "skip": 0.9, "conv1x1": 0.3, "conv3x3": 0.15,
               "avgpool3x3": 0.6}
        return np.array([out[n] for n in asp.CELL_OPS])
    vals = []
    for name in asp.LAYERWISE_CANDIDATES:
        if name == "skip":
            vals.append(0.9)
        else:
            e = asp._LW_ATTRS[name][1]
            vals.append({1: 0.35, 3: 0.22, 6: 0.15}[e])
    return np.array(vals)


# Parameter ranges per platform archetype. "conv_mult" scales compute-bound
# ops, "mem_mult" the memory-bound ones; "jitter" is the lognormal sigma of
# the per-(op, stage) distortion; "gamma" ranges generate the sparse pairwise
# interaction coefficients on (conv, conv) and (conv, memory) pairs.
# "conv_mult"/"mem_mult" ranges are sampled log-uniformly per op: the weight
# of memory-bound ops relative to convs is the main axis separating devices
# of the same platform (on saturated or mobile hardware pooling and skips
# rival convolutions; on CPUs they all but vanish). The layerwise space has a
# rich rank structure, so same-platform devices stay close (like real
# same-platform pairs); the cell space ranks architectures along far fewer
# axes, so its archetypes need wider ranges to keep 12+ devices pairwise
# distinguishable within the correlation band.
DEFAULT_ARCHETYPES: dict[str, dict] = {
    "gpu": dict(parallelism=(0.7, 0.97), overhead=(2.0, 8.0),
                conv_mult=(0.8, 1.25), mem_mult=(2.5, 8.0), jitter=0.2,
                residual_jitter=0.12, dispatch=(0.1, 0.3),
                gamma_conv=(0.0, 0.2), gamma_mem=(0.0, 0.05), batch_variants=3),
    "cpu": dict(parallelism=(0.02, 0.15), overhead=(0.5, 2.0),
                conv_mult=(0.85, 1.3), mem_mult=(0.6, 4.0), jitter=0.18,
                residual_jitter=0.12, dispatch=(0.0, 0.3),
                gamma_conv=(0.0, 0.08), gamma_mem=(0.0, 0.03), batch_variants=1),
    "mobile": dict(parallelism=(0.2, 0.45), overhead=(1.0, 4.0),
                   conv_mult=(2.0, 3.2), mem_mult=(2.0, 10.0), jitter=0.2,
                   residual_jitter=0.13, dispatch=(0.0, 0.2),
                   gamma_conv=(0.9, 1.6), gamma_mem=(-0.1, 0.15), batch_variants=1),
    "accelerator": dict(parallelism=(0.5, 0.8), overhead=(0.5, 3.0),
                        conv_mult=(0.5, 0.9), mem_mult=(3.0, 14.0), jitter=0.3,
                        residual_jitter=0.2, dispatch=(0.0, 0.15),
                        gamma_conv=(1.2, 2.6), gamma_mem=(-0.15, 0.3), batch_variants=1),
}

CELL_ARCHETYPES: dict[str, dict] = {
    "gpu": dict(parallelism=(0.7, 0.97), overhead=(2.0, 8.0),
                conv_mult=(0.7, 1.4), mem_mult=(2.0, 18.0), jitter=0.35,
                dispatch=(0.1, 0.35),
                gamma_conv=(0.0, 0.2), gamma_mem=(0.0, 0.05), batch_variants=3),
    "cpu": dict(parallelism=(0.02, 0.15), overhead=(0.5, 2.0),
                conv_mult=(0.8, 1.4), mem_mult=(0.4, 25.0), jitter=0.3,
                dispatch=(0.05, 0.8),
                gamma_conv=(0.0, 0.08), gamma_mem=(0.0, 0.03), batch_variants=1),
    "mobile": dict(parallelism=(0.2, 0.45), overhead=(1.0, 4.0),
                   conv_mult=(1.5, 4.5), mem_mult=(1.5, 25.0), jitter=0.4,
                   dispatch=(0.0, 0.5),
                   gamma_conv=(0.1, 1.1), gamma_mem=(-0.1, 0.1), batch_variants=1),
    "accelerator": dict(parallelism=(0.5, 0.8), overhead=(0.5, 3.0),
                        conv_mult=(0.4, 0.9), mem_mult=(3.0, 30.0), jitter=0.45,
                        dispatch=(0.0, 0.15),
                        gamma_conv=(0.6, 1.4), gamma_mem=(-0.15, 0.25), batch_variants=1),
}

# per-inference dispatch cost amortizes as the batch grows, while compute
# residuals grow toward their saturated values
_BATCH_DISPATCH_SCALE = {1: 1.0, 32: 0.35, 256: 0.08}
_BATCH_RESIDUAL_SCALE = {1: 0.25, 32: 0.55, 256: 1.0}

# 18 devices for the layerwise space (gpu entries expand into batch 1/32/256
# variants); the cell space's rank structure is narrower, so its default pool
# is smaller to stay calibratable within the correlation band.
DEFAULT_COMPOSITION = (("gpu", 1), ("cpu", 6), ("mobile", 6), ("accelerator", 3))
DEFAULT_COMPOSITION_CELL = (("gpu", 1), ("cpu", 3), ("mobile", 3), ("accelerator", 3))
DEFAULT_CORR_BAND = (0.5, 0.98)


@dataclass
class PoolConfig:
    """Generator settings; archetype parameter ranges may be overridden."""

    space: str = "layerwise"
    composition: tuple | None = None
    archetypes: dict | None = None
    noise_cv: float = 0.02
    probe_size: int = 200
    corr_band: tuple[float, float] = DEFAULT_CORR_BAND
    unseen_platform_archetype: str = "accelerator"
    n_unseen_devices: int = 3

    def __post_init__(self):
        if self.composition is None:
            self.composition = (DEFAULT_COMPOSITION if self.space == "layerwise"
                                else DEFAULT_COMPOSITION_CELL)
        if self.archetypes is None:
            base = DEFAULT_ARCHETYPES if self.space == "layerwise" else CELL_ARCHETYPES
            self.archetypes = {k: dict(v) for k, v in base.items()}

    def planned_devices(self) -> int:
        total = 0
        for archetype, count in self.composition:
            total += count * int(self.archetypes[archetype].get("batch_variants", 1))
        return total

    @classmethod
    def from_dict(cls, raw: dict, space: str | None = None) -> "PoolConfig":
        """Build from plain JSON data; the space must be fixed up front so
        space-dependent defaults resolve before overrides apply."""
        cfg = cls(space=space or raw.get("space", "layerwise"))
        for key, val in raw.items():
            if key == "space":
                continue
            if key == "composition":
                cfg.composition = tuple((str(a), int(n)) for a, n in val)
            elif key == "archetypes":
                for name, params in val.items():
                    if name not in cfg.archetypes:
                        raise DeviceError(f"unknown archetype {name!r}")
                    for pk, pv in params.items():
                        if pk not in cfg.archetypes[name]:
                            raise DeviceError(f"unknown archetype parameter {name}.{pk}")
                        cfg.archetypes[name][pk] = tuple(pv) if isinstance(pv, list) else pv
            elif hasattr(cfg, key):
                setattr(cfg, key, tuple(val) if isinstance(val, list) else val)
            else:
                raise DeviceError(f"unknown pool config key {key!r}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "PoolConfig":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)


@dataclass(frozen=True)
class DevicePool:
    devices: tuple[DeviceProfile, ...]
    splits: dict[str, tuple[str, ...]]
    # generation-time calibration record: probe seed, band, observed extremes
    calibration: dict | None = None

    def __post_init__(self):
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise DeviceError("duplicate device ids in pool")
        labelled = [i for s in self.splits.values() for i in s]
        if len(set(labelled)) != len(labelled):
            raise DeviceError("pool splits overlap")

    def device(self, device_id: str) -> DeviceProfile:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise DeviceError(f"unknown device {device_id!r}")

    def split(self, name: str) -> list[DeviceProfile]:
        return [self.device(i) for i in self.splits.get(name, ())]


_GAMMA_PATTERNS: dict[tuple[str, str, int], np.ndarray] = {}


def _gamma_pattern(space: str, archetype: str, n_ops: int) -> np.ndarray:
    """Fixed per-archetype relative interaction weights, mean ~1."""
    key = (space, archetype, n_ops)
    if key not in _GAMMA_PATTERNS:
        rng = rng_for(9001, "gamma_pattern", space, archetype)
        _GAMMA_PATTERNS[key] = rng.uniform(0.4, 1.6, size=(n_ops, n_ops))
    return _GAMMA_PATTERNS[key]


def _draw_device(space: str, archetype: str, params: dict, noise_cv: float,
                 rng: np.random.Generator,
                 shared_costs: np.ndarray | None = None,
                 parallelism: float | None = None,
                 dispatch_scale: float = 1.0,
                 residual_scale: float = 1.0) -> SyntheticSpec:
    base = _global_base_costs(space)
    is_conv = _op_is_conv(space)
    n_ops = base.shape[0]
    if shared_costs is None:
        def log_uniform(lo, hi, size):
            return np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))

        mult = np.where(is_conv, log_uniform(*params["conv_mult"], n_ops),
                        log_uniform(*params["mem_mult"], n_ops))
        jitter = rng.lognormal(mean=0.0, sigma=params["jitter"], size=base.shape)
        costs = base * mult[:, None] * jitter
        if space == "cell":
            costs[asp.CELL_OPS.index("zeroize"), :] = 0.0
    else:
        # batch variants keep the sibling cost backbone but not its exact
        # values: batch size changes kernel selection and tiling per op
        costs = shared_costs * rng.lognormal(0.0, 0.35, size=shared_costs.shape)
    if parallelism is None:
        parallelism = rng.uniform(*params["parallelism"])
    residual = np.clip(_base_residuals(space) * residual_scale *
                       rng.lognormal(0.0, params.get("residual_jitter", 0.3),
                                     size=n_ops), 0.01, 1.0)
    gammas: dict[tuple[int, int], float] = {}
    lo_c, hi_c = params["gamma_conv"]
    # The relative interaction pattern is a property of the platform's
    # software stack, shared by every device of an archetype; devices differ
    # in overall intensity (plus small per-device wobble).
    if hi_c > 0:
        g_scale = np.exp(rng.uniform(np.log(max(lo_c, 0.05)), np.log(max(hi_c, 0.06))))
        pattern = _gamma_pattern(space, archetype, n_ops)
    else:
        g_scale = 0.0
        pattern = None
    for a in range(n_ops):
        for b in range(n_ops):
            if not (is_conv[a] or is_conv[b]):
                continue
            if is_conv[a] and is_conv[b]:
                g = g_scale * pattern[a, b] * rng.uniform(0.9, 1.1)
            else:
                g = rng.uniform(*params["gamma_mem"])
            if abs(g) > 1e-3:
                gammas[(a, b)] = max(g, MIN_INTERACTION_COEFF)
    return SyntheticSpec(
        op_cost_table=costs,
        parallelism_factor=float(parallelism),
        parallel_residual=residual,
        interaction_coeffs=gammas,
        fixed_overhead=float(rng.uniform(*params["overhead"])),
        noise_cv=noise_cv,
        dispatch_overhead=float(rng.uniform(*params.get("dispatch", (0.0, 0.0)))
                                * dispatch_scale),
    )


def generate_pool(config: PoolConfig, n_devices: int, seed: int,
                  max_retries: int = 100) -> DevicePool:
    """Draw a calibrated heterogeneous pool.

    Devices are accepted one by one; a candidate whose probe-set latency
    ranks correlate outside ``config.corr_band`` with any accepted device is
    redrawn, up to ``max_retries`` times.
    """
    if n_devices < 2:
        raise DeviceError("a pool needs at least 2 devices")
    plan: list[tuple[str, str, dict]] = []  # (device_id, archetype, variant info)
    for archetype, count in config.composition:
        params = config.archetypes[archetype]
        n_variants = int(params.get("batch_variants", 1))
        for i in range(count):
            stratum = {"idx": i, "of": count}
            if n_variants > 1:
                for batch in (1, 32, 256)[:n_variants]:
                    plan.append((f"{archetype}{i}_b{batch}", archetype,
                                 {"base": f"{archetype}{i}", "batch": batch,
                                  **stratum}))
            else:
                plan.append((f"{archetype}{i}", archetype, dict(stratum)))
    if len(plan) < n_devices:
        raise DeviceError(f"composition yields {len(plan)} devices, "
                          f"{n_devices} requested; extend the composition")
    plan = plan[:n_devices]

    probe_seed = int(rng_for(seed, "pool_probe").integers(0, 2 ** 31))
    probe = asp.sample_architectures(config.space, config.probe_size, seed=probe_seed)
    # small margin inside the contractual band
    lo, hi = config.corr_band[0] + 0.02, config.corr_band[1] - 0.003
    accepted: list[DeviceProfile] = []
    probe_lat: list[np.ndarray] = []
    shared: dict[str, np.ndarray] = {}
    for dev_idx, (device_id, archetype, variant) in enumerate(plan):
        params = config.archetypes[archetype]
        for attempt in range(max_retries + 1):
            rng = rng_for(seed, "pool_device", dev_idx, attempt)
            shared_costs, parallelism = None, None
            dispatch_scale = residual_scale = 1.0
            # devices of one archetype take disjoint log-segments of the
            # memory-cost range so same-platform pairs stay distinguishable;
            # late retries fall back to the full range
            draw_params = dict(params)
            if variant.get("of", 1) > 1 and attempt <= max_retries // 2:
                lo_m, hi_m = params["mem_mult"]
                step = (hi_m / lo_m) ** (1.0 / variant["of"])
                draw_params["mem_mult"] = (lo_m * step ** variant["idx"],
                                           lo_m * step ** (variant["idx"] + 1))
            if attempt > max_retries // 2:
                draw_params["jitter"] = params["jitter"] * 1.5
            if "batch" in variant:
                if (variant["base"] in shared and variant["batch"] != 1
                        and attempt <= max_retries * 3 // 5):
                    shared_costs = shared[variant["base"]]
                lo_p, hi_p = params["parallelism"]
                # batch 1 leaves the device underutilized: per-op compute is
                # absorbed by idle parallel units (p high, residuals small)
                # and kernel dispatch dominates; large batches saturate the
                # units (p toward lo, residuals at full strength, dispatch
                # amortized away)
                frac = {1: 1.0, 32: 0.45, 256: 0.0}[variant["batch"]]
                spread = lo_p + frac * (hi_p - lo_p)
                parallelism = spread * rng.uniform(0.98, 1.0)
                dispatch_scale = _BATCH_DISPATCH_SCALE[variant["batch"]] * rng.uniform(0.8, 1.25)
                residual_scale = _BATCH_RESIDUAL_SCALE[variant["batch"]] * rng.uniform(0.85, 1.18)
            spec = _draw_device(config.space, archetype, draw_params, config.noise_cv,
                                rng, shared_costs, parallelism, dispatch_scale,
                                residual_scale)
            prof = DeviceProfile(device_id, config.space, "synthetic",
                                 synthetic=spec, archetype=archetype)
            lats = measure_many(prof, probe, seed=rng_for(seed, "pool_cal", dev_idx)
                                .integers(0, 2 ** 31))
            ok = True
            for other in probe_lat:
                rho = _spearman_np(lats, other)
                if not lo <= rho <= hi:
                    ok = False
                    break
            if ok:
                accepted.append(prof)
                probe_lat.append(lats)
                if variant.get("batch") == 1:
                    shared[variant["base"]] = spec.op_cost_table
                break
        else:
            raise DeviceError(
                f"could not calibrate device {device_id} into the correlation "
                f"band {config.corr_band} after {max_retries} retries; widen the "
                f"band or the archetype parameter ranges")

    split_train, split_unseen, split_platform = [], [], []
    unseen_left = config.n_unseen_devices
    for prof in accepted:
        if prof.archetype == config.unseen_platform_archetype:
            split_platform.append(prof.device_id)
        else:
            split_train.append(prof.device_id)
    # hold out the last device of each archetype as an unseen device
    # Unseen devices are new instances of known platforms, so hold out middle
    # archetype members (their behavior sits inside the trained range). Plain
    # archetypes are exhausted first; batch-variant families only contribute
    # if more holdouts are still needed.
    seen_archetypes = [a for a in dict.fromkeys(p.archetype for p in accepted)
                       if a != config.unseen_platform_archetype]
    plain = [a for a in seen_archetypes
             if int(config.archetypes[a].get("batch_variants", 1)) == 1]
    variant_families = [a for a in seen_archetypes if a not in plain]
    candidates: list[str] = []
    for group in (plain, variant_families):
        for _ in range(4):
            for archetype in group:
                ids = [p.device_id for p in accepted
                       if p.archetype == archetype and p.device_id in split_train
                       and p.device_id not in candidates]
                if len(ids) > 1:
                    candidates.append(ids[len(ids) // 2])
    for held in candidates[:unseen_left]:
        split_train.remove(held)
        split_unseen.append(held)
    all_rhos = [_spearman_np(a, b) for i, a in enumerate(probe_lat)
                for b in probe_lat[i + 1:]]
    return DevicePool(tuple(accepted), {
        "meta_train": tuple(split_train),
        "meta_test_unseen_device": tuple(split_unseen),
        "meta_test_unseen_platform": tuple(split_platform),
    }, calibration={
        "probe_seed": probe_seed,
        "probe_size": config.probe_size,
        "band": list(config.corr_band),
        "rho_min": min(all_rhos),
        "rho_max": max(all_rhos),
    })


def _spearman_np(a: np.ndarray, b: np.ndarray) -> float:
    """Plain rank correlation for calibration; ties get average ranks."""
    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(1, len(x) + 1)
        # average ties
        vals, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
        sums = np.zeros(len(vals))
        np.add.at(sums, inv, r)
        return sums[inv] / counts[inv]

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        raise DeviceError("rank correlation undefined for constant input")
    return float((ra * rb).sum() / denom)


# ---------------------------------------------------------------------------
# Pool serialization


def pool_to_json(pool: DevicePool) -> str:
    devs = []
    for d in pool.devices:
        entry = {"device_id": d.device_id, "space": d.space, "kind": d.kind,
                 "archetype": d.archetype}
        if d.kind == "synthetic":
            s = d.synthetic
            entry["synthetic"] = {
                "op_cost_table": s.op_cost_table.tolist(),
                "parallelism_factor": s.parallelism_factor,
                "parallel_residual": s.parallel_residual.tolist(),
                "interaction_coeffs": [[a, b, g] for (a, b), g in
                                       sorted(s.interaction_coeffs.items())],
                "fixed_overhead": s.fixed_overhead,
                "noise_cv": s.noise_cv,
                "dispatch_overhead": s.dispatch_overhead,
            }
        else:
            entry["table"] = d.table
        devs.append(entry)
    return json.dumps({"format_version": DATASET_FORMAT_VERSION,
                       "devices": devs,
                       "splits": {k: list(v) for k, v in pool.splits.items()},
                       "calibration": pool.calibration},
                      sort_keys=True)


def save_pool(path, pool: DevicePool) -> None:
    with open(path, "w") as fh:
        fh.write(pool_to_json(pool) + "\n")


def load_pool(path) -> DevicePool:
    with open(path) as fh:
        raw = json.load(fh)
    devices = []
    for entry in raw["devices"]:
        if entry["kind"] == "synthetic":
            s = entry["synthetic"]
            spec = SyntheticSpec(
                op_cost_table=np.array(s["op_cost_table"]),
                parallelism_factor=s["parallelism_factor"],
                parallel_residual=np.array(s["parallel_residual"]),
                interaction_coeffs={(int(a), int(b)): float(g)
                                    for a, b, g in s["interaction_coeffs"]},
                fixed_overhead=s["fixed_overhead"],
                noise_cv=s["noise_cv"],
                dispatch_overhead=s.get("dispatch_overhead", 0.0),
            )
            devices.append(DeviceProfile(entry["device_id"], entry["space"],
                                         "synthetic", synthetic=spec,
                                         archetype=entry.get("archetype", "")))
        else:
            devices.append(DeviceProfile(entry["device_id"], entry["space"],
                                         "table", table=entry["table"],
                                         archetype=entry.get("archetype", "")))
    splits = {k: tuple(v) for k, v in raw["splits"].items()}
    return DevicePool(tuple(devices), splits, calibration=raw.get("calibration"))


# ---------------------------------------------------------------------------
# Latency datasets (measurement collections)


class LatencyDataset:
    """(architecture, latency) rows grouped by device."""

    def __init__(self, space: str):
        self.space = space
        self.rows: dict[str, list[tuple[Architecture, float]]] = {}

    def add(self, device_id: str, arch: Architecture, latency_ms: float) -> None:
        if arch.space != self.space:
            raise DeviceError(f"dataset holds {self.space} rows, got {arch.space}")
        self.rows.setdefault(device_id, []).append((arch, latency_ms))

    def device_ids(self) -> list[str]:
        return list(self.rows)

    def device_rows(self, device_id: str) -> list[tuple[Architecture, float]]:
        if device_id not in self.rows:
            raise DeviceError(f"dataset has no rows for device {device_id!r}")
        return self.rows[device_id]

    def n_rows(self) -> int:
        return sum(len(r) for r in self.rows.values())


def build_dataset(pool: DevicePool, archs: Sequence[Architecture],
                  samples_per_device: int, seed: int, path=None,
                  workers: int = 1) -> LatencyDataset:
    """Measure per-device architecture subsets; optionally write JSON lines.

    Per-device subsets are drawn without replacement. Measurement may shard
    by device across ``workers`` threads; the output row order is
    device-major then sample-index regardless, and each measurement's seed
    depends only on its (device, sample) position, so worker count never
    changes the data.
    """
    if samples_per_device > len(archs):
        raise DeviceError(f"samples_per_device={samples_per_device} exceeds the "
                          f"{len(archs)} available architectures")
    space = pool.devices[0].space

    def rows_for(d_idx: int) -> list[tuple[Architecture, float]]:
        dev = pool.devices[d_idx]
        rng = rng_for(seed, "dataset_subset", d_idx)
        idxs = rng.choice(len(archs), size=samples_per_device, replace=False)
        return [(archs[int(a_idx)],
                 measure(dev, archs[int(a_idx)],
                         seed=rng_for(seed, "dataset_measure", d_idx, s_idx)
                         .integers(0, 2 ** 31)))
                for s_idx, a_idx in enumerate(idxs)]

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            per_device = list(pool_exec.map(rows_for, range(len(pool.devices))))
    else:
        per_device = [rows_for(i) for i in range(len(pool.devices))]

    ds = LatencyDataset(space)
    for dev, rows in zip(pool.devices, per_device):
        for arch, lat in rows:
            ds.add(dev.device_id, arch, lat)
    if path is not None:
        save_dataset(path, ds)
    return ds


def save_dataset(path, ds: LatencyDataset) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(json.dumps({"format_version": DATASET_FORMAT_VERSION,
                                 "space": ds.space,
                                 "edge_order": list(map(list, asp.CELL_EDGES))}) + "\n")
            for device_id in ds.rows:
                for arch, lat in ds.rows[device_id]:
                    fh.write(json.dumps({"device_id": device_id,
                                         "arch": arch_to_obj(arch),
                                         "latency_ms": lat}) + "\n")
    except OSError as e:
        raise DeviceError(f"cannot write dataset to {path}: {e}") from e


def load_dataset(path) -> LatencyDataset:
    try:
        fh = open(path)
    except OSError as e:
        raise DeviceError(f"cannot read dataset from {path}: {e}") from e
    with fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise DeviceError(f"{path}: unsupported dataset version")
        ds = LatencyDataset(header["space"])
        for ln, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            row = json.loads(line)
            lat = float(row["latency_ms"])
            if lat < 0:
                raise DeviceError(f"{path}:{ln}: negative latency {lat}")
            ds.add(row["device_id"], arch_from_obj(row["arch"]), lat)
    return ds


def load_table(path) -> dict[str, DeviceProfile]:
    """Read an exported latency table into per-device table profiles.

    Accepts the JSON-lines dataset format or CSV with columns
    device_id, space, ops (op indices as a digit string), latency_ms.
    """
    rows: list[tuple[int, str, Architecture, float]] = []
    if str(path).endswith(".csv"):
        with open(path, newline="") as fh:
            for ln, rec in enumerate(csv.DictReader(fh), start=2):
                try:
                    ops = tuple(int(c) for c in rec["ops"])
                    arch = arch_from_obj({"space": rec["space"], "ops": list(ops)})
                    rows.append((ln, rec["device_id"], arch, float(rec["latency_ms"])))
                except (KeyError, ValueError, asp.SpaceError) as e:
                    raise DeviceError(f"{path}:{ln}: {e}") from e
    else:
        with open(path) as fh:
            first = fh.readline()
            start = 2
            rec0 = json.loads(first)
            if "device_id" in rec0:  # headerless file: first line is a row
                fh.seek(0)
                start = 1
            for ln, line in enumerate(fh, start=start):
                if not line.strip():
                    continue
                rec = json.loads(line)
                rows.append((ln, rec["device_id"], arch_from_obj(rec["arch"]),
                             float(rec["latency_ms"])))
    tables: dict[str, dict[str, float]] = {}
    spaces: dict[str, str] = {}
    for ln, device_id, arch, lat in rows:
        if lat < 0:
            raise DeviceError(f"{path}:{ln}: negative latency {lat} for "
                              f"device {device_id}")
        key = arch_hash(arch)
        table = tables.setdefault(device_id, {})
        if key in table and table[key] != lat:
            raise DeviceError(f"{path}:{ln}: duplicate row for device {device_id} "
                              f"with conflicting latency ({table[key]} vs {lat})")
        table[key] = lat
        spaces[device_id] = arch.space
    return {device_id: DeviceProfile(device_id, spaces[device_id], "table",
                                     table=table)
            for device_id, table in tables.items()}
