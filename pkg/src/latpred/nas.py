"""Latency-constrained architecture search harness.

A searcher pairs any latency predictor (adapted meta-predictor, oracle,
FLOPs proxy) with an accuracy table and returns the highest-accuracy
architecture whose *predicted* latency fits the constraint. The true latency
of the returned architecture is measured and reported separately; it may
exceed the constraint when the predictor errs.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import archspace as asp
from .archspace import Architecture, arch_from_obj, arch_hash, arch_to_obj
from .devicesim import DeviceProfile, measure
from .metalearn import true_latency
from .seeds import derive_seed, rng_for


class SearchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Accuracy tables


class AccuracyTable:
    """arch -> accuracy (%). Backed by a file or a synthetic generator."""

    def __init__(self, space: str, table: dict[str, float] | None = None,
                 generator=None):
        if table is None and generator is None:
            raise SearchError("accuracy table needs stored values or a generator")
        self.space = space
        self.table = table
        self.generator = generator

    def accuracy(self, arch: Architecture) -> float:
        if arch.space != self.space:
            raise SearchError(f"accuracy table covers {self.space}, got {arch.space}")
        if self.table is not None:
            key = arch_hash(arch)
            if key not in self.table:
                raise SearchError(f"no stored accuracy for architecture {arch.ops}")
            return self.table[key]
        acc = self.generator(arch)
        if not 0.0 <= acc <= 100.0:
            raise SearchError(f"accuracy {acc} outside [0, 100]")
        return acc

    def batch(self, archs: Sequence[Architecture]) -> np.ndarray:
        return np.array([self.accuracy(a) for a in archs])


ACC_NOISE_SD = 0.3


def synthetic_accuracy_table(space: str, seed: int = 0) -> AccuracyTable:
    """Smooth accuracy surface: per-op bonuses minus a congestion penalty on
    over-heavy networks, plus small Gaussian measurement noise."""

    if space == "cell":
        bonus = {"zeroize": 0.0, "skip": 0.8, "conv1x1": 3.0, "conv3x3": 4.5,
                 "avgpool3x3": 0.8}

        def gen(arch: Architecture) -> float:
            names = [asp.CELL_OPS[o] for o in arch.edge_ops]
            n_conv = sum(n.startswith("conv") for n in names)
            acc = 62.0 + sum(bonus[n] for n in names) - 0.55 * n_conv ** 2
            acc += rng_for(seed, "acc", arch_hash(arch)).normal(0.0, ACC_NOISE_SD)
            return float(np.clip(acc, 0.0, 100.0))
    else:
        bonus = {"k3_e1": 0.30, "k3_e1_g2": 0.25, "k3_e3": 0.55, "k3_e6": 0.80,
                 "k5_e1": 0.35, "k5_e1_g2": 0.30, "k5_e3": 0.65, "k5_e6": 0.90,
                 "skip": 0.05}

        def gen(arch: Architecture) -> float:
            names = [asp.LAYERWISE_CANDIDATES[c] for c in arch.block_choices]
            n_heavy = sum(n.endswith("e6") for n in names)
            acc = 55.0 + sum(bonus[n] for n in names) - 0.05 * n_heavy ** 2
            acc += rng_for(seed, "acc", arch_hash(arch)).normal(0.0, ACC_NOISE_SD)
            return float(np.clip(acc, 0.0, 100.0))

    return AccuracyTable(space, generator=gen)


def load_accuracy_table(path, space: str | None = None) -> AccuracyTable:
    table: dict[str, float] = {}
    found_space = space
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            arch = arch_from_obj(row["arch"])
            acc = float(row["accuracy"])
            if not 0.0 <= acc <= 100.0:
                raise SearchError(f"{path}:{ln}: accuracy {acc} outside [0, 100]")
            table[arch_hash(arch)] = acc
            found_space = arch.space
    if not table:
        raise SearchError(f"{path}: empty accuracy table")
    return AccuracyTable(found_space, table=table)


def save_accuracy_table(path, space: str, rows: Iterable[tuple[Architecture, float]]) -> None:
    with open(path, "w") as fh:
        for arch, acc in rows:
            fh.write(json.dumps({"arch": arch_to_obj(arch), "accuracy": acc}) + "\n")


# ---------------------------------------------------------------------------
# Latency predictor adapters


class FlopsProxyPredictor:
    """MAC counts affinely calibrated to milliseconds on a few probe points."""

    def __init__(self, device: DeviceProfile, probe_archs: Sequence[Architecture],
                 seed: int = 0):
        macs = np.array([asp.arch_macs(a) for a in probe_archs], dtype=float)
        lats = np.array([measure(device, a, seed=derive_seed(seed, "flops_cal", i))
                         for i, a in enumerate(probe_archs)])
        A = np.column_stack([macs, np.ones_like(macs)])
        self.coef, _, _, _ = np.linalg.lstsq(A, lats, rcond=None)
        self.n_samples = len(probe_archs)

    def predict_ms(self, archs: Sequence[Architecture]) -> np.ndarray:
        macs = np.array([asp.arch_macs(a) for a in archs], dtype=float)
        return macs * self.coef[0] + self.coef[1]


# ---------------------------------------------------------------------------
# Search results


@dataclass(frozen=True)
class SearchResult:
    found: bool
    constraint_ms: float
    arch: Architecture | None = None
    predicted_latency_ms: float | None = None
    true_latency_ms: float | None = None
    accuracy: float | None = None
    wall_seconds: float = 0.0
    predictor_samples: int | None = None
    evaluations: int = 0

    def to_json_obj(self) -> dict:
        obj = {"found": self.found, "constraint_ms": self.constraint_ms,
               "predicted_latency_ms": self.predicted_latency_ms,
               "true_latency_ms": self.true_latency_ms,
               "accuracy": self.accuracy, "wall_seconds": self.wall_seconds,
               "predictor_samples": self.predictor_samples,
               "evaluations": self.evaluations}
        obj["arch"] = arch_to_obj(self.arch) if self.arch else None
        return obj


def _finish(found_arch, pred_ms, acc, constraint_ms, device, t0, predictor,
            evaluations) -> SearchResult:
    samples = getattr(predictor, "n_samples", None)
    if found_arch is None:
        return SearchResult(False, constraint_ms, wall_seconds=time.perf_counter() - t0,
                            predictor_samples=samples, evaluations=evaluations)
    true_ms = true_latency(device, found_arch) if device is not None else None
    return SearchResult(True, constraint_ms, found_arch, float(pred_ms),
                        true_ms, float(acc), time.perf_counter() - t0,
                        samples, evaluations)


def exhaustive_search(predictor, acc_table: AccuracyTable, constraint_ms: float,
                      device: DeviceProfile | None = None,
                      archs: Sequence[Architecture] | None = None) -> SearchResult:
    """Scan an enumerable space for the best accuracy under the constraint.

    Ties break toward lower predicted latency, then lexicographic ops.
    """
    t0 = time.perf_counter()
    if archs is None:
        if acc_table.space != "cell":
            raise SearchError("exhaustive search needs an enumerable space")
        archs = list(asp.enumerate_cells())
    preds = np.asarray(predictor.predict_ms(archs), dtype=float)
    feasible = np.where(preds <= constraint_ms)[0]
    best = None  # (neg accuracy, predicted, ops) for lexicographic min
    for i in feasible:
        arch = archs[int(i)]
        key = (-acc_table.accuracy(arch), preds[int(i)], arch.ops)
        if best is None or key < best[0]:
            best = (key, arch)
    if best is None:
        return _finish(None, None, None, constraint_ms, device, t0, predictor,
                       len(archs))
    (neg_acc, pred_ms, _), arch = best
    return _finish(arch, pred_ms, -neg_acc, constraint_ms, device, t0,
                   predictor, len(archs))


EVOLUTION_POPULATION = 64
EVOLUTION_TOURNAMENT = 8


def _mutate(arch: Architecture, rng: np.random.Generator,
            positions: Sequence[int] | None = None) -> Architecture:
    ops = list(arch.ops)
    pos = (int(rng.integers(0, len(ops))) if positions is None
           else int(positions[int(rng.integers(0, len(positions)))]))
    n_choices = len(asp.CELL_OPS) if arch.space == "cell" else len(asp.LAYERWISE_CANDIDATES)
    new_op = int(rng.integers(0, n_choices - 1))
    if new_op >= ops[pos]:
        new_op += 1  # uniform over the other choices
    ops[pos] = new_op
    return (asp.CellArchitecture(tuple(ops)) if arch.space == "cell"
            else asp.LayerwiseArchitecture(tuple(ops)))


def evolutionary_search(space: str, predictor, acc_table: AccuracyTable,
                        constraint_ms: float, budget: int,
                        population_size: int = EVOLUTION_POPULATION,
                        tournament_size: int = EVOLUTION_TOURNAMENT,
                        seed: int = 0,
                        device: DeviceProfile | None = None,
                        candidates: Sequence[Architecture] | None = None,
                        positions: Sequence[int] | None = None) -> SearchResult:
    """Regularized evolution under a predicted-latency constraint.

    ``budget`` counts evaluated candidates (latency prediction + accuracy
    lookup). Children violating the constraint are rejected and do not enter
    the population. ``candidates`` seeds the initial population and
    ``positions`` restricts mutation, which together define a sub-space.
    """
    if budget < population_size:
        raise SearchError(f"budget {budget} below population size {population_size}")
    t0 = time.perf_counter()
    rng = rng_for(seed, "evolution")
    evals = 0
    population: list[tuple[Architecture, float, float]] = []  # (arch, pred, acc)
    best: tuple[float, float, tuple] | None = None
    best_entry = None

    def consider(arch) -> None:
        nonlocal best, best_entry, evals
        evals += 1
        pred_ms = float(predictor.predict_ms([arch])[0])
        if pred_ms > constraint_ms:
            return
        acc = acc_table.accuracy(arch)
        population.append((arch, pred_ms, acc))
        key = (-acc, pred_ms, arch.ops)
        if best is None or key < best:
            best, best_entry = key, (arch, pred_ms, acc)

    sampler_seed = derive_seed(seed, "evolution_init")
    pool_idx = 0
    init_pool = (list(candidates) if candidates is not None
                 else asp.sample_architectures(space, min(budget, 4 * population_size),
                                               seed=sampler_seed))
    while len(population) < population_size and evals < budget:
        if pool_idx >= len(init_pool):
            extra = asp.sample_architectures(
                space, population_size, seed=derive_seed(seed, "evolution_more", evals))
            init_pool.extend(extra)
        consider(init_pool[pool_idx])
        pool_idx += 1
    while evals < budget and population:
        k = min(tournament_size, len(population))
        contenders = rng.choice(len(population), size=k, replace=False)
        parent = max((population[int(i)] for i in contenders), key=lambda e: e[2])
        consider(_mutate(parent[0], rng, positions))
        if len(population) > population_size:
            population.pop(0)  # age out the oldest
    if best_entry is None:
        return _finish(None, None, None, constraint_ms, device, t0, predictor, evals)
    arch, pred_ms, acc = best_entry
    return _finish(arch, pred_ms, acc, constraint_ms, device, t0, predictor, evals)


# ---------------------------------------------------------------------------
# Pareto sweeps


def true_pareto_frontier(device: DeviceProfile, acc_table: AccuracyTable,
                         archs: Sequence[Architecture] | None = None,
                         seed: int = 0) -> list[tuple[float, float]]:
    """(latency, accuracy) points on the measured-latency Pareto frontier."""
    if archs is None:
        archs = list(asp.enumerate_cells())
    lats = np.array([true_latency(device, a, seed) for a in archs])
    accs = acc_table.batch(archs)
    order = np.argsort(lats, kind="stable")
    frontier = []
    best_acc = -np.inf
    for i in order:
        if accs[i] > best_acc:
            best_acc = accs[i]
            frontier.append((float(lats[i]), float(accs[i])))
    return frontier


def pareto_sweep(predictor, acc_table: AccuracyTable, device: DeviceProfile,
                 constraints: Sequence[float], seed: int = 0,
                 searcher=None) -> tuple[list[SearchResult], list[tuple[float, float]]]:
    """One search per constraint plus the oracle frontier for overlay."""
    searcher = searcher or (lambda c: exhaustive_search(predictor, acc_table, c,
                                                        device=device))
    results = [searcher(c) for c in constraints]
    frontier = true_pareto_frontier(device, acc_table, seed=seed)
    return results, frontier


SWEEP_CSV_HEADER = ["constraint_ms", "found", "predicted_latency_ms",
                    "true_latency_ms", "accuracy", "wall_seconds"]


def write_sweep_csv(path, results: Sequence[SearchResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in results:
            writer.writerow([r.constraint_ms, int(r.found), r.predicted_latency_ms,
                             r.true_latency_ms, r.accuracy, f"{r.wall_seconds:.3f}"])


def write_frontier_csv(path, frontier: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_latency_ms", "accuracy"])
        for lat, acc in frontier:
            writer.writerow([lat, acc])
