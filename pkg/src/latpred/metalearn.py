"""Episodic meta-training, few-shot adaptation, evaluation, and baselines.

Meta-training minimizes the query loss reached after the inner loop: each
episode modulates the shared initialization with the device embedding, takes
T gradient steps on the support set with learned per-parameter rates, and
scores the adapted parameters on the query set. The mean query loss over a
meta-batch is backpropagated through the whole chain (exact second-order by
default, optionally first-order) and applied with Adam to the shared
parameters, the modulator, and the inner learning rates together.

Latency targets are regressed in each device's standardized reference scale
(the same [0, 1] anchoring as its embedding) and mapped back to milliseconds
only at the prediction API.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import archspace as asp
from . import nnet
from . import predictor as pred
from .archspace import Architecture, ReferenceSet, arch_key, arch_macs
from .devicesim import DeviceProfile, DevicePool, LatencyDataset, measure
from .embedding import (DeviceEmbedding, Episode, build_meta_batch,
                        compute_embedding, make_embedding_provider)
from .nnet import AdamState, ParamSet, Tensor, adam_step, grad, mse_loss
from .predictor import ModelConfig, encode_batch, forward, inner_param_names, modulate
from .seeds import derive_seed, rng_for

DEFAULT_META_LR = {"cell": 1e-4, "layerwise": 1e-3}


class MetaLearnError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class MetaTrainConfig:
    meta_batch: int = 8
    inner_steps: int = 2
    episodes: int = 2000
    meta_lr: float | None = None  # per-space default when None
    k_shot: int = 10
    query_size: int = 128
    seed: int = 0
    first_order: bool = False
    inner_scope: str = "all"  # "all" updates every f parameter, "header" only the head
    use_modulator: bool = True
    condition_on_device: bool = True
    refresh_embeddings: bool = True
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.inner_steps < 0:
            raise MetaLearnError("inner_steps must be >= 0")
        if self.episodes < 1:
            raise MetaLearnError("episodes must be >= 1")

    def resolved_meta_lr(self, space: str) -> float:
        return self.meta_lr if self.meta_lr is not None else DEFAULT_META_LR[space]


@dataclass
class LogRow:
    iteration: int
    mean_support_loss: float
    mean_query_loss: float
    wall_ms: float


# ---------------------------------------------------------------------------
# Inner loop


def inner_adapt(config: ModelConfig, params: Mapping[str, Tensor],
                support_x, support_y_std, v_h_input, T: int,
                scope: str = "all", use_modulator: bool = True,
                create_graph: bool = False,
                first_order: bool = False,
                theta0: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Modulated initialization followed by T recorded gradient steps.

    ``support_y_std`` must already be in the device's standardized scale.
    Returns the adapted parameter mapping; with ``create_graph`` the chain
    stays differentiable w.r.t. the shared parameters, the modulator, and
    the learning rates. A caller that batches the modulator across episodes
    passes the precomputed ``theta0``.
    """
    if theta0 is not None:
        theta = theta0
    elif use_modulator:
        theta = modulate(config, params, v_h_input)
    else:
        theta = {n: params[n] for n in params
                 if not str(n).startswith(("mod.", "alpha."))}
    if T == 0:
        return theta
    names = inner_param_names(config, scope)
    y = nnet.as_tensor(np.asarray(support_y_std, dtype=float))
    for _ in range(T):
        out = forward(config, theta, support_x, v_h_input)
        loss = mse_loss(out, y)
        grads = grad(loss, [theta[n] for n in names],
                     create_graph=create_graph and not first_order)
        theta = dict(theta)
        for n, g in zip(names, grads):
            theta[n] = nnet.sub(theta[n], nnet.mul(params[f"alpha.{n}"], g))
    return theta


# ---------------------------------------------------------------------------
# Meta-training


class _EncodingCache:
    """Architecture -> encoder input row, shared across episodes."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.cache: dict[Architecture, np.ndarray] = {}

    def batch(self, archs: Sequence[Architecture]) -> np.ndarray:
        rows = []
        for a in archs:
            row = self.cache.get(a)
            if row is None:
                row = encode_batch(self.config, [a])[0]
                self.cache[a] = row
            rows.append(row)
        return np.stack(rows)


def _episode_tensors(config: ModelConfig, episode: Episode, enc: _EncodingCache,
                     condition: bool):
    xs = enc.batch([a for a, _ in episode.support]) if episode.support else None
    ys = episode.v_h.standardize([lat for _, lat in episode.support]) if episode.support else None
    xq = enc.batch([a for a, _ in episode.query]) if episode.query else None
    yq = episode.v_h.standardize([lat for _, lat in episode.query]) if episode.query else None
    v_in = episode.v_h.values if condition else np.zeros(config.device_input_dim)
    return xs, ys, xq, yq, v_in


def trainable_names(params: ParamSet, cfg: MetaTrainConfig) -> list[str]:
    names = []
    for n in params.names():
        g = params.group(n)
        if g == "modulator" and not cfg.use_modulator:
            continue
        if g == "alpha" and cfg.inner_steps == 0:
            continue
        names.append(n)
    return names


def meta_train(config: ModelConfig, params: ParamSet, dataset: LatencyDataset,
               pool: DevicePool, refset: ReferenceSet, cfg: MetaTrainConfig,
               start_iteration: int = 0, adam_state: AdamState | None = None,
               checkpoint_cb: Callable[[int, ParamSet, AdamState], None] | None = None,
               log_cb: Callable[[LogRow], None] | None = None,
               ) -> tuple[ParamSet, list[LogRow]]:
    """Run the outer loop for cfg.episodes iterations; params update in place.

    A non-finite loss aborts with the last finite state checkpointed (Adam is
    only applied to validated gradients, so the current parameters are that
    state). Fixed seeds and a single worker reproduce the log bit-for-bit.
    """
    train_ids = list(pool.splits.get("meta_train", ()))
    if not train_ids:
        raise MetaLearnError("pool has no meta_train devices")
    devices = {d.device_id: d for d in pool.devices}
    provider = make_embedding_provider(devices, refset, refresh=cfg.refresh_embeddings)
    enc = _EncodingCache(config)
    adam = adam_state or AdamState()
    lr = cfg.resolved_meta_lr(config.space)
    names = trainable_names(params, cfg)
    tensors = params.tensors()
    log: list[LogRow] = []

    for it in range(start_iteration, cfg.episodes):
        t0 = time.perf_counter()
        batch_seed = derive_seed(cfg.seed, "meta_iter", it)
        episodes = build_meta_batch(dataset, train_ids, provider, cfg.meta_batch,
                                    cfg.k_shot, cfg.query_size, seed=batch_seed)
        total_q: Tensor | None = None
        support_losses = []
        try:
            ep_tensors = [_episode_tensors(config, ep, enc, cfg.condition_on_device)
                          for ep in episodes]
            theta0s: list[dict[str, Tensor] | None] = [None] * len(episodes)
            if cfg.use_modulator:
                # one batched modulator pass for the whole meta-batch
                nw, nb = config.header_param_counts()
                z_all = pred.modulator_output_batch(
                    config, tensors, np.stack([t[4] for t in ep_tensors]))
                theta0s = [pred.apply_modulation(
                    config, tensors,
                    nnet.reshape(nnet.narrow(z_all, 0, i, 1), (nw + nb,)))
                    for i in range(len(episodes))]
            for ep_idx, episode in enumerate(episodes):
                xs, ys, xq, yq, v_in = ep_tensors[ep_idx]
                theta = inner_adapt(config, tensors, xs, ys, v_in,
                                    cfg.inner_steps if xs is not None else 0,
                                    cfg.inner_scope, cfg.use_modulator,
                                    create_graph=True,
                                    first_order=cfg.first_order,
                                    theta0=theta0s[ep_idx])
                if xs is not None:
                    s_loss = mse_loss(forward(config, theta, xs, v_in),
                                      nnet.constant(ys))
                    support_losses.append(s_loss.item())
                q_loss = mse_loss(forward(config, theta, xq, v_in),
                                  nnet.constant(yq))
                total_q = q_loss if total_q is None else nnet.add(total_q, q_loss)
            mean_q = nnet.mul(total_q, 1.0 / len(episodes))
            grads = grad(mean_q, [tensors[n] for n in names])
            adam_step({n: tensors[n] for n in names},
                      dict(zip(names, grads)), adam, lr=lr)
        except nnet.NonFiniteError as e:
            if checkpoint_cb:
                checkpoint_cb(it, params, adam)
            raise MetaLearnError(
                f"non-finite loss at iteration {it} "
                f"(devices {[e_.device_id for e_ in episodes]}): {e}") from e
        row = LogRow(it, float(np.mean(support_losses)) if support_losses else math.nan,
                     mean_q.item(), (time.perf_counter() - t0) * 1e3)
        log.append(row)
        if log_cb:
            log_cb(row)
        if checkpoint_cb and ((it + 1) % cfg.checkpoint_every == 0
                              or it + 1 == cfg.episodes):
            checkpoint_cb(it + 1, params, adam)
    return params, log


# ---------------------------------------------------------------------------
# Resumable training state


def save_train_state(path, config: ModelConfig, params: ParamSet,
                     adam: AdamState, iteration: int) -> None:
    """Checkpoint with optimizer moments so a run can resume bit-for-bit."""
    extra = {"model": config.manifest(), "iteration": iteration, "adam_t": adam.t}
    nnet.save_params(path, params, extra_manifest=extra)
    moments = {}
    for n, m in adam.m.items():
        moments[f"m::{n}"] = m
        moments[f"v::{n}"] = adam.v[n]
    np.savez(str(path) + ".opt", **moments)


def load_train_state(path) -> tuple[ModelConfig, ParamSet, AdamState, int]:
    arrays, manifest = nnet.load_params(path)
    config = ModelConfig.from_manifest(manifest["model"])
    params = pred.init_params(config, seed=0)
    params.load_values(arrays)
    adam = AdamState()
    adam.t = int(manifest.get("adam_t", 0))
    opt_path = str(path) + ".opt.npz"
    try:
        with np.load(opt_path) as npz:
            for key in npz.files:
                kind, name = key.split("::", 1)
                if kind == "m":
                    adam.m[name] = npz[key]
                    adam._scratch[name] = np.empty_like(npz[key])
                else:
                    adam.v[name] = npz[key]
    except FileNotFoundError:
        adam = AdamState()
    return config, params, adam, int(manifest.get("iteration", 0))


# ---------------------------------------------------------------------------
# Few-shot adaptation at meta-test


@dataclass
class AdaptedPredictor:
    """Device-optimized parameters; never touches the meta-parameters."""

    config: ModelConfig
    params: dict[str, Tensor]  # detached copies
    embedding: DeviceEmbedding
    device_id: str
    n_samples: int
    adapt_seconds: float
    support_keys: frozenset[str] = field(default_factory=frozenset)
    conditioned: bool = True

    def _v_input(self):
        return (self.embedding.values if self.conditioned
                else np.zeros(self.config.device_input_dim))

    def predict_standardized(self, archs: Sequence[Architecture]) -> np.ndarray:
        x = encode_batch(self.config, archs)
        return forward(self.config, self.params, x, self._v_input()).data

    def predict_ms(self, archs: Sequence[Architecture]) -> np.ndarray:
        return self.embedding.destandardize(self.predict_standardized(archs))


def adapt(config: ModelConfig, params: ParamSet, device: DeviceProfile,
          refset: ReferenceSet, n_samples: int = 10, T: int = 2, seed: int = 0,
          dataset: LatencyDataset | None = None, scope: str = "all",
          use_modulator: bool = True, condition: bool = True) -> AdaptedPredictor:
    """Fingerprint the device, measure a few support samples, adapt.

    Support rows come from ``dataset`` when given (e.g. an exported table),
    otherwise n_samples fresh architectures are drawn and measured.
    """
    if n_samples < 1:
        raise MetaLearnError("adaptation needs at least one support sample")
    t0 = time.perf_counter()
    emb = compute_embedding(device, refset, seed=derive_seed(seed, "adapt_embed"))
    if dataset is not None:
        rows = dataset.device_rows(device.device_id)
        if len(rows) < n_samples:
            raise MetaLearnError(f"device {device.device_id} has {len(rows)} rows, "
                                 f"adaptation wants {n_samples}")
        idx = rng_for(seed, "adapt_support", device.device_id).choice(
            len(rows), size=n_samples, replace=False)
        support = [rows[int(i)] for i in idx]
    else:
        archs = asp.sample_architectures(device.space, n_samples,
                                         seed=derive_seed(seed, "adapt_archs"))
        support = [(a, measure(device, a, seed=derive_seed(seed, "adapt_measure", i)))
                   for i, a in enumerate(archs)]
    xs = encode_batch(config, [a for a, _ in support])
    ys = emb.standardize([lat for _, lat in support])
    v_in = emb.values if condition else np.zeros(config.device_input_dim)
    theta = inner_adapt(config, params.tensors(), xs, ys, v_in, T, scope,
                        use_modulator, create_graph=False)
    detached = {n: t.detach() for n, t in theta.items()}
    return AdaptedPredictor(config, detached, emb, device.device_id, n_samples,
                            time.perf_counter() - t0,
                            frozenset(arch_key(a) for a, _ in support),
                            conditioned=condition)


# ---------------------------------------------------------------------------
# Metrics


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1, dtype=float)
    vals, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(len(vals))
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def spearman(pred, truth) -> float:
    """Rank correlation with average ranks for ties."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise MetricError(f"spearman needs equal-length vectors, got "
                          f"{pred.shape} and {truth.shape}")
    if len(pred) < 2:
        raise MetricError("spearman needs at least 2 points")
    if np.all(pred == pred[0]) or np.all(truth == truth[0]):
        raise MetricError("spearman undefined for constant input")
    ra, rb = _average_ranks(pred), _average_ranks(truth)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))


def evaluate(predictor, device: DeviceProfile, test_archs: Sequence[Architecture],
             seed: int = 0) -> dict:
    """Rank correlation of a predictor against measured test latencies.

    ``predictor`` is anything with ``predict_ms``; support/test disjointness
    is enforced when the predictor carries its support keys.
    """
    support_keys = getattr(predictor, "support_keys", frozenset())
    overlap = [a for a in test_archs if arch_key(a) in support_keys]
    if overlap:
        raise MetricError(f"{len(overlap)} test architectures overlap the "
                          f"adaptation support set")
    truth = np.array([measure(device, a, seed=derive_seed(seed, "eval", i))
                      for i, a in enumerate(test_archs)])
    estimate = np.asarray(predictor.predict_ms(test_archs), dtype=float)
    return {
        "device_id": device.device_id,
        "rho": spearman(estimate, truth),
        "n_test": len(test_archs),
        "n_support": getattr(predictor, "n_samples", None),
        "adapt_seconds": getattr(predictor, "adapt_seconds", None),
    }


# ---------------------------------------------------------------------------
# Baselines


def true_latency(device: DeviceProfile, arch: Architecture, seed: int = 0) -> float:
    """Canonical ground-truth draw for an architecture: the measurement seed
    is keyed by the architecture itself, so every consumer (oracle
    predictions, search-result reporting, frontier scans) sees one value."""
    return measure(device, arch, seed=derive_seed(seed, "truth", arch_key(arch)))


class OraclePredictor:
    """Predicts by measuring (reference upper bound / search oracle)."""

    def __init__(self, device: DeviceProfile, seed: int = 0):
        self.device = device
        self.seed = seed

    def predict_ms(self, archs: Sequence[Architecture]) -> np.ndarray:
        return np.array([true_latency(self.device, a, self.seed) for a in archs])


def baseline_flops(test_archs: Sequence[Architecture], device: DeviceProfile,
                   seed: int = 0) -> float:
    """Rank correlation of analytic MAC counts with measured latency."""
    truth = [measure(device, a, seed=derive_seed(seed, "eval", i))
             for i, a in enumerate(test_archs)]
    return spearman([arch_macs(a) for a in test_archs], truth)


def _op_count_features(archs: Sequence[Architecture]) -> np.ndarray:
    # cell stages all share one composition, so per-stage columns would be
    # exact copies; totals carry the same information at full rank. No
    # intercept: counts sum to a constant, so it would be collinear (a fixed
    # overhead folds into the per-op costs exactly).
    if archs and isinstance(archs[0], asp.CellArchitecture):
        feats = [asp.op_stage_counts(a).sum(axis=1) for a in archs]
    else:
        feats = [asp.op_stage_counts(a).reshape(-1) for a in archs]
    return np.stack(feats)


def baseline_layerwise(train_rows: Sequence[tuple[Architecture, float]],
                       test_archs: Sequence[Architecture],
                       device: DeviceProfile, seed: int = 0) -> float:
    """Least-squares per-op cost table, prediction = sum of fitted costs."""
    if not train_rows:
        raise MetricError("layer-wise baseline needs training rows")
    X = _op_count_features([a for a, _ in train_rows])
    y = np.array([lat for _, lat in train_rows])
    sol, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        warnings.warn(f"layer-wise fit is rank-deficient ({rank}/{X.shape[1]}); "
                      "using the pseudo-inverse solution", RuntimeWarning)
    preds = _op_count_features(test_archs) @ sol
    truth = [measure(device, a, seed=derive_seed(seed, "eval", i))
             for i, a in enumerate(test_archs)]
    return spearman(preds, truth)


SCRATCH_MAX_STEPS = 2000
SCRATCH_PATIENCE = 200


def baseline_scratch(config: ModelConfig, train_rows: Sequence[tuple[Architecture, float]],
                     test_archs: Sequence[Architecture], device: DeviceProfile,
                     embedding: DeviceEmbedding | None = None, seed: int = 0,
                     lr: float = 1e-3) -> float:
    """Same network trained from random init on the device's samples alone.

    Full-batch Adam until the training loss stops improving for
    SCRATCH_PATIENCE steps (or SCRATCH_MAX_STEPS).
    """
    if not train_rows:
        raise MetricError("scratch baseline needs training rows")
    if embedding is None:
        lats = np.array([lat for _, lat in train_rows])
        if lats.max() <= lats.min():
            raise MetricError("scratch baseline needs varying training latencies")
        embedding = DeviceEmbedding(device.device_id,
                                    np.zeros(config.device_input_dim),
                                    raw_min=float(lats.min()), raw_max=float(lats.max()))
    params = pred.init_params(config, seed=derive_seed(seed, "scratch_init"))
    tensors = params.tensors()
    names = inner_param_names(config, "all")
    x = encode_batch(config, [a for a, _ in train_rows])
    y = nnet.constant(embedding.standardize([lat for _, lat in train_rows]))
    v_in = embedding.values
    adam = AdamState()
    best, since_best = math.inf, 0
    for _ in range(SCRATCH_MAX_STEPS):
        loss = mse_loss(forward(config, tensors, x, v_in), y)
        grads = grad(loss, [tensors[n] for n in names])
        adam_step({n: tensors[n] for n in names}, dict(zip(names, grads)), adam, lr=lr)
        if loss.item() < best - 1e-9:
            best, since_best = loss.item(), 0
        else:
            since_best += 1
            if since_best >= SCRATCH_PATIENCE:
                break
    scratch = AdaptedPredictor(config, {n: t.detach() for n, t in tensors.items()
                                        if not n.startswith(("mod.", "alpha."))},
                               embedding, device.device_id, len(train_rows), 0.0,
                               frozenset(arch_key(a) for a, _ in train_rows))
    return evaluate(scratch, device, test_archs, seed=seed)["rho"]


# ---------------------------------------------------------------------------
# Ablation tower


ABLATION_VARIANTS = ("amortization", "hw_condition", "few_shot", "full")


def ablation_suite(model_config: ModelConfig, dataset: LatencyDataset,
                   pool: DevicePool, refset: ReferenceSet,
                   base_cfg: MetaTrainConfig, eval_device_ids: Sequence[str],
                   n_eval_archs: int = 200, n_adapt_samples: int = 10,
                   eval_seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> dict[str, dict]:
    """Train and evaluate the four nested variants under identical seeds.

    amortization: no device input, no inner steps, no modulator.
    hw_condition: adds the embedding input.
    few_shot:     adds T inner steps on the support set.
    full:         adds the initialization modulator.
    """
    settings = {
        "amortization": dict(condition_on_device=False, inner_steps=0, use_modulator=False),
        "hw_condition": dict(condition_on_device=True, inner_steps=0, use_modulator=False),
        "few_shot": dict(condition_on_device=True,
                         inner_steps=base_cfg.inner_steps or 2, use_modulator=False),
        "full": dict(condition_on_device=True,
                     inner_steps=base_cfg.inner_steps or 2, use_modulator=True),
    }
    devices = {d.device_id: d for d in pool.devices}
    results: dict[str, dict] = {}
    for variant in ABLATION_VARIANTS:
        cfg = replace(base_cfg, **settings[variant])
        params = pred.init_params(model_config, seed=derive_seed(cfg.seed, "ablation_init"))
        meta_train(model_config, params, dataset, pool, refset, cfg)
        rhos = []
        for device_id in eval_device_ids:
            device = devices[device_id]
            for s in eval_seeds:
                predictor = adapt(model_config, params, device, refset,
                                  n_samples=n_adapt_samples, T=cfg.inner_steps,
                                  seed=derive_seed(s, "ablation_adapt", device_id),
                                  scope=cfg.inner_scope,
                                  use_modulator=cfg.use_modulator,
                                  condition=cfg.condition_on_device)
                test = asp.sample_architectures(
                    model_config.space, n_eval_archs,
                    seed=derive_seed(s, "ablation_eval", device_id))
                test = [a for a in test if arch_key(a) not in predictor.support_keys]
                rhos.append(evaluate(predictor, device, test,
                                     seed=derive_seed(s, "ablation_truth"))["rho"])
        results[variant] = {"mean_rho": float(np.mean(rhos)),
                            "std_rho": float(np.std(rhos)),
                            "per_run": rhos}
    return results
