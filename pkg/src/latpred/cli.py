"""Command-line entry points and experiment orchestration.

Four subcommands cover the full workflow::

    latpred gen-devices   synthesize a device pool, reference set, and
                          latency table
    latpred metatrain     meta-train the predictor on a pool's table
    latpred adapt-eval    adapt to held-out devices and report correlations
                          (optionally against the baseline predictors)
    latpred search        latency-constrained architecture search

Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.
Every command writes a manifest (config hash, seeds, version, timestamps,
produced files) into its output directory; outputs land only there.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path


from . import __version__
from . import archspace as asp
from . import devicesim as dsim
from . import metalearn as ml
from . import nas
from . import predictor as pred
from .seeds import derive_seed

OUTPUT_ENV_VAR = "HELP_LAT_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run manifests


def _version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        if desc.returncode == 0:
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunManifest:
    def __init__(self, command: str, config: dict, seeds: dict):
        self.data = {
            "command": command,
            "config_hash": hashlib.sha256(
                json.dumps(config, sort_keys=True, default=str).encode()).hexdigest(),
            "config": config,
            "seeds": seeds,
            "version": _version_string(),
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "produced_files": [],
        }

    def add_file(self, path) -> None:
        self.data["produced_files"].append(str(path))

    def write(self, out_dir: Path) -> Path:
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        path = out_dir / "manifest.json"
        tmp = out_dir / ".manifest.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)  # atomic publish
        return path


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_ENV_VAR) or "latpred_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_json_config(path, allowed_keys: set[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise CliConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliConfigError(f"config {path} is not valid JSON: {e}") from e
    unknown = set(raw) - allowed_keys
    if unknown:
        raise CliConfigError(f"unknown config keys: {sorted(unknown)} "
                             f"(allowed: {sorted(allowed_keys)})")
    return raw


# ---------------------------------------------------------------------------
# gen-devices


GEN_KEYS = {"space", "composition", "archetypes", "noise_cv", "probe_size",
            "corr_band", "unseen_platform_archetype", "n_unseen_devices",
            "n_devices", "samples_per_device", "candidate_archs", "seed"}


def cmd_gen_devices(args) -> int:
    raw = _load_json_config(args.config, GEN_KEYS)
    pool_cfg_keys = {k: v for k, v in raw.items()
                     if k not in ("n_devices", "samples_per_device",
                                  "candidate_archs", "seed")}
    try:
        cfg = dsim.PoolConfig.from_dict(pool_cfg_keys, space=args.space)
    except (TypeError, ValueError) as e:
        raise CliConfigError(str(e)) from e

    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    n_devices = args.devices or int(raw.get("n_devices", 0)) or cfg.planned_devices()
    samples = args.samples if args.samples is not None else int(
        raw.get("samples_per_device", 900))
    n_archs = int(raw.get("candidate_archs",
                          min(asp.space_size(cfg.space), max(4 * samples, 2000))))
    if samples > n_archs:
        raise CliConfigError(f"samples_per_device={samples} exceeds the "
                             f"candidate pool of {n_archs} architectures")

    out = _out_dir(args)
    manifest = RunManifest("gen-devices", {"pool": pool_cfg_keys,
                                           "n_devices": n_devices,
                                           "samples_per_device": samples,
                                           "candidate_archs": n_archs},
                           {"root": seed})
    pool = dsim.generate_pool(cfg, n_devices, seed=seed)
    pool_path = out / "pool.json"
    dsim.save_pool(pool_path, pool)
    manifest.add_file(pool_path)

    refset = asp.default_reference_set(cfg.space, seed=derive_seed(seed, "refset"))
    ref_path = out / "refset.jsonl"
    asp.save_reference_set(ref_path, refset)
    manifest.add_file(ref_path)

    archs = asp.sample_architectures(cfg.space, n_archs,
                                     seed=derive_seed(seed, "candidates"))
    table_path = out / "table.jsonl"
    dsim.build_dataset(pool, archs, samples, seed=derive_seed(seed, "dataset"),
                       path=table_path, workers=args.workers)
    manifest.add_file(table_path)
    manifest.write(out)
    print(f"wrote {pool_path}, {ref_path}, {table_path} "
          f"({len(pool.devices)} devices x {samples} samples)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metatrain


TRAIN_KEYS = {"meta_batch", "inner_steps", "episodes", "meta_lr", "k_shot",
              "query_size", "seed", "first_order", "inner_scope",
              "use_modulator", "condition_on_device", "refresh_embeddings",
              "checkpoint_every", "model"}
MODEL_KEYS = {"arch_hidden", "gcn_layers", "device_hidden", "header_hidden",
              "modulator_hidden", "layerwise_encoding", "arch_input_dim",
              "alpha_init"}


def _train_config_from(args, raw: dict) -> ml.MetaTrainConfig:
    kwargs = {k: v for k, v in raw.items() if k != "model"}
    for flag in ("episodes", "meta_batch", "inner_steps", "meta_lr", "k_shot",
                 "query_size", "seed", "inner_scope"):
        val = getattr(args, flag, None)
        if val is not None:
            kwargs[flag] = val
    if getattr(args, "first_order", False):
        kwargs["first_order"] = True
    try:
        return ml.MetaTrainConfig(**kwargs)
    except (TypeError, ml.MetaLearnError) as e:
        raise CliConfigError(str(e)) from e


def cmd_metatrain(args) -> int:
    raw = _load_json_config(args.config, TRAIN_KEYS)
    cfg = _train_config_from(args, raw)
    pool = dsim.load_pool(args.pool)
    dataset = dsim.load_dataset(args.table)
    refset = asp.load_reference_set(args.refset)
    if dataset.space != refset.space:
        raise CliConfigError(f"dataset space {dataset.space!r} does not match "
                             f"reference set space {refset.space!r}")

    out = _out_dir(args)
    manifest = RunManifest("metatrain", {"train": raw, "episodes": cfg.episodes,
                                         "pool": str(args.pool)},
                           {"root": cfg.seed})
    model_kwargs = {k: v for k, v in raw.get("model", {}).items() if k in MODEL_KEYS}
    start_iter, adam = 0, None
    if args.resume:
        config, params, adam, start_iter = ml.load_train_state(args.resume)
    else:
        config = pred.ModelConfig(space=dataset.space, **model_kwargs)
        params = pred.init_params(config, seed=derive_seed(cfg.seed, "init"))

    log_path = out / "log.csv"
    ckpt_path = out / "checkpoint.npz"
    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode, newline="") as log_fh:
        writer = csv.writer(log_fh)
        if mode == "w":
            writer.writerow(["iteration", "mean_support_loss", "mean_query_loss",
                             "wall_ms"])

        def on_log(row: ml.LogRow):
            writer.writerow([row.iteration, f"{row.mean_support_loss:.10g}",
                             f"{row.mean_query_loss:.10g}", f"{row.wall_ms:.3f}"])

        def on_checkpoint(iteration, p, a):
            ml.save_train_state(ckpt_path, config, p, a, iteration)

        ml.meta_train(config, params, dataset, pool, refset, cfg,
                      start_iteration=start_iter, adam_state=adam,
                      checkpoint_cb=on_checkpoint, log_cb=on_log)
    manifest.add_file(log_path)
    manifest.add_file(ckpt_path)
    manifest.write(out)
    print(f"meta-trained {cfg.episodes - start_iter} iterations; "
          f"checkpoint at {ckpt_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# adapt-eval


def cmd_adapt_eval(args) -> int:
    config, params = pred.load_checkpoint(args.checkpoint)
    pool = dsim.load_pool(args.pool)
    refset = asp.load_reference_set(args.refset)
    if refset.space != config.space:
        raise CliConfigError(f"checkpoint space {config.space!r} does not match "
                             f"reference set space {refset.space!r}")
    dataset = dsim.load_dataset(args.table) if args.table else None
    devices = {d.device_id: d for d in pool.devices}
    if args.devices:
        device_ids = args.devices.split(",")
        unknown = [d for d in device_ids if d not in devices]
        if unknown:
            raise CliConfigError(f"unknown devices: {unknown}")
    else:
        device_ids = list(pool.splits.get(args.split, ()))
        if not device_ids:
            raise CliConfigError(f"pool has no devices in split {args.split!r}")
    baselines = [b.strip() for b in (args.baselines or "").split(",") if b.strip()]
    unknown_baselines = set(baselines) - {"flops", "layerwise", "scratch"}
    if unknown_baselines:
        raise CliConfigError(f"unknown baselines: {sorted(unknown_baselines)}")
    sample_counts = [int(s) for s in args.n_samples.split(",")]
    seeds = list(range(args.seeds))

    out = _out_dir(args)
    manifest = RunManifest("adapt-eval",
                           {"checkpoint": str(args.checkpoint),
                            "devices": device_ids, "n_samples": sample_counts,
                            "baselines": baselines, "test_archs": args.test_archs},
                           {"eval_seeds": seeds})
    rows = []
    for device_id in device_ids:
        device = devices[device_id]
        for n_samples in sample_counts:
            for s in seeds:
                adapted = ml.adapt(config, params, device, refset,
                                   n_samples=n_samples, T=args.inner_steps,
                                   seed=derive_seed(s, "adapt", device_id, n_samples),
                                   dataset=dataset)
                test = asp.sample_architectures(
                    config.space, args.test_archs,
                    seed=derive_seed(s, "eval_archs", device_id))
                test = [a for a in test if asp.arch_key(a) not in adapted.support_keys]
                report = ml.evaluate(adapted, device, test,
                                     seed=derive_seed(s, "eval_truth", device_id))
                row = {"device_id": device_id, "n_samples": n_samples, "seed": s,
                       "rho": report["rho"], "adapt_seconds": report["adapt_seconds"]}
                if "flops" in baselines:
                    row["rho_flops"] = ml.baseline_flops(
                        test, device, seed=derive_seed(s, "eval_truth", device_id))
                if "layerwise" in baselines or "scratch" in baselines:
                    if dataset is None:
                        raise CliConfigError("--baselines layerwise/scratch need "
                                             "--table for training rows")
                    train_rows = dataset.device_rows(device_id)
                    if "layerwise" in baselines:
                        row["rho_layerwise"] = ml.baseline_layerwise(
                            train_rows, test, device,
                            seed=derive_seed(s, "eval_truth", device_id))
                    if "scratch" in baselines:
                        sub = train_rows[:n_samples]
                        row["rho_scratch"] = ml.baseline_scratch(
                            config, sub, test, device, embedding=adapted.embedding,
                            seed=derive_seed(s, "scratch", device_id))
                rows.append(row)
                print(f"{device_id} n={n_samples} seed={s}: rho={row['rho']:.4f}")
    # per-(device, sample-count) mean and spread over the evaluation seeds
    summary = []
    for device_id in device_ids:
        for n_samples in sample_counts:
            vals = [r["rho"] for r in rows
                    if r["device_id"] == device_id and r["n_samples"] == n_samples]
            entry = {"device_id": device_id, "n_samples": n_samples,
                     "n_seeds": len(vals),
                     "rho_mean": sum(vals) / len(vals),
                     "rho_std": (sum((v - sum(vals) / len(vals)) ** 2
                                     for v in vals) / len(vals)) ** 0.5}
            for key in ("rho_flops", "rho_layerwise", "rho_scratch"):
                bvals = [r[key] for r in rows
                         if key in r and r["device_id"] == device_id
                         and r["n_samples"] == n_samples]
                if bvals:
                    entry[key + "_mean"] = sum(bvals) / len(bvals)
            summary.append(entry)
    json_path = out / "eval_report.json"
    with open(json_path, "w") as fh:
        json.dump({"runs": rows, "summary": summary}, fh, indent=2)
    csv_path = out / "eval_report.csv"
    fields = sorted({k for r in rows for k in r})
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    manifest.add_file(json_path)
    manifest.add_file(csv_path)
    manifest.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# search


def cmd_search(args) -> int:
    pool = dsim.load_pool(args.pool)
    refset = asp.load_reference_set(args.refset)
    devices = {d.device_id: d for d in pool.devices}
    if args.device not in devices:
        raise CliConfigError(f"unknown device {args.device!r}")
    device = devices[args.device]
    constraints = [float(c) for c in args.constraints.split(",")]
    if not constraints:
        raise CliConfigError("no constraints given")

    acc_table = (nas.load_accuracy_table(args.acc_table) if args.acc_table
                 else nas.synthetic_accuracy_table(device.space,
                                                   seed=args.acc_seed))
    if args.oracle_latency:
        predictor = ml.OraclePredictor(device)
    else:
        if not args.checkpoint:
            raise CliConfigError("search needs --checkpoint or --oracle-latency")
        config, params = pred.load_checkpoint(args.checkpoint)
        if config.space != device.space:
            raise CliConfigError(f"checkpoint space {config.space!r} does not "
                                 f"match device space {device.space!r}")
        predictor = ml.adapt(config, params, device, refset,
                             n_samples=args.n_samples, T=args.inner_steps,
                             seed=derive_seed(args.seed, "adapt"))

    out = _out_dir(args)
    manifest = RunManifest("search", {"device": args.device,
                                      "constraints": constraints,
                                      "oracle_latency": bool(args.oracle_latency),
                                      "budget": args.budget},
                           {"root": args.seed})
    t0 = time.perf_counter()
    results = []
    for c in constraints:
        if device.space == "cell":
            res = nas.exhaustive_search(predictor, acc_table, c, device=device)
        else:
            res = nas.evolutionary_search(device.space, predictor, acc_table, c,
                                          budget=args.budget, seed=args.seed,
                                          device=device)
        results.append(res)
        status = (f"latency {res.true_latency_ms:.2f} ms acc {res.accuracy:.2f}%"
                  if res.found else "no feasible architecture")
        print(f"constraint {c:.2f} ms: {status}")
    json_path = out / "search_results.json"
    with open(json_path, "w") as fh:
        json.dump([r.to_json_obj() for r in results], fh, indent=2)
    csv_path = out / "search_results.csv"
    nas.write_sweep_csv(csv_path, results)
    manifest.add_file(json_path)
    manifest.add_file(csv_path)
    if args.emit_plot_data:
        if device.space == "cell":
            frontier = nas.true_pareto_frontier(device, acc_table)
        else:
            probe = asp.sample_architectures(device.space, 2000,
                                             seed=derive_seed(args.seed, "frontier"))
            frontier = nas.true_pareto_frontier(device, acc_table, archs=probe)
        frontier_path = out / "frontier.csv"
        nas.write_frontier_csv(frontier_path, frontier)
        manifest.add_file(frontier_path)
    manifest.write(out)
    print(f"search wall-clock {time.perf_counter() - t0:.1f} s for "
          f"{len(constraints)} constraints")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latpred",
        description="Device-adaptive latency prediction and latency-constrained "
                    "architecture search")
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-devices", help="synthesize a device pool and latency table")
    g.add_argument("--config", help="pool config JSON")
    g.add_argument("--space", choices=["cell", "layerwise"])
    g.add_argument("--devices", type=int)
    g.add_argument("--samples", type=int, help="latency samples per device")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_devices)

    t = sub.add_parser("metatrain", help="meta-train the latency predictor")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--pool", required=True)
    t.add_argument("--table", required=True)
    t.add_argument("--refset", required=True)
    t.add_argument("--episodes", type=int)
    t.add_argument("--meta-batch", dest="meta_batch", type=int)
    t.add_argument("--inner-steps", dest="inner_steps", type=int)
    t.add_argument("--meta-lr", dest="meta_lr", type=float)
    t.add_argument("--k-shot", dest="k_shot", type=int)
    t.add_argument("--query-size", dest="query_size", type=int)
    t.add_argument("--inner-scope", dest="inner_scope", choices=["all", "header"])
    t.add_argument("--first-order", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="train-state checkpoint to continue from")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out")
    t.set_defaults(func=cmd_metatrain)

    e = sub.add_parser("adapt-eval", help="few-shot adapt and score on devices")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pool", required=True)
    e.add_argument("--refset", required=True)
    e.add_argument("--table", help="latency table for support rows and baselines")
    e.add_argument("--devices", help="comma-separated device ids")
    e.add_argument("--split", default="meta_test_unseen_device")
    e.add_argument("--n-samples", dest="n_samples", default="10",
                   help="comma-separated support sizes, e.g. 10,50,100")
    e.add_argument("--inner-steps", dest="inner_steps", type=int, default=2)
    e.add_argument("--seeds", type=int, default=5)
    e.add_argument("--test-archs", dest="test_archs", type=int, default=1000)
    e.add_argument("--baselines", help="comma list of flops,layerwise,scratch")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(func=cmd_adapt_eval)

    s = sub.add_parser("search", help="latency-constrained architecture search")
    s.add_argument("--checkpoint")
    s.add_argument("--pool", required=True)
    s.add_argument("--refset", required=True)
    s.add_argument("--device", required=True)
    s.add_argument("--constraints", required=True,
                   help="comma-separated latency constraints in ms")
    s.add_argument("--acc-table", dest="acc_table")
    s.add_argument("--acc-seed", dest="acc_seed", type=int, default=0)
    s.add_argument("--oracle-latency", dest="oracle_latency", action="store_true")
    s.add_argument("--n-samples", dest="n_samples", type=int, default=10)
    s.add_argument("--inner-steps", dest="inner_steps", type=int, default=2)
    s.add_argument("--budget", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--emit-plot-data", dest="emit_plot_data", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)
    return parser


VALIDATION_ERRORS = (CliConfigError, asp.ParseError, asp.SpaceError,
                     pred.ModelError, nas.SearchError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (dsim.DeviceError, ml.MetaLearnError, ml.MetricError,
            OSError, RuntimeError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
