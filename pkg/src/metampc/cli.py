"""Command-line entry points: gen-data, pretrain, run, diag-symmetry, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import logging
import os
import subprocess
import sys

import numpy as np

from . import harness, meta, tasks
from .ensemble import Ensemble
from .seqmodel import ModelConfig

log = logging.getLogger("metampc")


def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _read_json(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_run_info(out_dir, command: str, seed, config: dict):
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), config)
    _write_json(os.path.join(out_dir, "run_info.json"),
                {"command": command, "seed": seed, "git_describe": git_describe()})


# gen-data ------------------------------------------------------------------------

def _generator_parts(config: dict, ranges_path=None):
    ranges = tasks.ParamRanges.from_dict(config.get("ranges", {}))
    if ranges_path:
        ranges = tasks.ParamRanges.load(ranges_path)
    spec = tasks.FourierActionSpec(**config.get("actions", {}))
    generator = tasks.GeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                         for k, v in config.get("generator", {}).items()})
    return ranges, spec, generator


def cmd_gen_data(args) -> int:
    config = _read_json(args.config)
    ranges, spec, generator = _generator_parts(config, args.ranges)
    if args.n is not None:
        generator = dataclasses.replace(generator, n=args.n)
    data = tasks.generate_dataset(ranges, spec, generator, args.tasks, args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    tasks.write_jsonl(args.out, data)
    resolved = {"ranges": ranges.to_dict(), "generator": dataclasses.asdict(generator),
                "actions": {k: v for k, v in dataclasses.asdict(spec).items() if k != "coefficients"},
                "tasks": args.tasks}
    _write_run_info(args.out + ".meta", "gen-data", args.seed, resolved)
    print(f"wrote {len(data)} tasks to {args.out}")
    return 0


# pretrain ------------------------------------------------------------------------

def resolve_pretrain_config(config: dict) -> dict:
    model = ModelConfig(**config.get("model", {}))
    meta_config = meta.MetaConfig.from_dict(config.get("meta", {}))
    members = int(config.get("members", 5))
    return {"model": dataclasses.asdict(model), "meta": meta_config.to_dict(), "members": members,
            **{k: config[k] for k in ("ranges", "generator", "actions") if k in config}}


def cmd_pretrain(args) -> int:
    raw = _read_json(args.config)
    resolved = resolve_pretrain_config(raw)
    model = ModelConfig(**resolved["model"])
    meta_config = meta.MetaConfig.from_dict(resolved["meta"])
    if args.episodes is not None:
        meta_config = dataclasses.replace(meta_config, episodes=args.episodes)
        resolved["meta"] = meta_config.to_dict()
    if args.data:
        pool = list(tasks.read_jsonl(args.data))
        if pool and pool[0].windows.shape[1] != model.window_length:
            raise SystemExit(f"dataset windows have length {pool[0].windows.shape[1]}, "
                             f"model expects {model.window_length}")
        source = meta.PoolTaskSource(pool, args.seed)
        resolved["data"] = os.path.abspath(args.data)
    else:
        ranges, spec, generator = _generator_parts(raw)
        generator = dataclasses.replace(generator, n=model.n)
        if abs(spec.dt - model.dt) > 1e-12:
            raise SystemExit("action dt and model dt differ")
        source = meta.OnlineTaskSource(ranges, spec, generator, args.seed)
    seeds = [int(s) for s in np.random.SeedSequence(args.seed).generate_state(resolved["members"])]
    resolved["member_seeds"] = seeds
    _write_run_info(args.out, "pretrain", args.seed, resolved)
    init = meta.init_ensemble_weights(model, seeds)

    def progress(episode, value, _theta):
        if args.verbose and (episode % 50 == 0 or episode == meta_config.episodes - 1):
            print(f"episode {episode} meta_loss {value:.4f}", flush=True)

    result = meta.pretrain(meta_config, source, init, callback=progress)
    meta.save_result(result, args.out, meta_config, source.describe(), seeds)
    print(f"wrote checkpoints to {args.out} (best episode {result.best_episode}, loss {result.best_loss:.4f})")
    return 0


# run -----------------------------------------------------------------------------

def cmd_run(args) -> int:
    raw = _read_json(args.config)
    if args.checkpoints:
        raw.setdefault("meta_checkpoint", os.path.join(args.checkpoints, "meta", args.which))
        raw.setdefault("pooled_checkpoint", os.path.join(args.checkpoints, "pooled", args.which))
    if args.duration is not None:
        raw["duration"] = args.duration
    base = harness.RunConfig.from_dict({**raw, "baseline": args.baseline, "seed": args.first_seed})
    out_dir = os.path.join(args.out, args.baseline)
    _write_run_info(out_dir, "run", args.first_seed, base.to_dict())
    results = []
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for seed in range(args.first_seed, args.first_seed + args.seeds):
            config = dataclasses.replace(base, seed=seed)
            metrics, _ = harness.run_episode(config, os.path.join(out_dir, f"seed_{seed}.jsonl"))
            results.append(metrics)
            fh.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            print(f"baseline {args.baseline} seed {seed}: lateral error {metrics.mean_abs_lateral_error:.4f} m, "
                  f"speed {metrics.average_speed:.3f} m/s, laps {metrics.laps}, crashed {metrics.crashed}",
                  flush=True)
    return 0


# diag-symmetry ---------------------------------------------------------------------

def cmd_diag_symmetry(args) -> int:
    raw = _read_json(args.config)
    config = harness.RunConfig.from_dict({**raw, "baseline": "f"})
    if args.checkpoint == "random":
        ensemble = Ensemble.initialise(config.model, list(range(args.members)))
    else:
        ensemble = Ensemble.load(args.checkpoint)
    seeds = list(range(args.first_seed, args.first_seed + args.tasks))
    report = harness.symmetry_experiment(ensemble, seeds, probes=args.probes,
                                         adapt_steps=args.adapt_steps, config=config)
    result = {
        "checkpoint": args.checkpoint,
        "opposite_fraction": report.opposite_fraction,
        "plant_opposite_fraction": report.plant_opposite_fraction,
        "probes": report.probes,
        "omega_same": report.omega_same,
        "omega_mirror": report.omega_mirror,
    }
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        _write_json(args.out, result)
    print(f"opposite-sign fraction {report.opposite_fraction:.3f} over {report.probes} probes "
          f"(plant: {report.plant_opposite_fraction:.3f})")
    return 0


# report ---------------------------------------------------------------------------

def collect_metrics(in_dir) -> list[harness.Metrics]:
    found = []
    for path in sorted(glob.glob(os.path.join(in_dir, "**", "metrics.jsonl"), recursive=True)):
        with open(path) as fh:
            found.extend(harness.Metrics(**json.loads(line)) for line in fh if line.strip())
    return found


def cmd_report(args) -> int:
    metrics = collect_metrics(args.input)
    if not metrics:
        raise SystemExit(f"no metrics.jsonl files under {args.input}")
    table = harness.summarise(metrics)
    out = args.out or os.path.join(args.input, "table.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["baseline", "mean_lateral_error", "mean_speed", "mean_laps"])
        for baseline, row in table.items():
            writer.writerow([baseline, f"{row['mean_lateral_error']:.6f}", f"{row['mean_speed']:.6f}",
                             f"{row['mean_laps']:.3f}"])
    with open(out) as fh:
        sys.stdout.write(fh.read())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metampc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a JSONL task dataset")
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ranges", help="JSON file of per-parameter [lo, hi] bounds")
    p.add_argument("--config", help="JSON with optional 'generator', 'actions' and 'ranges' sections")
    p.add_argument("--n", type=int, help="history length (overrides the config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="meta-train (or pool-train with K_inner=0) an ensemble")
    p.add_argument("--config", help="JSON with 'model', 'meta', 'members' and generator sections")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="JSONL dataset from gen-data")
    src.add_argument("--online-gen", action="store_true", help="generate fresh tasks every episode (default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, help="override the configured episode count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="closed-loop oval episodes for one baseline")
    p.add_argument("--baseline", choices=harness.BASELINES, required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON RunConfig overrides")
    p.add_argument("--checkpoints", help="directory holding meta/ and pooled/ pre-training outputs")
    p.add_argument("--which", default="final", choices=("final", "best"))
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diag-symmetry", help="mirror-steer yaw-rate diagnostic")
    p.add_argument("--checkpoint", required=True, help="ensemble directory, or 'random'")
    p.add_argument("--config", help="JSON RunConfig overrides")
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=1000)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--adapt-steps", type=int, default=50)
    p.add_argument("--members", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag_symmetry)

    p = sub.add_parser("report", help="Table-I style CSV from run directories")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
