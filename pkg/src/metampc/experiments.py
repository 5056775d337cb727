"""Acceptance experiments and their pass/fail rules.

Each ``criterion_*`` function takes already computed inputs and returns a
``Verdict``.  The expensive inputs (baseline runs, held-out adaptation,
symmetry probes) are produced by ``python -m metampc.experiments`` into an
artifact directory and cached there as JSON.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import cli, harness, meta, seqmodel
from .ensemble import Ensemble
from .tasks import FourierActionSpec, GeneratorConfig, ParamRanges, generate_tasks

log = logging.getLogger(__name__)

HELD_OUT_SEED = 10_000
SYMMETRY_FIRST_SEED = 1000


@dataclasses.dataclass
class Verdict:
    criterion: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.criterion} ({self.name}): {'PASS' if self.passed else 'FAIL'} | {self.detail}"


# criterion 1 and 4: closed-loop baselines -------------------------------------------

def criterion_ordering(table: dict) -> Verdict:
    err = {b: row["mean_lateral_error"] for b, row in table.items()}
    missing = [b for b in ("a", "c", "d", "e", "f", "g") if b not in err]
    if missing:
        return Verdict(1, "ordering", False, f"missing baselines {missing}")
    f = err["f"]
    checks = {
        "f<d": f < err["d"],
        "f<=e": f <= err["e"],
        "f<c": f < err["c"],
        "f<a": f < err["a"],
        "g within 2x of f": 0.5 * f <= err["g"] <= 2.0 * f,
    }
    values = " ".join(f"{b}={err[b]:.4f}" for b in sorted(err))
    failed = [k for k, ok in checks.items() if not ok]
    return Verdict(1, "ordering", not failed, values + (f" failed: {failed}" if failed else ""))


def criterion_uncertainty(d_metrics, f_metrics) -> Verdict:
    d = sum(m.excursions for m in d_metrics)
    f = sum(m.excursions for m in f_metrics)
    return Verdict(4, "uncertainty ablation", f < d,
                   f"excursions gamma_unc=0: {d}, gamma_unc on: {f} over {len(f_metrics)} seeds")


# criterion 2: held-out fast adaptation ---------------------------------------------

def held_out_tasks(count: int = 20, seed: int = HELD_OUT_SEED, n: int = 10):
    return generate_tasks(ParamRanges(), FourierActionSpec(), GeneratorConfig(n=n), seed, range(count))


def query_loss_after_adaptation(weights: seqmodel.ModelWeights, task, K_inner: int, alpha: float,
                                support_fraction: float = 0.5) -> float:
    """Member-averaged query MSE after ``K_inner`` support steps."""
    adapted = meta.inner_adapt(weights, task, K_inner, alpha, support_fraction)
    _, (xq, yq) = task.split(support_fraction)
    return float(np.mean(seqmodel.loss(adapted, xq, yq)))


def adaptation_comparison(meta_weights, random_weights, pooled_weights, tasks, K_inner: int = 3,
                          alpha: float = 1e-2) -> dict:
    rows = []
    for i, task in enumerate(tasks):
        rows.append({
            "task": i,
            "meta": query_loss_after_adaptation(meta_weights, task, K_inner, alpha),
            "random": query_loss_after_adaptation(random_weights, task, K_inner, alpha),
            "pooled": query_loss_after_adaptation(pooled_weights, task, K_inner, alpha),
        })
    return {"K_inner": K_inner, "alpha": alpha, "rows": rows}


def criterion_adaptation(result: dict, required: int = 16) -> Verdict:
    rows = result["rows"]
    wins = sum(r["meta"] < r["random"] and r["meta"] < r["pooled"] for r in rows)
    med = {k: float(np.median([r[k] for r in rows])) for k in ("meta", "random", "pooled")}
    detail = (f"meta beats both in {wins}/{len(rows)} tasks (need {required}); median query loss "
              f"meta {med['meta']:.4f} random {med['random']:.4f} pooled {med['pooled']:.4f}")
    return Verdict(2, "fast adaptation", len(rows) == 20 and wins >= required, detail)


# criterion 3: symmetry --------------------------------------------------------------

def criterion_symmetry(meta_report: dict, random_report: dict) -> Verdict:
    m, r = meta_report["opposite_fraction"], random_report["opposite_fraction"]
    ok = meta_report["probes"] >= 100 and m >= 0.9 and m - r >= 0.2
    return Verdict(3, "symmetry", ok,
                   f"meta {m:.2f} random {r:.2f} over {meta_report['probes']} probes "
                   f"(plant {meta_report['plant_opposite_fraction']:.2f})")


def symmetry_report(ensemble: Ensemble, config: harness.RunConfig, tasks: int = 10,
                    probes: int = 100, adapt_steps: int = 50) -> dict:
    seeds = list(range(SYMMETRY_FIRST_SEED, SYMMETRY_FIRST_SEED + tasks))
    report = harness.symmetry_experiment(ensemble, seeds, probes=probes, adapt_steps=adapt_steps, config=config)
    return {"opposite_fraction": report.opposite_fraction, "probes": report.probes,
            "plant_opposite_fraction": report.plant_opposite_fraction}


# meta-training trend ------------------------------------------------------------------

def training_trend(log_path, window: int = 100) -> dict:
    losses = np.array([loss for _, loss, _ in meta.read_log(log_path)])
    return {"episodes": int(len(losses)), "first": float(np.median(losses[:window])),
            "last": float(np.median(losses[-window:]))}


# orchestration -------------------------------------------------------------------------

def _cached(path, compute, refresh: bool):
    if os.path.exists(path) and not refresh:
        with open(path) as fh:
            return json.load(fh)
    start = time.perf_counter()
    value = compute()
    log.info("%s computed in %.1f s", os.path.basename(path), time.perf_counter() - start)
    with open(path, "w") as fh:
        json.dump(value, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return value


def run_baselines(out_dir, checkpoints, seeds: int = 10, baselines=harness.BASELINES,
                  refresh: bool = False) -> dict:
    """Run (or reload) every baseline over ``seeds`` seeds; returns per-baseline metric dicts."""
    found = {}
    for baseline in baselines:
        path = os.path.join(out_dir, "runs", f"{baseline}.json")
        os.makedirs(os.path.dirname(path), exist_ok=True)

        def compute(baseline=baseline):
            config = harness.RunConfig(
                baseline=baseline,
                meta_checkpoint=os.path.join(checkpoints, "meta", "final"),
                pooled_checkpoint=os.path.join(checkpoints, "pooled", "final"))
            out = []
            for seed in range(seeds):
                metrics, _ = harness.run_episode(dataclasses.replace(config, seed=seed))
                log.info("baseline %s seed %d: %.4f m", baseline, seed, metrics.mean_abs_lateral_error)
                out.append(metrics.to_dict())
            return out

        found[baseline] = _cached(path, compute, refresh)
    return found


def ensure_checkpoints(checkpoints, config_dir="configs", seed: int = 0) -> None:
    """Pre-train the meta and pooled ensembles unless their final checkpoints exist."""
    for name in ("meta", "pooled"):
        target = os.path.join(checkpoints, name)
        if os.path.exists(os.path.join(target, "final", "manifest.json")):
            continue
        log.info("pre-training %s ensemble into %s", name, target)
        cli.main(["pretrain", "--config", os.path.join(config_dir, f"pretrain_{name}.json"),
                  "--seed", str(seed), "--out", target])


def prepare(out_dir, checkpoints, refresh: bool = False, seeds: int = 10) -> dict:
    """Produce every cached input the acceptance tests read."""
    os.makedirs(out_dir, exist_ok=True)
    ensure_checkpoints(checkpoints)
    meta_ens = Ensemble.load(os.path.join(checkpoints, "meta", "final"))
    pooled_ens = Ensemble.load(os.path.join(checkpoints, "pooled", "final"))
    random_ens = Ensemble.initialise(meta_ens.config, list(meta_ens.seeds))
    config = harness.RunConfig(baseline="f")

    def adaptation():
        tasks = held_out_tasks(n=meta_ens.config.n)
        return adaptation_comparison(meta_ens.weights, random_ens.weights, pooled_ens.weights, tasks)

    results = {
        "trend": training_trend(os.path.join(checkpoints, "meta", "train_log.csv")),
        "adaptation": _cached(os.path.join(out_dir, "adaptation.json"), adaptation, refresh),
        "symmetry_meta": _cached(os.path.join(out_dir, "symmetry_meta.json"),
                                 lambda: symmetry_report(meta_ens, config), refresh),
        "symmetry_random": _cached(os.path.join(out_dir, "symmetry_random.json"),
                                   lambda: symmetry_report(random_ens, config), refresh),
    }
    runs = run_baselines(out_dir, checkpoints, seeds=seeds, refresh=refresh)
    results["table"] = harness.summarise([harness.Metrics(**m) for ms in runs.values() for m in ms])
    return results


def verdicts(out_dir) -> list[Verdict]:
    """Verdicts for criteria 1 to 4 from the cached artifacts in ``out_dir``."""
    def load(name):
        with open(os.path.join(out_dir, name)) as fh:
            return json.load(fh)

    runs = {b: [harness.Metrics(**m) for m in load(os.path.join("runs", f"{b}.json"))]
            for b in harness.BASELINES}
    table = harness.summarise([m for ms in runs.values() for m in ms])
    return [
        criterion_ordering(table),
        criterion_adaptation(load("adaptation.json")),
        criterion_symmetry(load("symmetry_meta.json"), load("symmetry_random.json")),
        criterion_uncertainty(runs["d"], runs["f"]),
    ]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m metampc.experiments", description=__doc__)
    parser.add_argument("--checkpoints", default="artifacts/checkpoints")
    parser.add_argument("--out", default="artifacts/acceptance")
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--refresh", action="store_true", help="recompute cached results")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    results = prepare(args.out, args.checkpoints, refresh=args.refresh, seeds=args.seeds)
    print(json.dumps({"trend": results["trend"], "table": results["table"]}, indent=2))
    for verdict in verdicts(args.out):
        print(verdict.line())
    return 0


if __name__ == "__main__":
    sys.exit(main())
