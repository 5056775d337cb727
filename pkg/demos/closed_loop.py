"""Closed-loop MPPI on the desk-scale oval with analytic and learned models.

Run: python demos/closed_loop.py [CHECKPOINT_DIR]
CHECKPOINT_DIR holds meta/ and pooled/ from `metampc pretrain`; without it
only the analytic baselines and the randomly initialised network run.
"""

import os
import sys

from metampc.harness import RunConfig, run_episode

checkpoints = sys.argv[1] if len(sys.argv) > 1 else None
baselines = ["a", "b", "g", "c"]
extra = {}
if checkpoints:
    baselines += ["d", "e", "f"]
    extra = {"meta_checkpoint": os.path.join(checkpoints, "meta", "final"),
             "pooled_checkpoint": os.path.join(checkpoints, "pooled", "final")}

names = {
    "a": "analytic model, perturbed parameters",
    "b": "analytic model, true parameters, delay ignored",
    "c": "network from random init, online adaptation",
    "d": "meta-learned network, no uncertainty cost",
    "e": "pooled-trained network, online adaptation",
    "f": "meta-learned network with uncertainty cost",
    "g": "analytic model with online tire and drag fitting",
}
for baseline in baselines:
    metrics, rows = run_episode(RunConfig(baseline=baseline, seed=0, duration=20.0, **extra))
    print(f"{baseline} ({names[baseline]}): mean |lateral error| {metrics.mean_abs_lateral_error:.3f} m, "
          f"speed {metrics.average_speed:.2f} m/s, laps {metrics.laps}, excursions {metrics.excursions}, "
          f"crashed {metrics.crashed}")
