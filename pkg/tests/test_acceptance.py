"""Acceptance criteria, one test each.

Criteria 1 to 4 read cached results from ``artifacts/acceptance`` (override
with ``METAMPC_ACCEPTANCE_DIR``); when absent they are produced first, which
includes pre-training and can take a few hours on one core.  Criteria 5 to 8
are computed here.  Every verdict is printed in the terminal summary.
"""

import csv
import filecmp
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import fd_check, random_params, tiny_config, toy_task
from metampc import experiments, meta, seqmodel
from metampc.experiments import Verdict
from metampc.harness import strip_wall
from metampc.meta import MetaConfig
from metampc.mppi import MPPIConfig, mppi_step, mppi_update, rollout_costs
from metampc.vehicle import integrate_step, make_control, make_state, state_derivative

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ARTIFACTS = os.environ.get("METAMPC_ACCEPTANCE_DIR", os.path.join(ROOT, "artifacts", "acceptance"))
CHECKPOINTS = os.environ.get("METAMPC_CHECKPOINTS", os.path.join(ROOT, "artifacts", "checkpoints"))

VERDICTS: list[Verdict] = []


def record(verdict: Verdict) -> None:
    VERDICTS.append(verdict)
    assert verdict.passed, verdict.line()


# criteria 1 to 4 --------------------------------------------------------------------

@pytest.fixture(scope="module")
def cached():
    cwd = os.getcwd()
    os.chdir(ROOT)
    try:
        experiments.prepare(ARTIFACTS, CHECKPOINTS)
    finally:
        os.chdir(cwd)
    return {v.criterion: v for v in experiments.verdicts(ARTIFACTS)}


def test_criterion_1_ordering(cached):
    record(cached[1])


def test_criterion_2_fast_adaptation(cached):
    record(cached[2])


def test_criterion_3_symmetry(cached):
    record(cached[3])


def test_criterion_4_uncertainty_ablation(cached):
    record(cached[4])


def test_meta_training_trend(cached):
    trend = experiments.training_trend(os.path.join(CHECKPOINTS, "meta", "train_log.csv"))
    assert trend["episodes"] >= 2000
    assert trend["last"] < trend["first"], trend


# criterion 5: gradient exactness ------------------------------------------------------

def test_criterion_5_gradient_exactness():
    rng = np.random.default_rng(2024)
    config = tiny_config()
    weights = seqmodel.init_weights(config, rng)
    tasks = [toy_task(rng) for _ in range(3)]
    xs, ys = tasks[0].windows, tasks[0].targets

    _, grad = seqmodel.loss_and_grad(weights, xs, ys)
    first = fd_check(lambda w: float(seqmodel.loss(w, xs, ys)), weights, grad, 200, rng)

    def meta_loss(w):
        total = 0.0
        for task in tasks:
            adapted = meta.inner_adapt(w, task, 3, 0.05)
            _, (xq, yq) = task.split(0.5)
            total += float(seqmodel.loss(adapted, xq, yq))
        return total / len(tasks)

    _, meta_grad = meta.meta_gradient(weights, tasks, MetaConfig(K_inner=3, alpha=0.05, second_order=True))
    second = fd_check(meta_loss, weights, meta_grad, 200, rng)
    record(Verdict(5, "gradient exactness", first < 1e-4 and second < 1e-4,
                   f"worst relative error over 200 coords: loss_and_grad {first:.2e}, "
                   f"second-order meta-gradient {second:.2e}"))


# criterion 6: MPPI invariants ----------------------------------------------------------

class _Coast:
    """Point mass that integrates throttle and steering directly."""

    def rollout(self, history, state0, controls):
        m, k, _ = controls.shape
        states = np.empty((m, k + 1, 6))
        states[:, 0] = state0
        for i in range(k):
            nxt = states[:, i].copy()
            nxt[:, 0] += nxt[:, 3] * 0.05
            nxt[:, 3] += controls[:, i, 0] * 0.05
            nxt[:, 5] = controls[:, i, 1]
            states[:, i + 1] = nxt
        return states, np.zeros((m, k))


def test_criterion_6_mppi_invariants():
    rng = np.random.default_rng(77)
    controls = rng.uniform(-1, 1, (64, 8, 2))
    costs = rng.uniform(0, 5, 64)
    base, _ = mppi_update(controls, costs, 0.2)
    shift = max(np.max(np.abs(mppi_update(controls, costs + c, 0.2)[0] - base)) for c in (-50.0, 1e-3, 3.0, 1e6))

    uniform, _ = mppi_update(controls, np.full(64, 2.5), 0.2)
    degeneracy = np.max(np.abs(uniform - controls.mean(axis=0)))

    single = max(np.max(np.abs(mppi_update(controls[:1], np.array([c]), 0.01)[0] - controls[0]))
                 for c in (0.0, -3.0, 1e9))

    config = MPPIConfig(K_h=8, M=32)
    plan = np.clip(rng.normal(0, 0.5, (8, 2)), -1, 1)
    reference = np.column_stack([np.linspace(0.05, 0.4, 8), np.zeros(8), np.ones(8)])
    state = make_state(v_x=1.0)
    control, nxt, _ = mppi_step(_Coast(), None, state, plan, reference, config, np.random.default_rng(5))
    noise = np.random.default_rng(5).standard_normal((32, 8, 2)) * np.array(config.noise_std)
    sampled = np.clip(plan + noise, -1, 1)
    sample_costs, _, _ = rollout_costs(_Coast(), None, state, plan, sampled, reference, config)
    v_plus, _ = mppi_update(sampled, sample_costs, config.lam)
    warm = max(np.max(np.abs(control - v_plus[0])), np.max(np.abs(nxt[:-1] - v_plus[1:])),
               np.max(np.abs(nxt[-1] - v_plus[-1])))

    worst = max(shift, degeneracy, single, warm)
    record(Verdict(6, "MPPI invariants", worst <= 1e-9,
                   f"shift {shift:.1e}, uniform {degeneracy:.1e}, single {single:.1e}, warm start {warm:.1e}"))


# criterion 7: simulator verification -------------------------------------------------

def _transcribed_rhs(x, u, p):
    _, _, phi, v_x, v_y, w = (float(v) for v in x)
    d, dcmd = (float(v) for v in u)
    delta = p.K_d * dcmd + p.K_bias
    ve = max(v_x, 0.3)
    fade = min(max(v_x / 0.3, -1.0), 1.0)
    drive = (p.C_m1 - p.C_m2 * v_x) * d
    if d < 0:
        drive *= max(fade, 0.0)
    frx = drive - p.C_lf * fade - p.C_d * v_x * abs(v_x)
    ffy = p.D_f * math.sin(p.C_f * math.atan(p.B_f * (delta - math.atan((w * p.l_f + v_y) / ve))))
    fry = p.D_r * math.sin(p.C_r * math.atan(p.B_r * math.atan((w * p.l_r - v_y) / ve)))
    return [v_x * math.cos(phi) - v_y * math.sin(phi), v_x * math.sin(phi) + v_y * math.cos(phi), w,
            (frx - ffy * math.sin(delta) + p.m * v_y * w) / p.m,
            (fry + ffy * math.cos(delta) - p.m * v_x * w) / p.m,
            (ffy * p.l_f * math.cos(delta) - fry * p.l_r) / p.I_z]


def test_criterion_7_simulator():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(300):
        p = random_params(rng)
        x = make_state(rng.normal(), rng.normal(), rng.uniform(-4, 4), rng.uniform(0, 4),
                       rng.normal(0, 0.3), rng.normal(0, 2))
        u = rng.uniform(-1, 1, 2)
        ref = np.array(_transcribed_rhs(x, u, p))
        got = state_derivative(x, u, p)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0))))

    params = random_params(rng).replace(D_f=3.0, D_r=3.0)
    x0, u = make_state(v_x=2.0, omega=0.2), make_control(0.2, 0.3)

    def run(h):
        x = x0.copy()
        for _ in range(int(round(1.0 / h))):
            x = integrate_step(x, u, params, h)
        return x

    ref = run(0.0005)
    ratio = np.max(np.abs(run(0.02) - ref)) / np.max(np.abs(run(0.01) - ref))
    record(Verdict(7, "simulator", worst <= 1e-12 and ratio >= 8,
                   f"transcription max error {worst:.1e}, step-halving ratio {ratio:.1f}"))


# criterion 8: CLI determinism ---------------------------------------------------------

def _cli(*args, cwd):
    out = subprocess.run([sys.executable, "-m", "metampc.cli", *args], cwd=cwd, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    return out.stdout


def _csv_without_wall(path):
    with open(path) as fh:
        return [{k: v for k, v in row.items() if not k.startswith("wall")} for row in csv.DictReader(fh)]


def _jsonl_without_wall(path):
    with open(path) as fh:
        return strip_wall([json.loads(line) for line in fh if line.strip()])


def _pipeline(root):
    os.makedirs(root)
    with open(os.path.join(root, "pretrain.json"), "w") as fh:
        json.dump({"model": {"hidden_size": 6, "head_size": 6}, "members": 2,
                   "meta": {"episodes": 3, "tasks_per_batch": 2}}, fh)
    with open(os.path.join(root, "run.json"), "w") as fh:
        json.dump({"buffer_size": 40, "switch_steps": 2, "mppi": {"M": 16},
                   "meta_checkpoint": "ckpt/final", "pooled_checkpoint": "ckpt/final"}, fh)
    with open(os.path.join(root, "diag.json"), "w") as fh:
        json.dump({"buffer_size": 60}, fh)
    stdout = [
        _cli("gen-data", "--tasks", "3", "--seed", "4", "--out", "data/tasks.jsonl", cwd=root),
        _cli("pretrain", "--config", "pretrain.json", "--seed", "4", "--out", "ckpt", cwd=root),
        _cli("run", "--baseline", "f", "--seeds", "2", "--out", "runs", "--config", "run.json",
             "--duration", "1", cwd=root),
        _cli("run", "--baseline", "a", "--seeds", "2", "--out", "runs", "--config", "run.json",
             "--duration", "1", cwd=root),
        _cli("diag-symmetry", "--checkpoint", "random", "--config", "diag.json", "--tasks", "2",
             "--probes", "4", "--adapt-steps", "2", "--members", "2", "--out", "diag/sym.json", cwd=root),
        _cli("report", "--in", "runs", cwd=root),
    ]
    return stdout


def test_criterion_8_cli_determinism(tmp_path):
    first, second = str(tmp_path / "one"), str(tmp_path / "two")
    out_a, out_b = _pipeline(first), _pipeline(second)
    mismatches = [i for i, (a, b) in enumerate(zip(out_a, out_b)) if a != b]
    walled = {os.path.join("ckpt", "train_log.csv")}
    for folder, _, files in os.walk(first):
        for name in files:
            rel = os.path.relpath(os.path.join(folder, name), first)
            a, b = os.path.join(first, rel), os.path.join(second, rel)
            if not os.path.exists(b):
                mismatches.append(rel)
            elif rel in walled:
                if _csv_without_wall(a) != _csv_without_wall(b):
                    mismatches.append(rel)
            elif rel.startswith("runs") and os.path.basename(rel).startswith("seed_"):
                if _jsonl_without_wall(a) != _jsonl_without_wall(b):
                    mismatches.append(rel)
            elif not filecmp.cmp(a, b, shallow=False):
                mismatches.append(rel)
    checked = sum(len(files) for _, _, files in os.walk(first))
    record(Verdict(8, "determinism", not mismatches,
                   f"{checked} output files and 6 stdout streams compared; mismatches: {mismatches or 'none'}"))
