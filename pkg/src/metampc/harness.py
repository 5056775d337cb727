"""Closed-loop oval-track experiments, baselines a to g, and diagnostics.

Every episode draws one vehicle from the training ranges, drives a warm-up
phase with a simple tracking controller until the experience buffer is
full, then hands over to the baseline's controller.  Baselines:

    a  analytic model, every parameter scaled by U[0.7, 1.3], no adaptation
    b  analytic model with the true parameters but no actuation delay
    c  learned ensemble from random initialisation, adapted online
    d  meta-learned ensemble, adapted online, no uncertainty cost
    e  ensemble pre-trained without inner steps (pooled), adapted online
    f  meta-learned ensemble, adapted online, with uncertainty cost
    g  analytic model, known geometry and drivetrain, tire and drag
       parameters adapted online by finite-difference gradients
"""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import math
from typing import Sequence

import numpy as np

from .adapter import ExperienceBuffer, adapt_step
from .ensemble import Ensemble
from .mppi import AnalyticDynamics, LearnedDynamics, MPPIConfig, mppi_step
from .seqmodel import ModelConfig
from .tasks import DEFAULT_RANGES, GRAVITY, LOAD_SCALED, ParamRanges, sample_task_params
from .track import LapCounter, TrackSpec, make_oval_reference
from .vehicle import (
    OMEGA, PHI, PX, PY, VX, VY, SimulationError, VehicleParams, advance_single, make_state, params_vector,
)
from . import _kernels

log = logging.getLogger(__name__)

BASELINES = ("a", "b", "c", "d", "e", "f", "g")
LEARNED = ("c", "d", "e", "f")
KNOWN_FOR_G = ("m", "I_z", "l_f", "l_r", "C_m1", "C_m2")
ADAPTED_FOR_G = ("B_f", "C_f", "D_f", "B_r", "C_r", "D_r", "C_lf", "C_d")

# independent random streams within one episode
_STREAM_PLANT, _STREAM_NOISE, _STREAM_PERTURB, _STREAM_INIT = range(4)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, which]))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    baseline: str
    seed: int = 0
    duration: float = 60.0
    dt: float = 0.05
    track: TrackSpec = TrackSpec()
    mppi: MPPIConfig = MPPIConfig()
    buffer_size: int = 300
    lr: float = 3.5e-5
    adapt_every: int = 1
    switch_steps: int = 50
    max_grad_norm: float | None = None
    warmup_speed: float = 1.0
    corridor: float = 3.0
    perturb: tuple = (0.7, 1.3)
    g_lr: float = 0.05
    members: int = 5
    model: ModelConfig = ModelConfig()
    ranges: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_RANGES))
    meta_checkpoint: str | None = None
    pooled_checkpoint: str | None = None
    budget_s: float | None = None

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; expected one of {BASELINES}")
        if self.dt != self.mppi.dt:
            raise ValueError("run dt and MPPI dt differ")

    @property
    def gamma_unc(self) -> float:
        return 0.0 if self.baseline == "d" else self.mppi.gamma_unc

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mppi"] = self.mppi.to_dict()
        out["perturb"] = list(self.perturb)
        out["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "track" in data:
            data["track"] = TrackSpec(**data["track"])
        if "mppi" in data:
            data["mppi"] = MPPIConfig.from_dict(data["mppi"])
        if "model" in data:
            data["model"] = ModelConfig(**data["model"])
        if "perturb" in data:
            data["perturb"] = tuple(data["perturb"])
        if "ranges" in data:
            data["ranges"] = {k: tuple(v) for k, v in data["ranges"].items()}
        return cls(**data)


@dataclasses.dataclass
class Metrics:
    baseline: str
    seed: int
    mean_abs_lateral_error: float
    average_speed: float
    laps: int
    crashed: bool
    steps: int
    excursions: int
    warmup_mean_abs_lateral_error: float
    params: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def count_excursions(errors, factor: float = 2.0) -> int:
    """Number of separate runs where ``|error|`` exceeds ``factor`` times its median."""
    errors = np.abs(np.asarray(errors, dtype=float))
    if errors.size == 0:
        return 0
    above = errors > factor * np.median(errors)
    return int(np.count_nonzero(above[1:] & ~above[:-1]) + int(above[0]))


# controllers -------------------------------------------------------------------

class WarmupController:
    """Slow pure-pursuit steering with proportional speed control.

    It only assumes a nominal wheelbase and steering gain, so it works for
    any vehicle from the training ranges at low speed.
    """

    def __init__(self, track: TrackSpec, speed: float, lookahead: float = 0.8,
                 wheelbase: float = 0.34, steer_gain: float = 0.375):
        self.track, self.speed = track, speed
        self.lookahead, self.wheelbase, self.steer_gain = lookahead, wheelbase, steer_gain

    def __call__(self, state) -> np.ndarray:
        s, _ = self.track.project(state[PX], state[PY])
        x, y, _ = self.track.point(s + self.lookahead)
        alpha = math.atan2(float(y) - state[PY], float(x) - state[PX]) - state[PHI]
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        delta = math.atan2(2.0 * self.wheelbase * math.sin(alpha), self.lookahead)
        throttle = 0.08 + 0.5 * (self.speed - state[VX])
        return np.clip([throttle, delta / self.steer_gain], -1.0, 1.0)


class MPPIController:
    def __init__(self, dynamics, config: MPPIConfig, track: TrackSpec, rng: np.random.Generator):
        self.dynamics, self.config, self.track, self.rng = dynamics, config, track, rng
        self.plan = np.zeros((config.K_h, 2))

    def __call__(self, state, history):
        ref = make_oval_reference(self.track, self.config.K_h, state, self.config.dt)
        control, self.plan, diag = mppi_step(self.dynamics, history, state, self.plan, ref,
                                             self.config, self.rng)
        return control, diag


# baseline g -----------------------------------------------------------------------

def _one_step_loss(vector, states, controls, targets, dt):
    pred = _kernels.step_many(states, controls, vector, dt)
    resid = (pred[:, VX:OMEGA + 1] - states[:, VX:OMEGA + 1]) / dt - targets
    value = float(np.mean(resid**2))
    return value if np.isfinite(value) else math.inf


def param_buffer_data(buffer: ExperienceBuffer, delay: int):
    """One-step pairs ``(state, applied control, target derivative)`` from a buffer.

    The command applied during a step is the one issued ``delay`` steps
    earlier, so pairs whose applied command predates the buffer are dropped.
    """
    xs, us, ys = [], [], []
    for seg in buffer.segments():
        dyn, cmd = seg[:, 1:4], seg[:, 4:6]
        count = len(seg) - 1 - delay
        if count < 1:
            continue
        state = np.zeros((count, 6))
        state[:, VX:OMEGA + 1] = dyn[delay:-1]
        xs.append(state)
        us.append(cmd[:count])
        ys.append((dyn[delay + 1:] - dyn[delay:-1]) / buffer.dt)
    if not xs:
        return np.empty((0, 6)), np.empty((0, 2)), np.empty((0, 3))
    return np.concatenate(xs), np.concatenate(us), np.concatenate(ys)


POSITIVE_FLOOR = {"B_f": 1e-3, "C_f": 1e-3, "D_f": 1e-3, "B_r": 1e-3, "C_r": 1e-3, "D_r": 1e-3,
                  "C_lf": 0.0, "C_d": 0.0}


def param_scales(ranges: dict, mass: float) -> np.ndarray:
    scales = []
    for name in ADAPTED_FOR_G:
        lo, hi = ranges[name]
        width = hi - lo
        if name in LOAD_SCALED:
            width *= mass * GRAVITY
        scales.append(width if width > 0 else 1.0)
    return np.array(scales)


def adapt_params_baseline(buffer: ExperienceBuffer, estimate: VehicleParams, lr: float,
                          scales: np.ndarray | None = None, rel_step: float = 1e-6,
                          halvings: int = 8):
    """One projected gradient step on the tire and drag parameters.

    The objective is the mean squared one-step derivative error over the
    buffer.  Its gradient comes from central finite differences in
    coordinates ``p / scale``.  The step moves ``lr`` (in those coordinates)
    along the negative normalised gradient and is halved until the error
    drops; if it never does, the estimate is kept.  Returns
    ``(new_estimate, loss)`` with the loss before the step.
    """
    if scales is None:
        scales = np.ones(len(ADAPTED_FOR_G))
    states, controls, targets = param_buffer_data(buffer, estimate.delay_steps(buffer.dt))
    if len(states) == 0:
        return estimate, math.nan

    def objective(params):
        return _one_step_loss(params_vector(params), states, controls, targets, buffer.dt)

    loss = objective(estimate)
    if lr == 0 or not np.isfinite(loss):
        return estimate, loss
    names = VehicleParams.field_names()
    base = params_vector(estimate)
    grad = np.zeros(len(ADAPTED_FOR_G))
    for j, name in enumerate(ADAPTED_FOR_G):
        i = names.index(name)
        h = rel_step * scales[j]
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        grad[j] = (_one_step_loss(up, states, controls, targets, buffer.dt)
                   - _one_step_loss(down, states, controls, targets, buffer.dt)) / (2 * h) * scales[j]
    norm = float(np.linalg.norm(grad))
    if not np.isfinite(norm) or norm == 0.0:
        return estimate, loss
    direction = grad / norm
    step = lr
    for _ in range(halvings + 1):
        changes = {name: max(getattr(estimate, name) - step * direction[j] * scales[j], POSITIVE_FLOOR[name])
                   for j, name in enumerate(ADAPTED_FOR_G)}
        candidate = estimate.replace(**changes)
        if objective(candidate) < loss:
            return candidate, loss
        step *= 0.5
    return estimate, loss


def initial_estimate_g(true: VehicleParams, ranges: dict) -> VehicleParams:
    """Known geometry, mass, inertia, drivetrain and delay; everything else from range midpoints."""
    values = {}
    for name in VehicleParams.field_names():
        lo, hi = ranges[name]
        values[name] = 0.5 * (lo + hi)
    for name in LOAD_SCALED:
        values[name] *= true.m * GRAVITY
    for name in KNOWN_FOR_G + ("t_d",):
        values[name] = getattr(true, name)
    values["K_bias"] = 0.0
    return VehicleParams(**values)


def perturbed_params(true: VehicleParams, rng: np.random.Generator, bounds=(0.7, 1.3)) -> VehicleParams:
    factors = rng.uniform(bounds[0], bounds[1], size=len(VehicleParams.field_names()))
    return VehicleParams(**{k: getattr(true, k) * f for k, f in zip(VehicleParams.field_names(), factors)})


# episodes -----------------------------------------------------------------------------

def episode_params(config: RunConfig) -> VehicleParams:
    return sample_task_params(ParamRanges(dict(config.ranges)), stream(config.seed, _STREAM_PLANT))


def load_ensemble(config: RunConfig) -> Ensemble | None:
    if config.baseline in ("d", "f"):
        if not config.meta_checkpoint:
            raise FileNotFoundError(f"baseline {config.baseline} needs a meta-learned checkpoint")
        return Ensemble.load(config.meta_checkpoint)
    if config.baseline == "e":
        if not config.pooled_checkpoint:
            raise FileNotFoundError("baseline e needs the pooled pre-training checkpoint")
        return Ensemble.load(config.pooled_checkpoint)
    if config.baseline == "c":
        seeds = stream(config.seed, _STREAM_INIT).integers(0, 2**31, size=config.members)
        return Ensemble.initialise(config.model, [int(s) for s in seeds])
    return None


def run_episode(config: RunConfig, log_path: str | None = None):
    """Run one seeded episode; returns ``(Metrics, log_rows)``.

    Log rows carry wall-clock fields under names starting with ``wall_``;
    everything else is a deterministic function of the configuration.
    """
    dt = config.dt
    track = config.track
    true = episode_params(config)
    delay = true.delay_steps(dt)
    ensemble = load_ensemble(config)
    if ensemble is not None and ensemble.config.dt != dt:
        raise ValueError("checkpoint dt differs from the run dt")
    n = ensemble.config.n if ensemble is not None else config.model.n
    mppi_config = dataclasses.replace(config.mppi, gamma_unc=config.gamma_unc)
    rng_noise = stream(config.seed, _STREAM_NOISE)

    estimate = None
    scales = None
    if config.baseline == "a":
        dynamics = AnalyticDynamics(perturbed_params(true, stream(config.seed, _STREAM_PERTURB), config.perturb), dt)
    elif config.baseline == "b":
        dynamics = AnalyticDynamics(true.replace(t_d=0.0), dt)
    elif config.baseline == "g":
        estimate = initial_estimate_g(true, config.ranges)
        scales = param_scales(config.ranges, true.m)
        dynamics = AnalyticDynamics(estimate, dt)
    else:
        dynamics = LearnedDynamics(ensemble)
    controller = MPPIController(dynamics, mppi_config, track, rng_noise)
    warmup = WarmupController(track, config.warmup_speed)

    buffer = ExperienceBuffer(config.buffer_size, dt)
    in_flight = collections.deque([np.zeros(2)] * delay)
    x0, y0, h0 = track.point(0.0)
    state = make_state(p_x=float(x0), p_y=float(y0), phi=float(h0), v_x=0.5)
    warmup_steps = config.buffer_size
    total_steps = warmup_steps + int(round(config.duration / dt))

    rows = []
    errors, speeds, warm_errors = [], [], []
    laps = None
    crashed = False
    for step in range(total_steps):
        t = step * dt
        s, lat = track.project(state[PX], state[PY])
        phase = "warmup" if step < warmup_steps else "control"
        row = {"step": step, "t": round(t, 10), "phase": phase, "state": state.tolist(),
               "lateral_error": lat, "s": s}
        if abs(lat) > config.corridor:
            crashed = True
            row["event"] = "crash"
            rows.append(row)
            break
        if phase == "warmup":
            warm_errors.append(abs(lat))
            control = warmup(state)
        else:
            if laps is None:
                laps = LapCounter(track, s)
                row["event"] = "switch"
                if ensemble is not None:
                    for _ in range(config.switch_steps):
                        result = adapt_step(ensemble, buffer, config.lr, n, None,
                                            max_grad_norm=config.max_grad_norm)
                        ensemble = result.ensemble
                    dynamics = LearnedDynamics(ensemble)
                    controller.dynamics = dynamics
            else:
                laps.update(s)
            errors.append(abs(lat))
            speeds.append(math.hypot(state[VX], state[VY]))
            control, diag = controller(state, buffer.latest(n))
            row["mppi"] = diag.to_dict()
        row["control"] = [float(c) for c in control]
        buffer.push(state, control, t)

        if phase == "control" and step % config.adapt_every == 0:
            if ensemble is not None:
                result = adapt_step(ensemble, buffer, config.lr, n, config.budget_s,
                                    max_grad_norm=config.max_grad_norm)
                row["adapt_loss"] = None if result.loss is None else float(np.mean(result.loss))
                row["adapt_applied"] = result.applied
                row["wall_adapt_ms"] = result.wall_ms
                if result.applied:
                    ensemble = result.ensemble
                    dynamics = LearnedDynamics(ensemble)
                    controller.dynamics = dynamics
            elif estimate is not None:
                estimate, loss = adapt_params_baseline(buffer, estimate, config.g_lr, scales)
                dynamics.set_params(estimate)
                row["adapt_loss"] = loss

        in_flight.append(np.asarray(control, dtype=float))
        applied = in_flight.popleft()
        try:
            state = advance_single(state, applied, true, dt)
        except SimulationError:
            crashed = True
            row["event"] = "plant_failure"
            rows.append(row)
            break
        rows.append(row)

    metrics = Metrics(
        baseline=config.baseline,
        seed=config.seed,
        mean_abs_lateral_error=float(np.mean(errors)) if errors else math.nan,
        average_speed=float(np.mean(speeds)) if speeds else math.nan,
        laps=laps.laps if laps is not None else 0,
        crashed=crashed,
        steps=len(errors),
        excursions=count_excursions(errors),
        warmup_mean_abs_lateral_error=float(np.mean(warm_errors)) if warm_errors else math.nan,
        params=true.to_dict(),
    )
    if log_path is not None:
        write_jsonl(log_path, rows)
    return metrics, rows


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def strip_wall(rows):
    """Drop wall-clock fields so logs can be compared across reruns."""
    return [{k: v for k, v in row.items() if not k.startswith("wall_")} for row in rows]


# symmetry diagnostic -------------------------------------------------------------------

def symmetry_probe(dynamics, history, steps: int = 10):
    """Terminal predicted yaw rates holding the current steer and its mirror image.

    ``history`` holds ``n + 1`` pairs; its last row is the current dynamic
    state with the command to hold.  ``dynamics`` is an ensemble or any
    object with a ``rollout`` method.
    """
    if isinstance(dynamics, Ensemble):
        dynamics = LearnedDynamics(dynamics, dtype=np.float64)
    history = np.asarray(history, dtype=float)
    current = history[-1]
    state0 = np.zeros(6)
    state0[VX:OMEGA + 1] = current[:3]
    throttle, steer = current[3], current[4]
    controls = np.empty((2, steps, 2))
    controls[0] = (throttle, steer)
    controls[1] = (throttle, -steer)
    states, _ = dynamics.rollout(history[:-1], state0, controls)
    return float(states[0, -1, OMEGA]), float(states[1, -1, OMEGA])


def left_turn_buffer(params: VehicleParams, track: TrackSpec, config: RunConfig) -> ExperienceBuffer:
    """Fill a buffer by driving the warm-up controller counter-clockwise (left turns only)."""
    dt = config.dt
    buffer = ExperienceBuffer(config.buffer_size, dt)
    warmup = WarmupController(track, config.warmup_speed)
    x0, y0, h0 = track.point(0.0)
    state = make_state(p_x=float(x0), p_y=float(y0), phi=float(h0), v_x=0.5)
    delay = params.delay_steps(dt)
    in_flight = collections.deque([np.zeros(2)] * delay)
    for step in range(config.buffer_size):
        control = warmup(state)
        buffer.push(state, control, step * dt)
        in_flight.append(control)
        state = advance_single(state, in_flight.popleft(), params, dt)
    return buffer


@dataclasses.dataclass
class SymmetryReport:
    opposite_fraction: float
    probes: int
    omega_same: list
    omega_mirror: list
    plant_opposite_fraction: float


def symmetry_experiment(ensemble: Ensemble, seeds: Sequence[int], probes: int = 100,
                        adapt_steps: int = 50, config: RunConfig | None = None,
                        min_steer: float = 0.2, zero_bias: bool = True) -> SymmetryReport:
    """Adapt on left-turn data, then probe mirror-steer predictions.

    Probes are spread evenly over the tasks given by ``seeds``; each probe is
    a buffer window whose held steering command exceeds ``min_steer`` in
    magnitude.  The same probes are also run on the true plant as a check
    that the physical answer is indeed a sign flip.  With ``zero_bias`` the
    cars have no steering offset, so a mirrored command is a mirrored wheel
    angle.
    """
    config = config or RunConfig(baseline="f")
    same, mirror, plant_opposite = [], [], []
    per_task = int(math.ceil(probes / len(seeds)))
    n = ensemble.config.n
    for seed in seeds:
        params = episode_params(dataclasses.replace(config, seed=int(seed)))
        if zero_bias:
            params = params.replace(K_bias=0.0)
        buffer = left_turn_buffer(params, config.track, config)
        adapted = ensemble
        for _ in range(adapt_steps):
            adapted = adapt_step(adapted, buffer, config.lr, n, None,
                                 max_grad_norm=config.max_grad_norm).ensemble
        rows = buffer.array()[:, 1:]
        candidates = [i for i in range(n, len(rows)) if abs(rows[i, 4]) > min_steer]
        if not candidates:
            continue
        picks = np.linspace(0, len(candidates) - 1, min(per_task, len(candidates))).round().astype(int)
        model = LearnedDynamics(adapted, dtype=np.float64)
        truth = AnalyticDynamics(params, config.dt)
        for idx in picks:
            i = candidates[idx]
            window = rows[i - n:i + 1]
            a, b = symmetry_probe(model, window)
            same.append(a)
            mirror.append(b)
            ta, tb = symmetry_probe(truth, window)
            plant_opposite.append(np.sign(ta) == -np.sign(tb) and ta != 0)
    same, mirror = same[:probes], mirror[:probes]
    opposite = [np.sign(a) == -np.sign(b) and a != 0 for a, b in zip(same, mirror)]
    return SymmetryReport(float(np.mean(opposite)), len(opposite), same, mirror,
                          float(np.mean(plant_opposite[:probes])))


def summarise(metrics: Sequence[Metrics]) -> dict:
    by = collections.defaultdict(list)
    for m in metrics:
        by[m.baseline].append(m)
    table = {}
    for baseline in sorted(by):
        ms = by[baseline]
        table[baseline] = {
            "mean_lateral_error": float(np.mean([m.mean_abs_lateral_error for m in ms])),
            "mean_speed": float(np.mean([m.average_speed for m in ms])),
            "mean_laps": float(np.mean([m.laps for m in ms])),
            "excursions": int(sum(m.excursions for m in ms)),
            "crashes": int(sum(m.crashed for m in ms)),
            "episodes": len(ms),
        }
    return table
