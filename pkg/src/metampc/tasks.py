"""Randomized dynamics tasks for meta-training.

A task is one random vehicle driven by a random smooth Fourier action
sequence.  The delay-shifted trajectory is cut into overlapping history
windows, each paired with the finite-difference derivative of the dynamic
state that follows it.

Window arrays have shape ``(N, n + 1, 5)`` with the last axis
``(v_x, v_y, omega, d, delta_cmd)`` in SI units, oldest sample first.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from typing import Iterator

import numpy as np

from .vehicle import (
    OMEGA, VX, DelayedTrajectory, VehicleParams, make_state, simulate, simulate_delayed,
)

log = logging.getLogger(__name__)

GRAVITY = 9.81
DYN_SLICE = slice(VX, OMEGA + 1)
INPUT_DIM = 5

# D_f and D_r ranges are expressed as multiples of the vehicle's weight m*g.
LOAD_SCALED = ("D_f", "D_r")

DEFAULT_RANGES = {
    "m": (2.0, 6.0),
    "I_z": (0.03, 0.2),
    "l_f": (0.12, 0.22),
    "l_r": (0.12, 0.22),
    "B_f": (4.0, 12.0),
    "C_f": (1.2, 2.2),
    "D_f": (0.5, 1.2),
    "B_r": (4.0, 12.0),
    "C_r": (1.2, 2.2),
    "D_r": (0.5, 1.2),
    "C_m1": (15.0, 30.0),
    "C_m2": (2.0, 4.0),
    "C_lf": (0.0, 2.0),
    "C_d": (0.0, 0.2),
    "K_d": (0.3, 0.45),
    "K_bias": (-0.1, 0.1),
    "t_d": (0.0, 0.1),
}


@dataclasses.dataclass(frozen=True)
class ParamRanges:
    bounds: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_RANGES))

    def __post_init__(self):
        missing = set(VehicleParams.field_names()) - set(self.bounds)
        if missing:
            raise ValueError(f"ranges missing for {sorted(missing)}")
        for name, (lo, hi) in self.bounds.items():
            if lo > hi:
                raise ValueError(f"range for {name} has lo > hi")
        for name in ("m", "I_z", "l_f", "l_r", "K_d"):
            if self.bounds[name][0] <= 0:
                raise ValueError(f"{name} must be strictly positive")
        for name in ("t_d", "D_f", "D_r"):
            if self.bounds[name][0] < 0:
                raise ValueError(f"{name} must be non-negative")

    def with_bounds(self, **bounds) -> "ParamRanges":
        return ParamRanges({**self.bounds, **bounds})

    def to_dict(self) -> dict:
        return {k: [float(lo), float(hi)] for k, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ParamRanges":
        merged = dict(DEFAULT_RANGES)
        merged.update({k: tuple(v) for k, v in data.items()})
        return cls(merged)

    @classmethod
    def load(cls, path) -> "ParamRanges":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sample_task_params(ranges: ParamRanges, rng: np.random.Generator) -> VehicleParams:
    # Draw in a fixed field order so the stream is stable.
    values = {}
    for name in VehicleParams.field_names():
        lo, hi = ranges.bounds[name]
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    for name in LOAD_SCALED:
        values[name] *= values["m"] * GRAVITY
    return VehicleParams(**values)


@dataclasses.dataclass(frozen=True)
class FourierActionSpec:
    """Smooth random action family ``u(t) = C_0 + sum_k C_k sin(2 pi t / (k dt S))``.

    ``period_scale`` is S; with ``dt * S = 1 s`` the k-th harmonic has a
    k-second period.
    """

    n_terms: int = 6
    dt: float = 0.05
    t_h: float = 10.0
    period_scale: float = 20.0
    coefficients: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return int(round(self.t_h / self.dt))

    def with_coefficients(self, coefficients) -> "FourierActionSpec":
        return dataclasses.replace(self, coefficients=np.asarray(coefficients, dtype=float))


def sample_fourier_coefficients(n_terms: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``(n_terms, 2)`` coefficients in [-1, 1] shifted so each column sums to 1."""
    if n_terms < 1:
        raise ValueError("need at least one Fourier term")
    raw = rng.uniform(-1.0, 1.0, size=(n_terms, 2))
    return raw + (1.0 - raw.sum(axis=0)) / n_terms


def fourier_series(coefficients: np.ndarray, times: np.ndarray, dt: float, period_scale: float) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=float)
    out = np.broadcast_to(coefficients[0], (len(times), 2)).copy()
    for k in range(1, coefficients.shape[0]):
        out += np.sin(2.0 * np.pi * times / (k * dt * period_scale))[:, None] * coefficients[k]
    return out


def sample_action_sequence(spec: FourierActionSpec, rng: np.random.Generator | None = None):
    """Evaluate the Fourier family on ``[0, t_h)`` and clamp to the actuator box.

    Coefficients come from ``spec.coefficients`` when set, otherwise they are
    drawn from ``rng``.  Returns ``(actions, coefficients, clamp_fraction)``.
    """
    coefficients = spec.coefficients
    if coefficients is None:
        coefficients = sample_fourier_coefficients(spec.n_terms, rng)
    times = np.arange(spec.n_samples) * spec.dt
    raw = fourier_series(coefficients, times, spec.dt, spec.period_scale)
    clamped = np.clip(raw, -1.0, 1.0)
    fraction = float(np.mean(np.any(clamped != raw, axis=1)))
    return clamped, coefficients, fraction


def make_windows(states, actions, n: int, dt: float):
    """Slide a length-(n+1) window over aligned (dynamic state, action) pairs.

    ``states`` may be full 6-d states or 3-d dynamic states.  Window ``j``
    ends at pair ``j + n`` and its target is the forward difference of the
    dynamic state there.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.shape[0] != actions.shape[0]:
        raise ValueError("states and actions must have equal length")
    if states.shape[0] < n + 2:
        raise ValueError(f"need at least n+2={n + 2} pairs, got {states.shape[0]}")
    dyn = states[:, DYN_SLICE] if states.shape[-1] == 6 else states
    pairs = np.concatenate([dyn, actions], axis=-1)
    count = states.shape[0] - n - 1
    index = np.arange(count)[:, None] + np.arange(n + 1)[None, :]
    windows = pairs[index]
    targets = (dyn[n + 1:] - dyn[n:-1]) / dt
    return windows, targets


@dataclasses.dataclass
class TaskDataset:
    windows: np.ndarray
    targets: np.ndarray
    params: VehicleParams
    dt: float
    trajectory: DelayedTrajectory | None = None

    def __len__(self) -> int:
        return self.windows.shape[0]

    def split(self, support_fraction: float = 0.5):
        """Contiguous split into (support, query) window/target pairs."""
        if not 0.0 < support_fraction < 1.0:
            raise ValueError("support_fraction must lie in (0, 1)")
        cut = int(round(len(self) * support_fraction))
        return (self.windows[:cut], self.targets[:cut]), (self.windows[cut:], self.targets[cut:])

    def to_record(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "dt": self.dt,
            "windows": self.windows.tolist(),
            "targets": self.targets.tolist(),
        }

    @classmethod
    def from_record(cls, record: dict) -> "TaskDataset":
        return cls(
            windows=np.asarray(record["windows"], dtype=float),
            targets=np.asarray(record["targets"], dtype=float),
            params=VehicleParams.from_dict(record["params"]),
            dt=float(record["dt"]),
        )


@dataclasses.dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for task generation beyond parameter ranges and the action family."""

    n: int = 10
    initial_speed: tuple[float, float] = (0.5, 3.0)
    speed_envelope: tuple[float, float] = (-0.05, 5.0)
    max_retries: int = 50


class TaskGenerationError(RuntimeError):
    pass


def task_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for task ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _draw_candidate(ranges, spec, config, rng):
    params = sample_task_params(ranges, rng)
    actions, coefficients, fraction = sample_action_sequence(spec, rng)
    v0 = rng.uniform(*config.initial_speed)
    return params, actions, make_state(v_x=v0), fraction


def _valid(raw, config, params, spec, n) -> bool:
    lo, hi = config.speed_envelope
    v_x = raw[:, VX]
    delay = params.delay_steps(spec.dt)
    long_enough = spec.n_samples - delay >= n + 2
    return bool(long_enough and np.all(np.isfinite(raw)) and v_x.min() >= lo and v_x.max() <= hi)


def generate_tasks(ranges: ParamRanges, spec: FourierActionSpec, config: GeneratorConfig,
                   seed: int, indices) -> list[TaskDataset]:
    """Generate the tasks with the given indices, each from ``task_rng(seed, index)``.

    Because every task owns its stream, any subset can be generated in any
    order or in parallel and yields the same data.
    """
    return [generate_task(ranges, spec, config.n, task_rng(seed, i), config) for i in indices]


def generate_task(ranges: ParamRanges, spec: FourierActionSpec, n: int, rng: np.random.Generator,
                  config: GeneratorConfig | None = None) -> TaskDataset:
    """Generate one task from ``rng`` (a stream the caller owns).

    Candidates that leave the speed envelope, or are too short for one window
    after the delay shift, are redrawn from the same stream.
    """
    config = dataclasses.replace(config or GeneratorConfig(), n=n)
    for _ in range(config.max_retries + 1):
        params, actions, x0, fraction = _draw_candidate(ranges, spec, config, rng)
        try:
            raw = simulate(x0, actions, params, spec.dt)
        except FloatingPointError:
            continue
        if _valid(raw, config, params, spec, n):
            log.debug("task accepted, clamped fraction %.3f", fraction)
            delayed = simulate_delayed(x0, actions, params, spec.dt, raw=raw)
            windows, targets = make_windows(delayed.aligned_states, delayed.aligned_actions, n, spec.dt)
            return TaskDataset(windows, targets, params, spec.dt, delayed)
    raise TaskGenerationError(f"no valid task in {config.max_retries} retries")


def generate_dataset(ranges: ParamRanges, spec: FourierActionSpec, config: GeneratorConfig,
                     n_tasks: int, seed: int) -> list[TaskDataset]:
    return generate_tasks(ranges, spec, config, seed, range(n_tasks))


def write_jsonl(path, tasks: list[TaskDataset]) -> None:
    with open(path, "w") as fh:
        for task in tasks:
            fh.write(json.dumps(task.to_record(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> Iterator[TaskDataset]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield TaskDataset.from_record(json.loads(line))
