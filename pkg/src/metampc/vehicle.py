"""Dynamic bicycle model with Pacejka lateral tires, steering bias and actuation delay.

States are arrays whose last axis is ``(p_x, p_y, phi, v_x, v_y, omega)``;
controls are arrays whose last axis is ``(d, delta_cmd)``.  Every function
broadcasts over leading axes, and the fields of :class:`VehicleParams` may be
scalars or arrays (one entry per batched vehicle).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from typing import NamedTuple

import numpy as np

from . import _kernels

PX, PY, PHI, VX, VY, OMEGA = range(6)
THROTTLE, STEER = range(2)
STATE_DIM = 6
CONTROL_DIM = 2

LOW_SPEED = 0.3
TRAJECTORY_HEADER = ("t", "p_x", "p_y", "phi", "v_x", "v_y", "omega", "d", "delta_cmd")

# Largest |lambda| * h for which explicit RK4 stays inside its stability region
# on the real axis is ~2.78; keep a margin.
_RK4_STABLE = 2.0
_MAX_SUBSTEPS = 10000


class SimulationError(FloatingPointError):
    """Raised when the plant produces or receives a non-finite state."""

    def __init__(self, message: str, state: np.ndarray | None = None):
        super().__init__(message)
        self.state = state


@dataclasses.dataclass(frozen=True)
class VehicleParams:
    m: float
    I_z: float
    l_f: float
    l_r: float
    B_f: float
    C_f: float
    D_f: float
    B_r: float
    C_r: float
    D_r: float
    C_m1: float
    C_m2: float
    C_lf: float
    C_d: float
    K_d: float = 1.0
    K_bias: float = 0.0
    t_d: float = 0.0

    def __post_init__(self):
        checks = {
            "m": np.all(np.asarray(self.m) > 0),
            "I_z": np.all(np.asarray(self.I_z) > 0),
            "l_f": np.all(np.asarray(self.l_f) > 0),
            "l_r": np.all(np.asarray(self.l_r) > 0),
            "t_d": np.all(np.asarray(self.t_d) >= 0),
            "D_f": np.all(np.asarray(self.D_f) >= 0),
            "D_r": np.all(np.asarray(self.D_r) >= 0),
            "K_d": np.all(np.asarray(self.K_d) > 0),
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid vehicle parameters: {', '.join(bad)}")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    def to_dict(self) -> dict:
        return {k: _to_builtin(getattr(self, k)) for k in self.field_names()}

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ValueError(f"unknown parameter fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VehicleParams":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "VehicleParams":
        return dataclasses.replace(self, **changes)

    @classmethod
    def stack(cls, params: list["VehicleParams"]) -> "VehicleParams":
        """Batch several parameter sets into one with array-valued fields."""
        return cls(**{k: np.array([getattr(p, k) for p in params], dtype=float)
                      for k in cls.field_names()})

    def unstack(self) -> list["VehicleParams"]:
        arrays = {k: np.atleast_1d(getattr(self, k)) for k in self.field_names()}
        count = max(len(a) for a in arrays.values())
        return [VehicleParams(**{k: float(np.broadcast_to(a, (count,))[i])
                                 for k, a in arrays.items()}) for i in range(count)]

    def delay_steps(self, dt: float) -> int | np.ndarray:
        steps = np.rint(np.asarray(self.t_d) / dt).astype(int)
        return int(steps) if steps.ndim == 0 else steps


def _to_builtin(value):
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr.tolist()


class TireState(NamedTuple):
    F_rx: np.ndarray
    F_fy: np.ndarray
    F_ry: np.ndarray
    alpha_f: np.ndarray
    alpha_r: np.ndarray


def make_state(p_x=0.0, p_y=0.0, phi=0.0, v_x=0.0, v_y=0.0, omega=0.0) -> np.ndarray:
    return np.array([p_x, p_y, phi, v_x, v_y, omega], dtype=float)


def make_control(d=0.0, delta_cmd=0.0) -> np.ndarray:
    """Control vector clamped to the actuator box [-1, 1]^2."""
    return np.clip(np.array([d, delta_cmd], dtype=float), -1.0, 1.0)


def effective_steering(delta_cmd, params: VehicleParams):
    return params.K_d * delta_cmd + params.K_bias


def pacejka(alpha, B, C, D):
    return D * np.sin(C * np.arctan(B * alpha))


def tire_forces(state, delta, d, params: VehicleParams) -> TireState:
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise SimulationError("non-finite state passed to tire_forces", state)
    v_x, v_y, omega = state[..., VX], state[..., VY], state[..., OMEGA]
    # Slip angles are undefined at rest; freeze the denominator at LOW_SPEED
    # and fade rolling resistance and braking in below it so the car comes
    # to rest instead of reversing.
    v_eff = np.maximum(v_x, LOW_SPEED)
    fade = np.clip(v_x / LOW_SPEED, -1.0, 1.0)
    drive = (params.C_m1 - params.C_m2 * v_x) * d
    drive = np.where(d < 0, drive * np.maximum(fade, 0.0), drive)
    F_rx = drive - params.C_lf * fade - params.C_d * v_x * np.abs(v_x)
    alpha_f = delta - np.arctan((omega * params.l_f + v_y) / v_eff)
    alpha_r = np.arctan((omega * params.l_r - v_y) / v_eff)
    F_fy = pacejka(alpha_f, params.B_f, params.C_f, params.D_f)
    F_ry = pacejka(alpha_r, params.B_r, params.C_r, params.D_r)
    return TireState(F_rx, F_fy, F_ry, alpha_f, alpha_r)


def state_derivative(state, control, params: VehicleParams) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    delta = effective_steering(control[..., STEER], params)
    tires = tire_forces(state, delta, control[..., THROTTLE], params)
    phi, v_x, v_y, omega = state[..., PHI], state[..., VX], state[..., VY], state[..., OMEGA]
    cos_phi, sin_phi = np.cos(phi), np.sin(phi)
    cos_d, sin_d = np.cos(delta), np.sin(delta)
    m = params.m
    rates = [
        v_x * cos_phi - v_y * sin_phi,
        v_x * sin_phi + v_y * cos_phi,
        omega,
        (tires.F_rx - tires.F_fy * sin_d + m * v_y * omega) / m,
        (tires.F_ry + tires.F_fy * cos_d - m * v_x * omega) / m,
        (tires.F_fy * params.l_f * cos_d - tires.F_ry * params.l_r) / params.I_z,
    ]
    shape = np.broadcast_shapes(*(np.shape(r) for r in rates))
    return np.stack([np.broadcast_to(r, shape) for r in rates], axis=-1)


def integrate_step(state, control, params: VehicleParams, dt: float) -> np.ndarray:
    """One classical RK4 step of length ``dt`` with the control held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    state = np.asarray(state, dtype=float)
    k1 = state_derivative(state, control, params)
    k2 = state_derivative(state + 0.5 * dt * k1, control, params)
    k3 = state_derivative(state + 0.5 * dt * k2, control, params)
    k4 = state_derivative(state + dt * k3, control, params)
    out = state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationError("RK4 step produced a non-finite state", state)
    return out


def stiffness_bound(state, params: VehicleParams) -> np.ndarray:
    """Upper estimate of the fastest lateral/yaw eigenvalue (1/s) at ``state``."""
    v = np.maximum(np.asarray(state)[..., VX], LOW_SPEED)
    c_f = params.B_f * params.C_f * params.D_f
    c_r = params.B_r * params.C_r * params.D_r
    lateral = (c_f + c_r) / (params.m * v)
    yaw = (c_f * params.l_f**2 + c_r * params.l_r**2) / (params.I_z * v)
    return lateral + yaw


def substep_count(state, params: VehicleParams, dt: float) -> np.ndarray:
    ratio = dt * stiffness_bound(state, params) / _RK4_STABLE
    return np.maximum(1, np.ceil(np.minimum(np.nan_to_num(ratio, nan=np.inf), _MAX_SUBSTEPS + 1))).astype(int)


def advance(state, control, params: VehicleParams, dt: float) -> np.ndarray:
    """Hold ``control`` for ``dt`` using as many RK4 substeps as stiffness needs.

    Batched states get their own substep counts; elements that finish early
    are frozen while the others keep stepping, so each vehicle's result does
    not depend on what it is batched with.
    """
    state = np.asarray(state, dtype=float)
    counts = substep_count(state, params, dt)
    if np.any(counts > _MAX_SUBSTEPS):
        raise SimulationError("parameters too stiff to integrate", state)
    if counts.ndim == 0:
        h = dt / int(counts)
        for _ in range(int(counts)):
            state = integrate_step(state, control, params, h)
        return state
    h = (dt / counts)[..., None]
    for i in range(int(counts.max())):
        active = (i < counts)[..., None]
        stepped = _rk4_varstep(state, control, params, h)
        state = np.where(active, stepped, state)
    if not np.all(np.isfinite(state)):
        raise SimulationError("plant produced a non-finite state", state)
    return state


def _rk4_varstep(state, control, params, h):
    k1 = state_derivative(state, control, params)
    k2 = state_derivative(state + 0.5 * h * k1, control, params)
    k3 = state_derivative(state + 0.5 * h * k2, control, params)
    k4 = state_derivative(state + h * k3, control, params)
    return state + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(initial, actions, params: VehicleParams, dt: float) -> np.ndarray:
    """Zero-order-hold simulation; returns ``len(actions) + 1`` states.

    A single vehicle runs through the compiled kernel; batched vehicles
    (``initial`` of shape ``(B, 6)``) step through :func:`advance`.
    """
    actions = np.asarray(actions, dtype=float)
    initial = np.asarray(initial, dtype=float)
    if initial.ndim == 1:
        out = _kernels.simulate(initial, actions, params_vector(params), dt)
        if not np.all(np.isfinite(out)):
            raise SimulationError("plant produced a non-finite state", out[-1])
        return out
    states = [initial]
    for u in actions:
        states.append(advance(states[-1], u, params, dt))
    return np.stack(states)


def params_vector(params: VehicleParams) -> np.ndarray:
    return np.array([float(getattr(params, k)) for k in VehicleParams.field_names()])


def advance_single(state, control, params: VehicleParams, dt: float) -> np.ndarray:
    """Compiled equivalent of :func:`advance` for one vehicle."""
    out = _kernels.advance(np.asarray(state, dtype=float), np.asarray(control, dtype=float),
                           params_vector(params), dt)
    if not np.all(np.isfinite(out)):
        raise SimulationError("plant produced a non-finite state", np.asarray(state))
    return out


@dataclasses.dataclass
class DelayedTrajectory:
    """A simulation relabelled so that states lag actions by the actuation delay.

    ``states[j]`` is the plant state at time ``(delay + j) * dt`` (``j`` over the
    whole shifted window ``[t_d, t_d + t_h)``).  ``aligned_states[j]`` and
    ``aligned_actions[j]`` are the pair observed at time ``(delay + j) * dt``
    for times in ``[t_d, t_h)``: the action issued then and the state whose
    response to it only appears ``delay`` samples later.
    """

    dt: float
    delay: int
    states: np.ndarray
    aligned_states: np.ndarray
    aligned_actions: np.ndarray

    @property
    def aligned_times(self) -> np.ndarray:
        n = self.aligned_states.shape[0]
        return (self.delay + np.arange(n)) * self.dt


def simulate_delayed(initial, actions, params: VehicleParams, dt: float,
                     raw: np.ndarray | None = None) -> DelayedTrajectory:
    """Simulate with ZOH actions and shift the states by the actuation delay.

    ``raw`` may carry an already computed undelayed simulation of the same
    inputs (``len(actions) + 1`` states) to avoid recomputation.
    """
    actions = np.asarray(actions, dtype=float)
    horizon = actions.shape[0]
    delay = params.delay_steps(dt)
    if np.ndim(delay):
        raise ValueError("simulate_delayed expects a single vehicle")
    if horizon <= delay:
        raise ValueError(f"t_h ({horizon * dt:g} s) must exceed t_d ({delay * dt:g} s)")
    if raw is None:
        raw = simulate(initial, actions, params, dt)
    states = raw[:horizon]
    return DelayedTrajectory(
        dt=dt,
        delay=delay,
        states=states,
        aligned_states=states[: horizon - delay],
        aligned_actions=actions[delay:],
    )


def write_trajectory_csv(path, times, states, controls) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_HEADER)
        for t, x, u in zip(times, states, controls):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected trajectory header {header}")
        rows = np.array([[float(v) for v in row] for row in reader])
    return rows[:, 0], rows[:, 1:7], rows[:, 7:9]


def nominal_params() -> VehicleParams:
    """A mid-range 1/10-scale car, handy for demos and tests."""
    m = 4.0
    return VehicleParams(
        m=m, I_z=0.1, l_f=0.17, l_r=0.17,
        B_f=8.0, C_f=1.7, D_f=0.9 * m * 9.81,
        B_r=8.0, C_r=1.7, D_r=0.9 * m * 9.81,
        C_m1=22.0, C_m2=3.0, C_lf=1.0, C_d=0.1,
        K_d=0.36, K_bias=0.0, t_d=0.0,
    )


def pacejka_peak_slip(B: float, C: float) -> float:
    """Slip angle at which ``D sin(C atan(B a))`` reaches ``D`` (requires C > 1)."""
    return math.tan(math.pi / (2.0 * C)) / B
