"""Model predictive path integral control over learned or analytic dynamics.

A dynamics model exposes ``rollout(history, state0, controls)`` returning
states of shape ``(M, K + 1, 6)`` (``states[:, 0]`` is ``state0``) and a
per-step uncertainty of shape ``(M, K)``.  ``history`` holds the ``n`` most
recent measured ``(v_x, v_y, omega, d, delta_cmd)`` pairs that precede the
current state, oldest first.
"""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple, Protocol

import numpy as np

from . import _kernels, seqmodel
from .ensemble import Ensemble, combine
from .vehicle import PHI, PX, PY, VX, VY, OMEGA, VehicleParams, params_vector


@dataclasses.dataclass(frozen=True)
class MPPIConfig:
    K_h: int = 10
    M: int = 128
    noise_std: tuple = (0.15, 0.2)
    lam: float = 0.01
    gamma_ctrl: float | None = None  # None means lam / 2
    gamma_unc: float = 10.0
    dt: float = 0.05
    position_weight: float = 1.0
    speed_weight: float = 0.5
    sentinel: float = 1e12

    def __post_init__(self):
        if self.K_h < 1 or self.M < 1:
            raise ValueError("K_h and M must be >= 1")
        if self.lam <= 0:
            raise ValueError("temperature lam must be positive")
        if len(self.noise_std) != 2 or min(self.noise_std) <= 0:
            raise ValueError("noise_std must hold two positive standard deviations")

    @property
    def ctrl_weight(self) -> float:
        return self.lam / 2.0 if self.gamma_ctrl is None else self.gamma_ctrl

    @property
    def sigma_eps(self) -> np.ndarray:
        return np.diag(np.square(self.noise_std))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["noise_std"] = list(self.noise_std)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MPPIConfig":
        data = dict(data)
        if "noise_std" in data:
            data["noise_std"] = tuple(data["noise_std"])
        return cls(**data)


class Dynamics(Protocol):
    def rollout(self, history: np.ndarray, state0: np.ndarray, controls: np.ndarray): ...


def _kinematics(state, dt):
    """Euler step of the pose rows using the current body velocities."""
    phi, v_x, v_y = state[..., PHI], state[..., VX], state[..., VY]
    cos, sin = np.cos(phi), np.sin(phi)
    return (state[..., PX] + (v_x * cos - v_y * sin) * dt,
            state[..., PY] + (v_x * sin + v_y * cos) * dt,
            phi + state[..., OMEGA] * dt)


class LearnedDynamics:
    """Ensemble rollouts with per-rollout sliding history windows.

    The window for rollout step ``k`` is the last ``n - k`` measured pairs
    followed by the ``k + 1`` simulated pairs of that rollout.  The measured
    part is the same for every sample, so its recurrent state is computed
    once per step and shared.
    """

    def __init__(self, ensemble: Ensemble, dtype=np.float32):
        self.ensemble = ensemble
        self.config = ensemble.config
        self.params = {k: v.astype(dtype) for k, v in ensemble.weights.params.items()}
        self.dtype = dtype
        H = self.config.hidden_size
        # Gate-major copies (3, members, ., H) keep every gate slice contiguous.
        p = self.params
        self._W_x = np.stack([p["W_x"][..., i * H:(i + 1) * H] for i in range(3)])
        self._b_x = np.stack([p["b_x"][..., i * H:(i + 1) * H] for i in range(3)])
        self._W_h = np.stack([p["W_h"][..., i * H:(i + 1) * H] for i in range(3)])
        self._b_h = np.stack([p["b_h"][..., i * H:(i + 1) * H] for i in range(3)])
        self.sigma_weights = np.asarray(ensemble.sigma_weights, dtype=dtype)
        if self.config.aux_size:
            raise NotImplementedError("rollouts with auxiliary features are not supported")

    def _prefix_states(self, history, horizon):
        H, n = self.config.hidden_size, self.config.n
        members = self.params["W_x"].shape[0]
        h = np.zeros((members, horizon, H), dtype=self.dtype)
        if n == 0:
            return h
        real = seqmodel.standardize(history[-n:]).astype(self.dtype)
        a_real = self._project(real)  # (3, members, n, H)
        starts = np.arange(horizon)
        for tau in range(n):
            active = (starts <= tau)[None, :, None]
            if not active.any():
                break
            stepped = self._cell(a_real[:, :, tau:tau + 1, :], h)
            h = np.where(active, stepped, h)
        return h

    def _project(self, scaled):
        return scaled @ self._W_x + self._b_x

    def _cell(self, a, h):
        # Same arithmetic as seqmodel.cell, rearranged for contiguous gate arrays.
        c = h @ self._W_h
        c += self._b_h
        rz = a[:2] + c[:2]
        rz *= 0.5
        np.tanh(rz, out=rz)
        rz += 1.0
        rz *= 0.5
        cand = rz[0] * c[2]
        cand += a[2]
        np.tanh(cand, out=cand)
        out = h - cand
        out *= rz[1]
        out += cand
        return out

    def rollout(self, history, state0, controls):
        p, n, dt = self.params, self.config.n, self.config.dt
        history = np.asarray(history, dtype=float)
        controls = np.asarray(controls, dtype=float)
        if history.shape[0] < n:
            raise ValueError(f"history holds {history.shape[0]} pairs, the model needs n={n}")
        n_samples, horizon = controls.shape[:2]
        prefix = self._prefix_states(history, horizon)
        states = np.empty((n_samples, horizon + 1, 6))
        states[:, 0] = state0
        sigma = np.empty((n_samples, horizon))
        projected = []
        scale = seqmodel.INPUT_SCALE
        for k in range(horizon):
            x = states[:, k]
            pair = np.concatenate([x[:, VX:OMEGA + 1], controls[:, k]], axis=1) * scale
            projected.append(self._project(pair.astype(self.dtype)))
            first = max(0, k - n)
            h = prefix[:, k:k + 1, :] if k < n else np.zeros_like(prefix[:, :1])
            for j in range(first, k + 1):
                h = self._cell(projected[j], h)
            pred = combine(seqmodel.head(p, h), self.sigma_weights)
            sigma[:, k] = pred.sigma_scalar
            nxt = states[:, k + 1]
            nxt[:, PX], nxt[:, PY], nxt[:, PHI] = _kinematics(x, dt)
            nxt[:, VX:OMEGA + 1] = x[:, VX:OMEGA + 1] + pred.mu * dt
        return states, sigma


class AnalyticDynamics:
    """The plant equations with given (possibly wrong) parameters.

    Actions reach the model ``delay`` steps after they are issued; the
    commands still in flight are read from the control columns of
    ``history``.
    """

    def __init__(self, params: VehicleParams, dt: float, delay: int | None = None):
        self.set_params(params)
        self.dt = dt
        self.delay = params.delay_steps(dt) if delay is None else int(delay)

    def set_params(self, params: VehicleParams) -> None:
        self.params = params
        self._vector = params_vector(params)

    def rollout(self, history, state0, controls):
        controls = np.asarray(controls, dtype=float)
        n_samples, horizon = controls.shape[:2]
        applied = controls
        if self.delay:
            pending = np.asarray(history, dtype=float)[-self.delay:, 3:5]
            if pending.shape[0] < self.delay:
                pending = np.concatenate([np.zeros((self.delay - pending.shape[0], 2)), pending])
            pending = np.broadcast_to(pending, (n_samples,) + pending.shape)
            applied = np.concatenate([pending, controls], axis=1)[:, :horizon]
        states = _kernels.rollout(np.asarray(state0, dtype=float), np.ascontiguousarray(applied),
                                  self._vector, self.dt)
        return states, np.zeros((n_samples, horizon))


# costs ---------------------------------------------------------------------------

def stage_cost(state, ref, sigma, gamma_unc: float, position_weight: float = 1.0,
               speed_weight: float = 0.5):
    """``gamma_unc * sigma`` plus weighted squared position and speed errors.

    ``ref`` has last axis ``(p_x, p_y, v)``; heading is not penalised.
    """
    state = np.asarray(state)
    ref = np.asarray(ref)
    pos = (state[..., PX] - ref[..., 0]) ** 2 + (state[..., PY] - ref[..., 1]) ** 2
    speed = (state[..., VX] - ref[..., 2]) ** 2
    return gamma_unc * np.asarray(sigma) + position_weight * pos + speed_weight * speed


def control_cost(plan, controls, config: MPPIConfig):
    """``gamma_ctrl * sum_k v_k^T Sigma^-1 u_k`` for each sample."""
    inv = 1.0 / np.square(np.asarray(config.noise_std, dtype=float))
    return config.ctrl_weight * np.einsum("kc,mkc->m", np.asarray(plan) * inv, controls)


def rollout_costs(dynamics, history, state0, plan, controls, ref, config: MPPIConfig):
    """Sample costs ``S_m`` and the rollout uncertainties.

    The tracking sum runs over the rollout states ``x_0 .. x_{K-1}`` with
    ``x_0`` the current state.  Rollouts that turn non-finite get the
    sentinel cost.
    """
    states, sigma = dynamics.rollout(history, state0, controls)
    K = controls.shape[1]
    stages = stage_cost(states[:, :K], np.asarray(ref)[None, :K], sigma, config.gamma_unc,
                        config.position_weight, config.speed_weight)
    costs = stages.sum(axis=1) + control_cost(plan, controls, config)
    finite = np.all(np.isfinite(states), axis=(1, 2)) & np.isfinite(costs)
    costs = np.where(finite, costs, config.sentinel)
    return costs, sigma, states


def rollout_cost(dynamics, history, state0, plan, noise, ref, config: MPPIConfig) -> float:
    """``S_m`` for one noise sequence (clamped controls ``plan + noise``)."""
    controls = np.clip(np.asarray(plan) + np.asarray(noise), -1.0, 1.0)[None]
    costs, _, _ = rollout_costs(dynamics, history, state0, plan, controls, ref, config)
    return float(costs[0])


def softmax_weights(costs, lam: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    beta = costs.min()
    return np.exp(-(costs - beta) / lam)


def mppi_update(controls, costs, lam: float):
    """Cost-weighted mean of the sampled sequences; returns ``(v_plus, weights)``."""
    weights = softmax_weights(costs, lam)
    normalised = weights / weights.sum()
    return np.tensordot(normalised, np.asarray(controls), axes=(0, 0)), normalised


def shift_plan(plan) -> np.ndarray:
    """Warm start: drop the first element and repeat the last."""
    plan = np.asarray(plan)
    return np.concatenate([plan[1:], plan[-1:]], axis=0)


class MPPIDiagnostics(NamedTuple):
    min_cost: float
    mean_cost: float
    ess: float
    clamped: int
    mean_sigma: float
    all_sentinel: bool

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else
                    int(v) if isinstance(v, (int, np.integer)) else float(v))
                for k, v in self._asdict().items()}


def effective_sample_size(weights) -> float:
    weights = np.asarray(weights, dtype=float)
    return float(weights.sum() ** 2 / np.sum(weights**2))


def mppi_step(dynamics, history, state, plan, ref, config: MPPIConfig, rng: np.random.Generator):
    """One control cycle.  Returns ``(control, next_plan, diagnostics)``."""
    plan = np.asarray(plan, dtype=float)
    if plan.shape != (config.K_h, 2):
        raise ValueError(f"plan must have shape ({config.K_h}, 2)")
    noise = rng.standard_normal((config.M, config.K_h, 2)) * np.asarray(config.noise_std)
    raw = plan[None] + noise
    controls = np.clip(raw, -1.0, 1.0)
    clamped = int(np.count_nonzero(controls != raw))
    costs, sigma, _ = rollout_costs(dynamics, history, state, plan, controls, ref, config)
    finite = costs < config.sentinel
    if not finite.any():
        diag = MPPIDiagnostics(float(config.sentinel), float(config.sentinel), 0.0, clamped,
                               float("nan"), True)
        return np.zeros(2), shift_plan(np.zeros_like(plan)), diag
    v_plus, weights = mppi_update(controls, costs, config.lam)
    v_plus = np.clip(v_plus, -1.0, 1.0)
    diag = MPPIDiagnostics(
        min_cost=float(costs[finite].min()),
        mean_cost=float(costs[finite].mean()),
        ess=effective_sample_size(weights),
        clamped=clamped,
        mean_sigma=float(np.nanmean(sigma)) if np.isfinite(sigma).any() else math.nan,
        all_sentinel=False,
    )
    return v_plus[0].copy(), shift_plan(v_plus), diag
