"""Compiled single-vehicle transcription of the plant in :mod:`metampc.vehicle`.

Parameter vectors follow ``VehicleParams.field_names()`` order.  The
arithmetic mirrors the numpy implementation term by term; the test-suite
checks the two agree.
"""

import math

import numba
import numpy as np

LOW_SPEED = 0.3
RK4_STABLE = 2.0
# Parameter sets that would need more substeps than this are treated as divergent.
MAX_SUBSTEPS = 10000

(M, I_Z, L_F, L_R, B_F, C_F, D_F, B_R, C_R, D_R,
 C_M1, C_M2, C_LF, C_D, K_D, K_BIAS, T_D) = range(17)


@numba.njit(cache=True)
def derivative(x, u, p, out):
    phi, v_x, v_y, omega = x[2], x[3], x[4], x[5]
    d = u[0]
    delta = p[K_D] * u[1] + p[K_BIAS]
    v_eff = max(v_x, LOW_SPEED)
    fade = min(max(v_x / LOW_SPEED, -1.0), 1.0)
    drive = (p[C_M1] - p[C_M2] * v_x) * d
    if d < 0:
        drive = drive * max(fade, 0.0)
    F_rx = drive - p[C_LF] * fade - p[C_D] * v_x * abs(v_x)
    alpha_f = delta - math.atan((omega * p[L_F] + v_y) / v_eff)
    alpha_r = math.atan((omega * p[L_R] - v_y) / v_eff)
    F_fy = p[D_F] * math.sin(p[C_F] * math.atan(p[B_F] * alpha_f))
    F_ry = p[D_R] * math.sin(p[C_R] * math.atan(p[B_R] * alpha_r))
    m = p[M]
    out[0] = v_x * math.cos(phi) - v_y * math.sin(phi)
    out[1] = v_x * math.sin(phi) + v_y * math.cos(phi)
    out[2] = omega
    out[3] = (F_rx - F_fy * math.sin(delta) + m * v_y * omega) / m
    out[4] = (F_ry + F_fy * math.cos(delta) - m * v_x * omega) / m
    out[5] = (F_fy * p[L_F] * math.cos(delta) - F_ry * p[L_R]) / p[I_Z]


@numba.njit(cache=True)
def substeps(x, p, dt):
    v = max(x[3], LOW_SPEED)
    c_f = p[B_F] * p[C_F] * p[D_F]
    c_r = p[B_R] * p[C_R] * p[D_R]
    lam = (c_f + c_r) / (p[M] * v) + (c_f * p[L_F] ** 2 + c_r * p[L_R] ** 2) / (p[I_Z] * v)
    ratio = dt * lam / RK4_STABLE
    if not ratio <= MAX_SUBSTEPS:  # also catches NaN
        return MAX_SUBSTEPS + 1
    return max(1, int(math.ceil(ratio)))


@numba.njit(cache=True)
def rk4(x, u, p, h):
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)
    derivative(x, u, p, k1)
    for i in range(6):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    derivative(tmp, u, p, k2)
    for i in range(6):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    derivative(tmp, u, p, k3)
    for i in range(6):
        tmp[i] = x[i] + h * k3[i]
    derivative(tmp, u, p, k4)
    out = np.empty(6)
    for i in range(6):
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return out


@numba.njit(cache=True)
def advance(x, u, p, dt):
    n = substeps(x, p, dt)
    if n > MAX_SUBSTEPS:
        return np.full(6, np.nan)
    h = dt / n
    for _ in range(n):
        x = rk4(x, u, p, h)
        if not np.isfinite(x).all():
            return x
    return x


@numba.njit(cache=True)
def simulate(x0, actions, p, dt):
    out = np.empty((actions.shape[0] + 1, 6))
    out[0] = x0
    x = x0.copy()
    for t in range(actions.shape[0]):
        x = advance(x, actions[t], p, dt)
        out[t + 1] = x
        if not np.isfinite(x).all():
            out[t + 1:] = np.nan
            break
    return out


@numba.njit(cache=True)
def rollout(x0, controls, p, dt):
    """Roll ``x0`` forward under each of ``controls[m]`` (shape (M, K, 2))."""
    n_samples, horizon = controls.shape[0], controls.shape[1]
    out = np.empty((n_samples, horizon + 1, 6))
    for m in range(n_samples):
        x = x0.copy()
        out[m, 0] = x
        for k in range(horizon):
            x = advance(x, controls[m, k], p, dt)
            out[m, k + 1] = x
            if not np.isfinite(x).all():
                out[m, k + 1:] = np.nan
                break
    return out


@numba.njit(cache=True)
def step_many(states, controls, p, dt):
    """One ``dt`` step for each row of ``states`` under the matching control."""
    out = np.empty_like(states)
    for i in range(states.shape[0]):
        out[i] = advance(states[i].copy(), controls[i], p, dt)
    return out
