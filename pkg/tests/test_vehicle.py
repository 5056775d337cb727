import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params
from metampc import _kernels
from metampc.vehicle import (
    OMEGA, SimulationError, VehicleParams, advance, advance_single, effective_steering,
    integrate_step, make_control, make_state, pacejka, pacejka_peak_slip, params_vector,
    read_trajectory_csv, simulate, simulate_delayed, state_derivative, tire_forces,
    write_trajectory_csv,
)


def scalar_rhs(x, u, p):
    """Independent plain-Python transcription of the model equations."""
    p_x, p_y, phi, v_x, v_y, w = (float(v) for v in x)
    d, dcmd = (float(v) for v in u)
    delta = p.K_d * dcmd + p.K_bias
    ve = max(v_x, 0.3)
    fade = min(max(v_x / 0.3, -1.0), 1.0)
    drive = (p.C_m1 - p.C_m2 * v_x) * d
    if d < 0:
        drive *= max(fade, 0.0)
    frx = drive - p.C_lf * fade - p.C_d * v_x * abs(v_x)
    af = delta - math.atan((w * p.l_f + v_y) / ve)
    ar = math.atan((w * p.l_r - v_y) / ve)
    ffy = p.D_f * math.sin(p.C_f * math.atan(p.B_f * af))
    fry = p.D_r * math.sin(p.C_r * math.atan(p.B_r * ar))
    return [
        v_x * math.cos(phi) - v_y * math.sin(phi),
        v_x * math.sin(phi) + v_y * math.cos(phi),
        w,
        (frx - ffy * math.sin(delta) + p.m * v_y * w) / p.m,
        (fry + ffy * math.cos(delta) - p.m * v_x * w) / p.m,
        (ffy * p.l_f * math.cos(delta) - fry * p.l_r) / p.I_z,
    ]


def random_state(rng):
    return make_state(rng.normal(), rng.normal(), rng.uniform(-4, 4), rng.uniform(0.0, 4.0),
                      rng.normal(0, 0.3), rng.normal(0, 2.0))


class TestEffectiveSteering:
    def test_identity_map(self, car):
        assert effective_steering(0.5, car.replace(K_d=1.0, K_bias=0.0)) == 0.5

    def test_bias_only(self, car):
        assert effective_steering(0.0, car.replace(K_d=0.8, K_bias=0.05)) == pytest.approx(0.05, abs=1e-15)

    def test_forced_arithmetic(self, car):
        assert effective_steering(-1.0, car.replace(K_d=0.8, K_bias=0.05)) == pytest.approx(-0.75, abs=1e-15)


class TestTireForces:
    def test_straight_rolling_has_zero_slip(self, car):
        tires = tire_forces(make_state(v_x=2.0), 0.0, 0.3, car)
        assert tires.alpha_f == 0.0 and tires.alpha_r == 0.0
        assert tires.F_fy == 0.0 and tires.F_ry == 0.0

    def test_pacejka_peak(self):
        alpha = math.tan(math.pi / (2 * 1.9)) / 10
        assert pacejka(alpha, 10.0, 1.9, 1000.0) == pytest.approx(1000.0, rel=1e-12)
        assert pacejka_peak_slip(10.0, 1.9) == pytest.approx(alpha, rel=1e-15)

    def test_longitudinal_force_formula(self, car):
        params = car.replace(C_m1=20.0, C_m2=1.0, C_lf=1.0, C_d=0.1)
        tires = tire_forces(make_state(v_x=2.0), 0.0, 0.5, params)
        assert tires.F_rx == pytest.approx(7.6, abs=1e-12)

    def test_non_finite_state_raises(self, car):
        with pytest.raises(SimulationError):
            tire_forces(make_state(v_x=np.nan), 0.0, 0.0, car)

    def test_low_speed_guard(self, car):
        at_rest = tire_forces(make_state(v_x=0.0, v_y=0.05, omega=0.1), 0.1, 0.0, car)
        assert np.all(np.isfinite(at_rest))
        assert at_rest.F_rx == 0.0  # rolling resistance fully faded out at rest
        slow = tire_forces(make_state(v_x=0.15), 0.0, 0.0, car)
        assert slow.F_rx == pytest.approx(-car.C_lf * 0.5 - car.C_d * 0.15**2)

    def test_braking_fades_at_standstill(self, car):
        tires = tire_forces(make_state(v_x=0.0), 0.0, -1.0, car)
        assert tires.F_rx == 0.0


class TestStateDerivative:
    def test_uniform_straight_motion(self, car):
        params = car.replace(C_lf=0.0, C_d=0.0)
        deriv = state_derivative(make_state(v_x=1.0), make_control(), params)
        np.testing.assert_array_equal(deriv, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0])

    def test_frame_rotation(self, car):
        params = car.replace(C_lf=0.0, C_d=0.0)
        deriv = state_derivative(make_state(v_x=1.0, phi=math.pi / 2), make_control(), params)
        assert deriv[0] == pytest.approx(0.0, abs=1e-15)
        assert deriv[1] == pytest.approx(1.0, abs=1e-15)

    def test_matches_scalar_transcription(self, rng):
        for _ in range(200):
            p = random_params(rng)
            x = random_state(rng)
            u = rng.uniform(-1, 1, 2)
            np.testing.assert_allclose(state_derivative(x, u, p), scalar_rhs(x, u, p), rtol=1e-12, atol=1e-12)

    def test_compiled_kernel_matches(self, rng):
        for _ in range(100):
            p = random_params(rng)
            x = random_state(rng)
            u = rng.uniform(-1, 1, 2)
            out = np.empty(6)
            _kernels.derivative(x, u, params_vector(p), out)
            np.testing.assert_allclose(out, state_derivative(x, u, p), rtol=1e-13, atol=1e-12)

    def test_batched_matches_single(self, rng):
        p = random_params(rng)
        xs = np.stack([random_state(rng) for _ in range(7)])
        us = rng.uniform(-1, 1, (7, 2))
        batched = state_derivative(xs, us, p)
        for x, u, row in zip(xs, us, batched):
            np.testing.assert_array_equal(row, state_derivative(x, u, p))


@settings(max_examples=200, deadline=None)
@given(v_x=st.floats(0.0, 5.0), v_y=st.floats(-1.0, 1.0), omega=st.floats(-5.0, 5.0),
       steer=st.floats(-1.0, 1.0), throttle=st.floats(-1.0, 1.0), seed=st.integers(0, 2**31))
def test_mirror_symmetry(v_x, v_y, omega, steer, throttle, seed):
    p = random_params(np.random.default_rng(seed), K_bias=0.0)
    a = state_derivative(make_state(v_x=v_x, v_y=v_y, omega=omega), make_control(throttle, steer), p)
    b = state_derivative(make_state(v_x=v_x, v_y=-v_y, omega=-omega), make_control(throttle, -steer), p)
    scale = np.abs(a[3:]) + 1e-300
    assert abs(a[3] - b[3]) <= 1e-12 * scale[0] + 1e-12
    assert abs(a[4] + b[4]) <= 1e-12 * scale[1] + 1e-12
    assert abs(a[5] + b[5]) <= 1e-12 * scale[2] + 1e-12


@settings(max_examples=300, deadline=None)
@given(v_x=st.floats(-1.0, 10.0), v_y=st.floats(-10.0, 10.0), omega=st.floats(-50.0, 50.0),
       delta=st.floats(-2.0, 2.0), seed=st.integers(0, 2**31))
def test_force_saturation(v_x, v_y, omega, delta, seed):
    p = random_params(np.random.default_rng(seed))
    tires = tire_forces(make_state(v_x=v_x, v_y=v_y, omega=omega), delta, 0.0, p)
    assert abs(tires.F_fy) <= p.D_f * (1 + 1e-15)
    assert abs(tires.F_ry) <= p.D_r * (1 + 1e-15)


class TestIntegrateStep:
    def test_fixed_point(self, car):
        params = car.replace(C_lf=0.0)
        x = make_state(p_x=1.0, p_y=-2.0, phi=0.3)
        np.testing.assert_array_equal(integrate_step(x, make_control(), params, 0.05), x)

    def test_constant_velocity(self, car):
        params = car.replace(C_lf=0.0, C_d=0.0)
        out = integrate_step(make_state(v_x=2.0), make_control(), params, 0.1)
        assert out[0] == pytest.approx(0.2, abs=1e-9)

    def test_rejects_non_positive_dt(self, car):
        with pytest.raises(ValueError):
            integrate_step(make_state(v_x=1.0), make_control(), car, 0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_result_carries_state(self, car):
        x = make_state(v_x=1.0)
        with pytest.raises(SimulationError) as info:
            integrate_step(x, make_control(), car.replace(m=1e-300), 1.0)
        assert info.value.state is not None

    def test_absurd_stiffness_raises_instead_of_hanging(self, car):
        stiff = car.replace(m=1e-9, I_z=1e-12)
        with pytest.raises(SimulationError):
            advance(make_state(v_x=3.0), make_control(), stiff, 0.05)
        with pytest.raises(SimulationError):
            advance_single(make_state(v_x=3.0), make_control(), stiff, 0.05)

    def test_step_halving_error_is_fifth_order(self, car):
        """Local error of one step shrinks ~32x when the step halves."""
        x = make_state(v_x=3.0, v_y=0.05, omega=0.4)
        u = make_control(0.3, 0.2)
        params = car.replace(D_f=3.0, D_r=3.0)  # soft tires keep the step well inside stability

        def local_error(h):
            full = integrate_step(x, u, params, h)
            halves = integrate_step(integrate_step(x, u, params, h / 2), u, params, h / 2)
            return np.max(np.abs(full - halves))

        e1, e2 = local_error(0.02), local_error(0.01)
        assert e1 / e2 > 16


def test_rk4_global_error_ratio(car):
    """Halving dt on a 1 s trajectory shrinks the global error by at least 8x."""
    params = car.replace(D_f=3.0, D_r=3.0)
    x0 = make_state(v_x=2.0, omega=0.2)
    u = make_control(0.2, 0.3)

    def run(h):
        x = x0.copy()
        for _ in range(int(round(1.0 / h))):
            x = integrate_step(x, u, params, h)
        return x

    ref = run(0.0005)
    e1 = np.max(np.abs(run(0.02) - ref))
    e2 = np.max(np.abs(run(0.01) - ref))
    assert e1 / e2 >= 8


class TestSimulate:
    def test_compiled_single_matches_batched_numpy(self, rng):
        for _ in range(3):
            p = random_params(rng)
            actions = rng.uniform(-1, 1, (40, 2)) * [0.5, 1.0] + [0.4, 0.0]
            x0 = make_state(v_x=1.5)
            single = simulate(x0, actions, p, 0.05)
            batched = simulate(x0[None], actions[:, None], p, 0.05)[:, 0]
            np.testing.assert_allclose(single, batched, rtol=1e-12, atol=1e-12)

    def test_advance_single_matches_numpy(self, car, rng):
        x = make_state(v_x=2.0, omega=0.5)
        u = make_control(0.3, -0.4)
        np.testing.assert_allclose(advance_single(x, u, car, 0.05), advance(x, u, car, 0.05), rtol=1e-13, atol=1e-13)

    def test_returns_len_plus_one_states(self, car):
        out = simulate(make_state(v_x=1.0), np.zeros((25, 2)), car, 0.05)
        assert out.shape == (26, 6)


class TestSimulateDelayed:
    def test_zero_delay_is_plain_simulation(self, car, rng):
        actions = np.clip(rng.normal(0.3, 0.3, (60, 2)), -1, 1)
        x0 = make_state(v_x=1.0)
        delayed = simulate_delayed(x0, actions, car.replace(t_d=0.0), 0.05)
        plain = simulate(x0, actions, car.replace(t_d=0.0), 0.05)
        assert delayed.delay == 0
        np.testing.assert_array_equal(delayed.aligned_states, plain[:60])
        np.testing.assert_array_equal(delayed.aligned_actions, actions)
        assert delayed.aligned_states.tobytes() == plain[:60].tobytes()

    def test_two_step_delay_index_shift(self, car, rng):
        dt = 0.05
        actions = np.clip(rng.normal(0.3, 0.3, (60, 2)), -1, 1)
        x0 = make_state(v_x=1.0)
        delayed = simulate_delayed(x0, actions, car.replace(t_d=2 * dt), dt)
        plain = simulate(x0, actions, car.replace(t_d=0.0), dt)
        assert delayed.delay == 2
        # The pair observed at time (i + 2) dt: the action issued then and the
        # state, which lags the undelayed response by two samples.
        np.testing.assert_allclose(delayed.aligned_times, (np.arange(58) + 2) * dt)
        np.testing.assert_array_equal(delayed.aligned_states, plain[:58])
        np.testing.assert_array_equal(delayed.aligned_actions, actions[2:])

    def test_step_steer_onset_lags_by_delay(self, car):
        dt, steps, onset = 0.05, 80, 20
        actions = np.zeros((steps, 2))
        actions[:, 0] = 0.1
        actions[onset:, 1] = 0.5
        x0 = make_state(v_x=1.5)

        def observed_yaw(t_d):
            traj = simulate_delayed(x0, actions, car.replace(t_d=t_d), dt)
            yaw = np.zeros(steps)
            yaw[traj.delay:] = traj.states[: steps - traj.delay, OMEGA]
            return yaw

        def first_response(yaw):
            return int(np.flatnonzero(np.abs(yaw) > 1e-9)[0])

        assert first_response(observed_yaw(5 * dt)) - first_response(observed_yaw(0.0)) == 5

    def test_delay_longer_than_horizon_raises(self, car):
        with pytest.raises(ValueError):
            simulate_delayed(make_state(v_x=1.0), np.zeros((2, 2)), car.replace(t_d=0.1), 0.05)

    def test_delay_rounds_to_nearest_step(self, car):
        assert car.replace(t_d=0.074).delay_steps(0.05) == 1
        assert car.replace(t_d=0.076).delay_steps(0.05) == 2


class TestParamsAndIO:
    def test_invariants_enforced(self, car):
        for field, value in [("m", 0.0), ("I_z", -1.0), ("l_f", 0.0), ("t_d", -0.01), ("D_r", -1.0), ("K_d", 0.0)]:
            with pytest.raises(ValueError, match=field):
                car.replace(**{field: value})

    def test_json_round_trip(self, car):
        text = car.to_json()
        assert VehicleParams.from_json(text) == car
        assert set(__import__("json").loads(text)) == set(VehicleParams.field_names())

    def test_unknown_field_rejected(self, car):
        with pytest.raises(ValueError):
            VehicleParams.from_dict({**car.to_dict(), "mu": 1.0})

    def test_control_clamped_on_construction(self):
        np.testing.assert_array_equal(make_control(3.0, -2.0), [1.0, -1.0])

    def test_trajectory_csv_round_trip(self, tmp_path, car):
        actions = np.full((10, 2), [0.2, 0.1])
        states = simulate(make_state(v_x=1.0), actions, car, 0.05)[:10]
        times = np.arange(10) * 0.05
        path = tmp_path / "traj.csv"
        write_trajectory_csv(path, times, states, actions)
        assert path.read_text().splitlines()[0] == "t,p_x,p_y,phi,v_x,v_y,omega,d,delta_cmd"
        t2, x2, u2 = read_trajectory_csv(path)
        np.testing.assert_array_equal(x2, states)
        np.testing.assert_array_equal(u2, actions)
        np.testing.assert_array_equal(t2, times)

    def test_heading_is_not_wrapped(self, car):
        actions = np.tile([0.3, 1.0], (400, 1))
        states = simulate(make_state(v_x=1.0), actions, car, 0.05)
        assert states[-1, 2] > 2 * math.pi
