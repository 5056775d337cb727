import math

import numpy as np
import pytest

from metampc.tasks import (
    DEFAULT_RANGES, GRAVITY, FourierActionSpec, GeneratorConfig, ParamRanges, TaskDataset,
    TaskGenerationError, fourier_series, generate_dataset, generate_task, generate_tasks,
    make_windows, read_jsonl, sample_action_sequence, sample_fourier_coefficients,
    sample_task_params, task_rng, write_jsonl,
)
from metampc.vehicle import make_state, simulate, simulate_delayed


class TestFourier:
    def test_coefficients_sum_to_one(self, rng):
        for n_terms in (1, 3, 6, 11):
            coeffs = sample_fourier_coefficients(n_terms, rng)
            assert coeffs.shape == (n_terms, 2)
            np.testing.assert_allclose(coeffs.sum(axis=0), [1.0, 1.0], atol=1e-14)

    def test_value_at_time_zero_is_constant_term(self, rng):
        coeffs = sample_fourier_coefficients(6, rng)
        out = fourier_series(coeffs, np.array([0.0]), 0.05, 20.0)
        np.testing.assert_array_equal(out[0], coeffs[0])

    def test_fixed_coefficients_worked_example(self):
        coeffs = np.array([[0.2, 0.0], [0.3, 0.5]])
        spec = FourierActionSpec(n_terms=2, dt=0.05, t_h=1.0, period_scale=20.0, coefficients=coeffs)
        actions, used, fraction = sample_action_sequence(spec)
        assert used is coeffs or np.array_equal(used, coeffs)
        t = np.arange(20) * 0.05
        np.testing.assert_allclose(actions[:, 0], 0.2 + 0.3 * np.sin(2 * math.pi * t), atol=1e-15)
        np.testing.assert_allclose(actions[:, 1], 0.5 * np.sin(2 * math.pi * t), atol=1e-15)
        assert fraction == 0.0
        # a quarter period in: t = 0.25 s
        np.testing.assert_allclose(actions[5], [0.5, 0.5], atol=1e-15)

    def test_clamping_reported(self):
        spec = FourierActionSpec(n_terms=2, t_h=1.0, coefficients=np.array([[0.0, 0.0], [2.0, 0.0]]))
        actions, _, fraction = sample_action_sequence(spec)
        assert actions.max() <= 1.0 and actions.min() >= -1.0
        assert 0.0 < fraction < 1.0

    def test_sample_count(self):
        assert FourierActionSpec(dt=0.05, t_h=10.0).n_samples == 200

    def test_needs_a_term(self, rng):
        with pytest.raises(ValueError):
            sample_fourier_coefficients(0, rng)


class TestRanges:
    def test_params_within_bounds(self, rng):
        ranges = ParamRanges()
        for _ in range(200):
            p = sample_task_params(ranges, rng)
            for name, (lo, hi) in DEFAULT_RANGES.items():
                value = getattr(p, name)
                if name in ("D_f", "D_r"):
                    value /= p.m * GRAVITY
                assert lo - 1e-12 <= value <= hi + 1e-12, name

    def test_degenerate_range_is_constant(self, rng):
        ranges = ParamRanges().with_bounds(m=(3.0, 3.0), t_d=(0.0, 0.0))
        p = sample_task_params(ranges, rng)
        assert p.m == 3.0 and p.t_d == 0.0

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            ParamRanges().with_bounds(m=(2.0, 1.0))
        with pytest.raises(ValueError):
            ParamRanges().with_bounds(m=(0.0, 1.0))
        with pytest.raises(ValueError):
            ParamRanges({"m": (1.0, 2.0)})

    def test_dict_round_trip(self, tmp_path):
        ranges = ParamRanges().with_bounds(C_d=(0.0, 0.5))
        path = tmp_path / "r.json"
        path.write_text(__import__("json").dumps(ranges.to_dict()))
        assert ParamRanges.load(path).bounds["C_d"] == (0.0, 0.5)


class TestWindows:
    def test_shapes_and_targets(self, rng):
        states = rng.normal(size=(30, 6))
        actions = rng.normal(size=(30, 2))
        windows, targets = make_windows(states, actions, n=4, dt=0.1)
        assert windows.shape == (25, 5, 5) and targets.shape == (25, 3)
        np.testing.assert_array_equal(windows[3, :, :3], states[3:8, 3:6])
        np.testing.assert_array_equal(windows[3, :, 3:], actions[3:8])
        np.testing.assert_allclose(targets[3], (states[8, 3:6] - states[7, 3:6]) / 0.1)

    def test_accepts_dynamic_states(self, rng):
        full = rng.normal(size=(12, 6))
        actions = rng.normal(size=(12, 2))
        a = make_windows(full, actions, 3, 0.05)
        b = make_windows(full[:, 3:], actions, 3, 0.05)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_short(self):
        with pytest.raises(ValueError):
            make_windows(np.zeros((5, 6)), np.zeros((5, 2)), 4, 0.05)
        with pytest.raises(ValueError):
            make_windows(np.zeros((9, 6)), np.zeros((8, 2)), 4, 0.05)

    def test_delay_alignment_in_windows(self, car):
        """Window targets come from states lagged by the delay relative to actions."""
        dt = 0.05
        rng = np.random.default_rng(3)
        actions = np.clip(rng.normal(0.3, 0.2, (60, 2)), -1, 1)
        params = car.replace(t_d=0.1)
        x0 = make_state(v_x=1.0)
        raw = simulate(x0, actions, params, dt)
        delayed = simulate_delayed(x0, actions, params, dt)
        windows, _ = make_windows(delayed.aligned_states, delayed.aligned_actions, 4, dt)
        np.testing.assert_array_equal(windows[0, 0, :3], raw[0, 3:6])
        np.testing.assert_array_equal(windows[0, 0, 3:], actions[2])


class TestGeneration:
    def test_deterministic_per_index(self):
        config = GeneratorConfig(n=5)
        spec = FourierActionSpec(t_h=3.0)
        a = generate_tasks(ParamRanges(), spec, config, 7, [0, 1, 2])
        b = generate_tasks(ParamRanges(), spec, config, 7, [2, 0])
        np.testing.assert_array_equal(a[2].windows, b[0].windows)
        np.testing.assert_array_equal(a[0].targets, b[1].targets)
        assert a[0].params == b[1].params
        assert a[0].params != a[1].params

    def test_different_seeds_differ(self):
        spec = FourierActionSpec(t_h=3.0)
        a = generate_task(ParamRanges(), spec, 5, task_rng(1, 0))
        b = generate_task(ParamRanges(), spec, 5, task_rng(2, 0))
        assert a.params != b.params

    def test_speed_envelope_respected(self):
        config = GeneratorConfig(n=5)
        spec = FourierActionSpec(t_h=5.0)
        for task in generate_dataset(ParamRanges(), spec, config, 10, seed=11):
            v_x = task.trajectory.states[:, 3]
            assert v_x.min() >= config.speed_envelope[0] and v_x.max() <= config.speed_envelope[1]
            assert np.all(np.isfinite(task.windows)) and np.all(np.isfinite(task.targets))

    def test_window_count_accounts_for_delay(self):
        spec = FourierActionSpec(t_h=5.0)
        for task in generate_dataset(ParamRanges(), spec, GeneratorConfig(n=5), 5, seed=4):
            d = task.params.delay_steps(spec.dt)
            assert len(task) == spec.n_samples - d - 5 - 1

    def test_impossible_envelope_raises(self):
        config = GeneratorConfig(n=5, speed_envelope=(10.0, 11.0), max_retries=3)
        with pytest.raises(TaskGenerationError):
            generate_task(ParamRanges(), FourierActionSpec(t_h=2.0), 5, task_rng(0, 0), config)

    def test_split_is_contiguous(self):
        task = generate_task(ParamRanges(), FourierActionSpec(t_h=3.0), 5, task_rng(0, 0))
        (ws, ys), (wq, yq) = task.split(0.5)
        assert len(ws) + len(wq) == len(task)
        np.testing.assert_array_equal(np.concatenate([ws, wq]), task.windows)
        with pytest.raises(ValueError):
            task.split(1.0)

    def test_jsonl_round_trip(self, tmp_path):
        data = generate_dataset(ParamRanges(), FourierActionSpec(t_h=2.0), GeneratorConfig(n=4), 3, seed=5)
        path = tmp_path / "tasks.jsonl"
        write_jsonl(path, data)
        back = list(read_jsonl(path))
        assert len(back) == 3
        for a, b in zip(data, back):
            np.testing.assert_array_equal(a.windows, b.windows)
            np.testing.assert_array_equal(a.targets, b.targets)
            assert a.params == b.params and a.dt == b.dt
        first = path.read_bytes()
        write_jsonl(path, back)
        assert path.read_bytes() == first

    def test_record_fields(self):
        task = generate_task(ParamRanges(), FourierActionSpec(t_h=2.0), 4, task_rng(0, 0))
        record = task.to_record()
        assert set(record) == {"params", "dt", "windows", "targets"}
        assert isinstance(TaskDataset.from_record(record), TaskDataset)
