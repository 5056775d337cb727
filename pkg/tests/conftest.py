import sys

import numpy as np
import pytest

from metampc.vehicle import VehicleParams, nominal_params


@pytest.fixture
def car() -> VehicleParams:
    return nominal_params()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def random_params(rng, **overrides) -> VehicleParams:
    m = rng.uniform(2, 6)
    values = dict(
        m=m, I_z=rng.uniform(0.03, 0.2), l_f=rng.uniform(0.12, 0.22), l_r=rng.uniform(0.12, 0.22),
        B_f=rng.uniform(4, 12), C_f=rng.uniform(1.2, 2.2), D_f=rng.uniform(0.5, 1.2) * m * 9.81,
        B_r=rng.uniform(4, 12), C_r=rng.uniform(1.2, 2.2), D_r=rng.uniform(0.5, 1.2) * m * 9.81,
        C_m1=rng.uniform(15, 30), C_m2=rng.uniform(2, 4), C_lf=rng.uniform(0, 2), C_d=rng.uniform(0, 0.2),
        K_d=rng.uniform(0.3, 0.45), K_bias=rng.uniform(-0.1, 0.1), t_d=rng.uniform(0, 0.1),
    )
    values.update(overrides)
    return VehicleParams(**values)


def fd_check(fn, weights, analytic, coords, rng, eps=1e-3, floor=1e-7):
    """Fourth-order central differences on ``coords`` random coordinates of ``weights``.

    ``fn(weights) -> float``.  The stencil keeps truncation error near
    ``eps**4`` while avoiding the cancellation a tiny two-point step suffers
    on small gradient entries.  Returns the worst relative error, using
    ``max(|analytic|, |numeric|, floor)`` as the denominator.
    """
    names = list(weights.params)
    sizes = np.array([weights.params[k].size for k in names])
    worst = 0.0
    for _ in range(coords):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(rng.integers(weights.params[k].size), weights.params[k].shape)

        def at(offset):
            moved = weights.copy()
            moved.params[k][idx] += offset
            return fn(moved)

        numeric = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
        exact = float(analytic.params[k][idx])
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst


def tiny_config(**overrides):
    from metampc.seqmodel import ModelConfig

    values = dict(n=4, dt=0.05, hidden_size=4, head_size=4, aux_size=0)
    values.update(overrides)
    return ModelConfig(**values)


def toy_task(rng, n=4, count=12, dt=0.05):
    """A small synthetic task with smooth random windows and targets."""
    from metampc.tasks import TaskDataset, make_windows

    steps = count + n + 1
    t = np.arange(steps) * dt
    phase = rng.uniform(0, 6, 5)
    amp = np.array([1.5, 0.3, 1.0, 0.5, 0.6])
    series = amp * np.sin(t[:, None] * rng.uniform(1, 4, 5) + phase) + np.array([2.0, 0, 0, 0.3, 0])
    windows, targets = make_windows(series[:, :3], series[:, 3:], n, dt)
    return TaskDataset(windows, targets, random_params(rng), dt)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    verdicts = getattr(acceptance, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for verdict in sorted(verdicts, key=lambda v: v.criterion):
        terminalreporter.write_line(verdict.line())
