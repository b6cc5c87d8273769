import numpy as np
import pytest

from losschange.data import gen_synthetic
from losschange.nn import LayerLayout, MLPObjective, init_params
from losschange.optim import OptimConfig
from losschange.trajectory import record


@pytest.fixture
def small_data():
    return gen_synthetic(120, 4, 3, separation=3.0, seed=1)


@pytest.fixture
def small_layout():
    return LayerLayout.from_arch([4, 6, 3])


@pytest.fixture
def small_objective(small_layout, small_data):
    return MLPObjective(small_layout, small_data)


@pytest.fixture
def small_run(tmp_path, small_layout, small_objective):
    """A 40-step SGD+momentum trajectory on the synthetic 4-6-3 net."""
    cfg = OptimConfig(lr=0.1, momentum=0.9, batch_size=16)
    traj = record(tmp_path / "small.lcat", small_objective, init_params([4, 6, 3], 0), cfg,
                  small_layout, 40, seed=0)
    return traj, small_objective, small_layout


def rand_theta(layout, seed, scale=0.5):
    return np.random.default_rng(seed).normal(0.0, scale, size=layout.size)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
