import numpy as np
import pytest

from losschange.exceptions import ConfigError, NumericError
from losschange.nn import Dataset, LayerLayout
from losschange.optim import (LayerOverride, MinibatchSampler, OptimConfig, OptimState,
                              momentum_from_delay, sample_minibatch, step)

LAYOUT = LayerLayout.from_arch([3, 4, 2])


def _theta(seed=0):
    return np.random.default_rng(seed).normal(size=LAYOUT.size).astype(np.float32)


def test_plain_sgd_step_exact():
    theta = _theta().astype(np.float64)
    g = np.random.default_rng(1).normal(size=LAYOUT.size)
    new, state = step(theta, OptimState.zeros(LAYOUT.size), g, OptimConfig(lr=0.5, momentum=0.0),
                      LAYOUT)
    assert np.array_equal(new, theta - 0.5 * g)
    assert state.step_count == 1


def test_momentum_geometric_limit():
    cfg = OptimConfig(lr=0.01, momentum=0.9)
    theta = np.zeros(LAYOUT.size)
    g = np.ones(LAYOUT.size)
    state = OptimState.zeros(LAYOUT.size)
    for _ in range(400):
        prev = theta
        theta, state = step(theta, state, g, cfg, LAYOUT)
    assert np.allclose(prev - theta, 10 * 0.01 * g, rtol=1e-12)


def test_frozen_layer_bitwise_and_zero_buffers():
    cfg = OptimConfig(lr=0.1, momentum=0.9, per_layer={"dense_0": {"frozen": True}})
    theta = _theta()
    state = OptimState.zeros(LAYOUT.size)
    g = np.random.default_rng(2).normal(size=LAYOUT.size)
    sl = [s for s in LAYOUT.group_slices("dense_0")]
    for t in range(5):
        new, state = step(theta, state, g, cfg, LAYOUT, iteration=t)
        for s in sl:
            assert new[s].tobytes() == theta[s].tobytes()
            assert np.all(state.buf1[s] == 0.0)
        theta = new
    assert not np.array_equal(theta[LAYOUT.group_slices("dense_1")[0]],
                              _theta()[LAYOUT.group_slices("dense_1")[0]])


def test_freeze_from_iteration():
    cfg = OptimConfig(lr=0.1, momentum=0.0, per_layer={"dense_1": {"freeze_from": 2}})
    theta = _theta()
    g = np.ones(LAYOUT.size)
    state = OptimState.zeros(LAYOUT.size)
    k = LAYOUT.group_slices("dense_1")[0]
    t1, state = step(theta, state, g, cfg, LAYOUT, iteration=1)
    assert not np.array_equal(t1[k], theta[k])
    t2, state = step(t1, state, g, cfg, LAYOUT, iteration=2)
    assert np.array_equal(t2[k], t1[k])


def test_lr_scale_applies_per_layer():
    cfg = OptimConfig(lr=0.2, momentum=0.0, per_layer={"dense_1": {"lr_scale": 0.1}})
    theta = np.zeros(LAYOUT.size)
    g = np.ones(LAYOUT.size)
    new, _ = step(theta, OptimState.zeros(LAYOUT.size), g, cfg, LAYOUT)
    assert np.allclose(new[LAYOUT.group_slices("dense_0")[0]], -0.2)
    assert np.allclose(new[LAYOUT.group_slices("dense_1")[0]], -0.02)


def test_unit_override_matches_plain_config():
    plain = OptimConfig(lr=0.1, momentum=0.9)
    over = OptimConfig(lr=0.1, momentum=0.9, per_layer={"dense_0": {"lr_scale": 1.0}})
    rng = np.random.default_rng(0)
    a = b = _theta()
    sa = sb = OptimState.zeros(LAYOUT.size)
    for t in range(10):
        g = rng.normal(size=LAYOUT.size)
        a, sa = step(a, sa, g, plain, LAYOUT, t)
        b, sb = step(b, sb, g, over, LAYOUT, t)
    assert a.tobytes() == b.tobytes()


def test_momentum_override_only_affects_its_layer():
    cfg = OptimConfig(lr=0.01, momentum=0.9, per_layer={"dense_1": {"momentum_override": 0.0}})
    theta = np.zeros(LAYOUT.size)
    g = np.ones(LAYOUT.size)
    state = OptimState.zeros(LAYOUT.size)
    for _ in range(3):
        prev = theta
        theta, state = step(theta, state, g, cfg, LAYOUT)
    last = prev - theta
    assert np.allclose(last[LAYOUT.group_slices("dense_1")[0]], 0.01)
    assert np.allclose(last[LAYOUT.group_slices("dense_0")[0]], 0.01 * (1 + 0.9 + 0.81))


def test_adam_step_bounded_by_lr():
    cfg = OptimConfig(kind="adam", lr=0.002)
    theta = np.zeros(LAYOUT.size)
    state = OptimState.zeros(LAYOUT.size)
    rng = np.random.default_rng(0)
    for _ in range(50):
        prev = theta
        theta, state = step(theta, state, rng.normal(size=LAYOUT.size) * 100, cfg, LAYOUT)
        # |m_hat| / sqrt(v_hat) can exceed 1 only modestly for noisy gradients
        assert np.max(np.abs(theta - prev)) <= 0.002 * 3.2


def test_adam_first_step_is_lr_times_sign():
    cfg = OptimConfig(kind="adam", lr=0.001)
    g = np.random.default_rng(5).normal(size=LAYOUT.size)
    new, _ = step(np.zeros(LAYOUT.size), OptimState.zeros(LAYOUT.size), g, cfg, LAYOUT)
    assert np.allclose(new, -0.001 * np.sign(g), rtol=1e-6)


def test_nan_update_names_layer_and_iteration():
    cfg = OptimConfig(lr=0.1, momentum=0.0)
    g = np.full(LAYOUT.size, np.nan)
    with pytest.raises(NumericError) as err:
        step(np.zeros(LAYOUT.size), OptimState.zeros(LAYOUT.size), g, cfg, LAYOUT, iteration=7)
    assert "iteration=7" in str(err.value)
    g = np.zeros(LAYOUT.size)
    g[LAYOUT.group_slices("dense_1")[0].start] = np.inf
    with pytest.raises(NumericError):
        step(np.zeros(LAYOUT.size), OptimState.zeros(LAYOUT.size), g, cfg, LAYOUT)


def test_overflowing_update_reports_layer():
    cfg = OptimConfig(lr=1e300, momentum=0.0)
    g = np.zeros(LAYOUT.size)
    g[LAYOUT.group_slices("dense_1")[0].start] = 1e300
    with pytest.raises(NumericError) as err:
        step(np.zeros(LAYOUT.size), OptimState.zeros(LAYOUT.size), g, cfg, LAYOUT, iteration=3)
    assert "dense_1" in str(err.value) and "iteration=3" in str(err.value)


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(lr=-1), dict(momentum=1.0), dict(batch_size=0),
                                 dict(kind="rmsprop")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        OptimConfig(**bad)


def test_layer_override_validation():
    with pytest.raises(ConfigError):
        LayerOverride(lr_scale=-1)
    with pytest.raises(ConfigError):
        LayerOverride(momentum_override=1.0)


def test_unknown_layer_override_rejected():
    cfg = OptimConfig(per_layer={"dense_9": {"frozen": True}})
    with pytest.raises(ConfigError):
        step(np.zeros(LAYOUT.size), OptimState.zeros(LAYOUT.size), np.zeros(LAYOUT.size), cfg, LAYOUT)


def test_config_dict_roundtrip():
    cfg = OptimConfig(lr=0.3, per_layer={"dense_1": {"lr_scale": 0.1, "frozen": False}})
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg


def test_momentum_from_delay_values():
    assert momentum_from_delay(9) == 0.9
    assert momentum_from_delay(0) == 0.0
    assert momentum_from_delay(1) == 0.5
    vals = [round(momentum_from_delay(d), 3) for d in range(10)]
    assert vals == [0.0, 0.5, 0.667, 0.75, 0.8, 0.833, 0.857, 0.875, 0.889, 0.9]
    assert all(np.diff(vals) > 0)
    with pytest.raises(ConfigError):
        momentum_from_delay(-1)


def test_full_batch_is_permutation():
    data = Dataset(np.zeros((17, 2)), np.zeros(17, dtype=int), 1)
    idx = sample_minibatch(data, 17, seed=3)
    assert sorted(idx.tolist()) == list(range(17))


def test_sampler_deterministic_and_balanced():
    a = MinibatchSampler(100, 7, seed=2)
    b = MinibatchSampler(100, 7, seed=2)
    seq_a = np.concatenate([a.next() for _ in range(100 * 50 // 7)])
    seq_b = np.concatenate([b.next() for _ in range(100 * 50 // 7)])
    assert np.array_equal(seq_a, seq_b)
    n_full = (len(seq_a) // 100) * 100
    counts = np.bincount(seq_a[:n_full], minlength=100)
    assert np.all(counts == n_full // 100)


def test_sampler_rejects_bad_batch():
    with pytest.raises(ConfigError):
        MinibatchSampler(10, 0, seed=0)
    with pytest.raises(ConfigError):
        MinibatchSampler(10, 11, seed=0)
