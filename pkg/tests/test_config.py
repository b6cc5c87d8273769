import pytest

from losschange.config import RunConfig, load_config, parse_config, parse_override
from losschange.exceptions import ConfigError


def test_defaults_describe_the_mnist_run():
    cfg = RunConfig()
    assert cfg.arch == [784, 100, 50, 10]
    assert cfg.iterations == 880
    assert cfg.optimizer.kind == "sgd" and cfg.optimizer.momentum == 0.9
    assert cfg.lca.tol == 1e-3 and cfg.lca.max_depth == 6


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("optimizer:\n  lr: 0.1\n  momentun: 0.5\n")
    with pytest.raises(ConfigError, match="momentun"):
        load_config(p)
    with pytest.raises(ConfigError):
        parse_config({"bogus": 1})


@pytest.mark.parametrize("bad", [
    {"optimizer": {"lr": -1}},
    {"optimizer": {"momentum": 1.0}},
    {"optimizer": {"batch_size": 0}},
    {"arch": [784]},
    {"arch": [784, 0, 10]},
    {"lca": {"max_depth": 20}},
    {"lca": {"tol": 0}},
    {"optimizer": {"per_layer": {"dense_0": {"lr_scale": -2}}}},
])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_overrides_and_yaml_typing(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\noptimizer:\n  lr: 0.1\n")
    key, val = parse_override("optimizer.momentum=0")
    assert (key, val) == ("optimizer.momentum", 0)
    cfg = load_config(p, {key: val, "optimizer.per_layer.dense_1.frozen": True})
    assert cfg.seed == 3 and cfg.optimizer.lr == 0.1 and cfg.optimizer.momentum == 0.0
    assert cfg.optimizer.per_layer["dense_1"].frozen is True
    assert cfg.optim_config().per_layer["dense_1"].frozen is True
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_hash_ignores_run_id_and_output_dir_only():
    a = RunConfig()
    b = parse_config({"run_id": "other", "output_dir": "/elsewhere", "lca": {"n_jobs": 4}})
    c = parse_config({"seed": 1})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 12
    assert parse_config(a.model_dump(mode="json")).config_hash() == a.config_hash()
