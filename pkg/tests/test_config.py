import json

import pytest
import yaml

from lhuc.config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    dump_config,
    from_dict,
    load_config,
    to_dict,
)


def load(tmp_path, data, suffix=".yaml"):
    path = tmp_path / f"c{suffix}"
    path.write_text(yaml.safe_dump(data) if suffix == ".yaml" else json.dumps(data))
    return load_config(path)


def test_minimal(tmp_path):
    cfg = load(tmp_path, {"experiment": "two_pass"})
    assert cfg.adapt.lr == 0.8 and cfg.train.initial_lr == 0.08 and cfg.train.newbob.ramp_threshold == 0.005


@pytest.mark.parametrize("data,key", [
    ({"experiment": "two_pass", "trian": {}}, "trian"),
    ({"experiment": "two_pass", "train": {"max_epoch": 3}}, "train.max_epoch"),
    ({"experiment": "two_pass", "train": {"newbob": {"ramp": 0.1}}}, "train.newbob.ramp"),
    ({"experiment": "two_pass", "task": {"n_speaker": 3}}, "task.n_speaker"),
    ({"experiment": "two_pass", "options": {"alpha": [0.5]}}, "options.alpha"),
])
def test_unknown_keys_named(tmp_path, data, key):
    with pytest.raises(ConfigError) as exc:
        load(tmp_path, data)
    assert exc.value.key == key and key in str(exc.value)


def test_missing_experiment(tmp_path):
    with pytest.raises(ConfigError, match="experiment"):
        load(tmp_path, {"seed": 1})


def test_unknown_experiment(tmp_path):
    with pytest.raises(ConfigError, match="experiment"):
        load(tmp_path, {"experiment": "decode"})


@pytest.mark.parametrize("data,key", [
    ({"experiment": "adapt", "adapt": {"lr": "fast"}}, "adapt.lr"),
    ({"experiment": "adapt", "adapt": {"supervised": 1}}, "adapt.supervised"),
    ({"experiment": "adapt", "train": {"batch_size": 2.5}}, "train.batch_size"),
    ({"experiment": "adapt", "network": {"hidden_sizes": 64}}, "network.hidden_sizes"),
])
def test_type_errors_named(tmp_path, data, key):
    with pytest.raises(ConfigError) as exc:
        load(tmp_path, data)
    assert exc.value.key == key


@pytest.mark.parametrize("data,key", [
    ({"experiment": "adapt", "adapt": {"lr": 0}}, "adapt"),
    ({"experiment": "adapt", "sat": {"gamma": 2}}, "sat"),
    ({"experiment": "adapt", "adapt": {"kind": "tanh"}}, "adapt.kind"),
    ({"experiment": "adapt", "options": {"alphas": [1.5]}}, "options"),
    ({"experiment": "adapt", "task": {"n_environments": 2}}, "task"),
])
def test_nested_validation(tmp_path, data, key):
    with pytest.raises(ConfigError) as exc:
        load(tmp_path, data)
    assert exc.value.key == key


def test_int_accepted_for_float(tmp_path):
    assert load(tmp_path, {"experiment": "adapt", "adapt": {"lr": 1}}).adapt.lr == 1.0


def test_tuple_fields(tmp_path):
    cfg = load(tmp_path, {"experiment": "bump_demo", "bump": {"x_range": [-2, 2], "adapt_bumps": [[0, 1, 1]]}})
    assert cfg.bump.x_range == (-2.0, 2.0)


def test_json_config(tmp_path):
    assert load(tmp_path, {"experiment": "gradcheck", "seed": 4}, ".json").seed == 4


def test_unparseable(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("experiment: [unclosed\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(path)


def test_dump_roundtrip(tmp_path):
    cfg = load(tmp_path, {"experiment": "factorised", "seed": 3, "options": {"alphas": [0.2]}})
    path = tmp_path / "resolved.json"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert to_dict(back) == to_dict(cfg) and dump_config(back) == dump_config(cfg)


def test_hash_ignores_output_dir():
    a = ExperimentConfig("two_pass", output_dir="x")
    b = ExperimentConfig("two_pass", output_dir="y")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(ExperimentConfig("two_pass", seed=1))


def test_from_dict_requires_mapping():
    with pytest.raises(ConfigError):
        from_dict(ExperimentConfig, ["experiment"])
