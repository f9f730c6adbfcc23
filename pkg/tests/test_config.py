import json

import pytest

from sraa.config import RunConfig, data_seed, from_dict, load_config, override
from sraa.errors import ConfigError, IoError


def test_minimal_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("protocol: single\nshots: 5\n")
    cfg = load_config(p)
    assert cfg.protocol == "single" and cfg.shots == 5
    assert cfg.train.epochs_inc == 100 and cfg.data.base_classes == [1, 2, 3, 4, 5]


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p) == RunConfig()


@pytest.mark.parametrize("raw", [
    {"protocol": "both"}, {"shots": 3}, {"seed": -1}, {"seed": 2 ** 64}, {"baselines": ["mib"]},
    {"unknown": 1}, {"train": {"lr_base": 0}}, {"train": {"nope": 1}}, {"data": {"shot_counts": []}},
    {"semantic": {"source": "file"}}, {"train": [1, 2]}, {"fold": -2},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_bad_yaml_and_missing_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("protocol: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(IoError):
        load_config(tmp_path / "absent.yaml")


def test_baseline_alias_and_seed_propagation():
    cfg = from_dict({"baseline": "ft", "seed": 7})
    assert cfg.baselines == ["ft"] and cfg.train.seed == 7
    assert from_dict({"seed": 7, "train": {"seed": 3}}).train.seed == 3


def test_override_reseeds_training():
    cfg = override(from_dict({"seed": 7}), seed=9, protocol=None)
    assert cfg.seed == 9 and cfg.train.seed == 9 and cfg.protocol == "multi"


def test_manifest_is_a_config(tmp_path):
    cfg = from_dict({"protocol": "single", "shots": 2, "seed": 4})
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"manifest_version": 1, "config": cfg.to_dict()}))
    assert load_config(p) == cfg


def test_folds_change_data_seed_only():
    cfg = RunConfig(seed=5)
    assert cfg.plan(0).seed == 5
    assert cfg.plan(1).seed == data_seed(5, 1) != 5
    assert cfg.plan(1).seed != cfg.plan(2).seed
    assert cfg.plan(1).base_classes == cfg.plan(0).base_classes


def test_digest_tracks_content():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig().digest() != RunConfig(shots=2).digest()
