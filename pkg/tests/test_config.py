from pathlib import Path

import pytest
import yaml

from pixseg.config import ConfigError, RunConfig, TrainConfig, config_hash, from_dict, load_config, to_dict


def _write(tmp_path, data):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def _minimal(tmp_path):
    (tmp_path / "imgs").mkdir(exist_ok=True)
    (tmp_path / "pal.json").write_text("{}")
    return {"dataset": {"image_dir": "imgs"}, "encoder": {"palette": "pal.json"}}


def test_defaults_follow_reference_settings():
    t = TrainConfig()
    assert (t.iterations, t.batch_size, t.kappa, t.segments_per_view) == (20000, 8, 10.0, 36)
    assert (t.top_m, t.unknown_u, t.bank_depth, t.lr, t.poly_power) == (32, 64, 2, 0.001, 0.9)


def test_load_resolves_relative_paths(tmp_path):
    cfg = load_config(_write(tmp_path, _minimal(tmp_path)))
    assert cfg.dataset.image_dir == str(tmp_path / "imgs")
    assert isinstance(cfg.train.loss_weights, tuple)


@pytest.mark.parametrize("patch", [
    {"trian": {}},
    {"train": {"iteratons": 5}},
    {"dataset": {"image_dir": "imgs", "region_prior": {"method": "slic", "bogus": 1}}},
])
def test_unknown_keys_rejected(tmp_path, patch):
    data = _minimal(tmp_path)
    data.update(patch)
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data))


@pytest.mark.parametrize("patch", [
    {"train": {"batch_size": 0}},
    {"train": {"loss_weights": [1, 1]}},
    {"augment": {"scale": [0.9, 0.1]}},
    {"encoder": {"palette": "pal.json", "kind": "vit"}},
    {"eval": {"known_classes": ["a"], "unknown_classes": ["a"]}},
])
def test_invalid_values_rejected(tmp_path, patch):
    data = _minimal(tmp_path)
    data.update(patch)
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data))


def test_missing_paths_rejected(tmp_path):
    data = _minimal(tmp_path)
    data["dataset"]["image_dir"] = "nope"
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data))
    data = _minimal(tmp_path)
    data["eval"] = {"gt_dir": "missing"}
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data))


def test_overrides_and_hash(tmp_path):
    path = _write(tmp_path, _minimal(tmp_path))
    a = load_config(path)
    b = load_config(path, overrides={"train.seed": 3})
    assert b.train.seed == 3
    assert config_hash(a) != config_hash(b)
    c = load_config(path)
    c.output_dir = "elsewhere"
    assert config_hash(a) == config_hash(c)
    assert to_dict(RunConfig())["train"]["loss_weights"] == [1.0, 1.0, 1.0]


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_shipped_reference_config_matches_defaults():
    cfg = load_config(CONFIGS / "reference.yaml", check_paths=False)
    assert cfg.encoder.kind == "clip"
    assert to_dict(cfg)["train"] == {**to_dict(RunConfig())["train"], "checkpoint_every": 2000}


def test_shipped_synthetic_config_matches_generator():
    from pixseg.cli import synthetic_config

    cfg = load_config(CONFIGS / "synthetic.yaml", check_paths=False)
    expected = synthetic_config()
    assert to_dict(cfg)["train"] == to_dict(from_dict(expected))["train"]
    assert cfg.dataset.image_dir.endswith("data/synthetic/train/images")
