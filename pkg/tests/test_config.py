import json

import pytest

from api_models import DatasetPooling, NormType, ScaleTag, TrainConfig
from config import config_hash, deep_merge, load_config, load_datagen_config, parse_override
from conftest import CONFIG_DIR
from errors import ConfigError


def test_deep_merge_merges_nested_dicts_only():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": 1}
    merged = deep_merge(base, {"a": {"c": [3]}, "e": 2})
    assert merged == {"a": {"b": 1, "c": [3]}, "d": 1, "e": 2}
    assert base == {"a": {"b": 1, "c": [1, 2]}, "d": 1}


@pytest.mark.parametrize("override, expected", [
    ("lr=0.001", {"lr": 0.001}),
    ("model.dqs.enabled=false", {"model": {"dqs": {"enabled": False}}}),
    ("max_steps=7", {"max_steps": 7}),
    ("device=cpu", {"device": "cpu"}),
    ("augment.scale_jitter=[0.9, 1.1]", {"augment": {"scale_jitter": [0.9, 1.1]}}),
])
def test_parse_override_keeps_types(override, expected):
    assert parse_override(override) == expected


def test_parse_override_errors():
    with pytest.raises(ConfigError):
        parse_override("lr")
    with pytest.raises(ConfigError):
        parse_override("=1")


def test_files_then_overrides(tmp_path):
    first = tmp_path / "first.json"
    first.write_text(json.dumps({"lr": 0.1, "model": {"dqs": {"fg_only": True}}}))
    second = tmp_path / "second.json"
    second.write_text(json.dumps({"lr": 0.2}))
    cfg = load_config([str(first), str(second)], ["batch_size=3"])
    assert cfg.lr == 0.2
    assert cfg.model.dqs.fg_only
    assert cfg.batch_size == 3


def test_repository_base_config():
    cfg = load_config([str(CONFIG_DIR / "base.json")])
    assert cfg.image_size == 384
    assert cfg.model.encoder.grid_size == 24
    assert cfg.model.pyramid.norm == NormType.GROUP
    assert cfg.pooling == DatasetPooling.MEAN
    assert cfg.loss.no_object_weight == 0.1
    base_model = load_config([str(CONFIG_DIR / "base.json"), str(CONFIG_DIR / "base_model.json")])
    assert base_model.lr == 5e-5


@pytest.mark.parametrize("name", sorted(p.name for p in (CONFIG_DIR / "ablations").glob("*.json")))
def test_every_ablation_file_parses(name):
    path = CONFIG_DIR / "ablations" / name
    if "datagen" in json.loads(path.read_text()):
        load_datagen_config([str(CONFIG_DIR / "datagen.json"), str(path)])
    else:
        assert isinstance(load_config([str(CONFIG_DIR / "base.json"), str(path)]), TrainConfig)


def test_ablation_toggles_are_independent():
    def dqs(name):
        return load_config([str(CONFIG_DIR / "base.json"), str(CONFIG_DIR / "ablations" / name)]).model.dqs

    assert (dqs("no_dqs.json").enabled, dqs("no_dqs.json").aux_loss) == (False, False)
    assert (dqs("no_extra_loss.json").enabled, dqs("no_extra_loss.json").aux_loss) == (True, False)
    assert (dqs("extra_loss_only.json").enabled, dqs("extra_loss_only.json").aux_loss) == (False, True)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config([str(tmp_path / "absent.json")])
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config([str(broken)])
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config([str(listing)])


@pytest.mark.parametrize("override", [
    "model.encoder.image_size=390",
    "model.encoder.image_size=400",
    "lr=-1",
    "dtype=float16",
    "loss.small_component_policy=keep",
    "model.pyramid.dim=30",
])
def test_invalid_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config([str(CONFIG_DIR / "base.json")], [override])


def test_config_hash_tracks_content():
    a = load_config([str(CONFIG_DIR / "base.json")])
    b = load_config([str(CONFIG_DIR / "base.json")])
    c = load_config([str(CONFIG_DIR / "base.json")], ["seed=1"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64


def test_datagen_config_unwraps_its_section():
    cfg = load_datagen_config([str(CONFIG_DIR / "datagen.json")], ["datagen.parallelism=8"])
    assert cfg.scale_tag == ScaleTag.X1
    assert cfg.parallelism == 8
    assert cfg.backend == "stub"
    assert load_datagen_config([], ["scale_tag=5x"]).scale_tag == ScaleTag.X5
