import json

import pytest

from lamap.config import ConfigError, ExperimentConfig, dumps, load, loads


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    again = loads(dumps(cfg))
    assert again == cfg
    assert dumps(again) == dumps(cfg)


def test_partial_override(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"tessellation": {"n_points": 642},
                                "train": {"learning_rate": 1e-3}, "channels": [6, 10, 22, 26]}))
    cfg = load(path)
    assert cfg.tessellation.n_points == 642
    assert cfg.tessellation.k_neighbors == 6
    assert cfg.train.learning_rate == 1e-3
    assert cfg.channels == [6, 10, 22, 26]


@pytest.mark.parametrize("doc, field", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"lr": 1}}, "train.lr"),
    ({"tessellation": {"n_points": "many"}}, "tessellation.n_points"),
    ({"tessellation": {"n_points": 2}}, "tessellation.n_points"),
    ({"geometry": "no-such-array"}, "geometry"),
    ({"model": {"csm_normalization": "peak"}}, "model.csm_normalization"),
    ({"train": {"gamma": 0.0}}, "train"),
])
def test_rejects_bad_fields(doc, field):
    with pytest.raises(ConfigError) as exc:
        loads(json.dumps(doc))
    assert exc.value.field == field


def test_invalid_json():
    with pytest.raises(ConfigError):
        loads("{not json")


def test_bool_is_not_a_number():
    with pytest.raises(ConfigError):
        loads(json.dumps({"seed": True}))
