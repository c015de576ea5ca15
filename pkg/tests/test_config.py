from __future__ import annotations

import pytest
import yaml

from bip.config import PipelineConfig, dump_config, load_config
from bip.errors import ConfigError


def test_default_config_round_trip(default_config, tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(dump_config(default_config))
    again = load_config(path)
    assert dump_config(again) == dump_config(default_config)
    assert PipelineConfig.from_dict(default_config.to_dict()).to_dict() == default_config.to_dict()


def _with(default_config, **changes):
    d = default_config.to_dict()
    d.update(changes)
    return d


def test_bad_weights_rejected(default_config):
    d = _with(default_config)
    d["scoring"]["weights"]["alpha"] = 0.9
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(d)


@pytest.mark.parametrize("changes", [
    {"schema_version": 999},
    {"surprise": 1},
    {"window_days": 0},
    {"top_paths": "many"},
])
def test_invalid_configs(default_config, changes):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(_with(default_config, **changes))


def test_missing_journey_and_bad_files(default_config, tmp_path):
    d = default_config.to_dict()
    del d["journey"]
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(d)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    listy = tmp_path / "list.yaml"
    listy.write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(ConfigError):
        load_config(listy)
