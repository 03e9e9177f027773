"""
The following tests check loading, validation and hashing of the run configuration.
"""

import json
from pathlib import Path
from typing import Any

import pytest

from pyautobid.config import STAGES, RunConfig, config_from_dict, load_config, write_config
from pyautobid.exceptions import ConfigError


def _section_of(data: dict[str, Any]) -> str:
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    return info.value.section


def test_defaults_and_conversion() -> None:
    """Test defaults, int-to-float widening, lists to tuples and optional values."""
    config = config_from_dict(
        {
            "seed": 3,
            "iql": {"gamma": 1},
            "simulator": {"budget_range": [100, 200], "market": {}},
            "eval": {"sweep_axis": "instruction_override", "sweep_values": ["INCREASE", "none"], "rtg_weight_w": 0.5},
        }
    )
    assert config.seed == 3
    assert config.iql.gamma == 1.0 and isinstance(config.iql.gamma, float)
    assert config.simulator.budget_range == (100.0, 200.0)
    assert config.eval.sweep_values == ("INCREASE", "none")
    assert config.eval.rtg_weight_w == 0.5
    assert config_from_dict({"seed": 3, "eval": {"rtg_weight_w": None}}).eval.rtg_weight_w is None
    assert config.act_model == RunConfig(seed=0).act_model


def test_errors_name_the_section() -> None:
    """Test that unknown keys, bad types and bad values are reported per section."""
    assert _section_of({}) == "root"
    assert _section_of({"seed": True}) == "root"
    assert _section_of({"seed": 1, "bogus": {}}) == "root"
    assert _section_of({"seed": 1, "iql": {"bogus": 1}}) == "iql"
    assert _section_of({"seed": 1, "iql": {"gamma": "high"}}) == "iql"
    assert _section_of({"seed": 1, "iql": {"gamma": 2.0}}) == "iql"
    assert _section_of({"seed": 1, "think": {"max_retries": 1.5}}) == "think"
    assert _section_of({"seed": 1, "act_model": {"transformer": {"d_model": "x"}}}) == "act_model.transformer"
    assert _section_of({"seed": 1, "simulator": {"budget_range": [1.0]}}) == "simulator"
    assert _section_of({"seed": 1, "eval": {"episodes": 0}}) == "eval"
    assert _section_of({"seed": 1, "eval": {"sweep_values": ["INCREASE"]}}) == "eval"
    assert _section_of({"seed": 1, "gqpo": []}) == "root"
    assert str(ConfigError("iql", "boom")) == "[iql] boom"


def test_hash_and_stage_seeds() -> None:
    """Test the canonical hash and the per-stage seeds."""
    first = config_from_dict({"seed": 1})
    assert first.config_hash() == config_from_dict({"seed": 1}).config_hash()
    assert first.config_hash() != config_from_dict({"seed": 2}).config_hash()
    assert len(first.config_hash()) == 64
    assert first.provenance() == {"config_hash": first.config_hash(), "seed": 1}

    seeds = [first.stage_seed(stage) for stage in STAGES]
    assert len(set(seeds)) == len(STAGES)
    assert seeds == [config_from_dict({"seed": 1}).stage_seed(stage) for stage in STAGES]
    with pytest.raises(ValueError):
        first.stage_seed("deploy")


def test_write_and_load(tmp_path: Path) -> None:
    """Test that a written configuration loads back with the same hash."""
    config = config_from_dict({"seed": 5, "eval": {"episodes": 3}})
    path = write_config(tmp_path / "run.json", config)
    loaded = load_config(path)
    assert loaded == config
    assert loaded.config_hash() == config.config_hash()

    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{seed: 1", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")
    (tmp_path / "list.json").write_text(json.dumps([1, 2]), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")
