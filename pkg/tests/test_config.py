"""Config resolution: defaults, validation that collects every problem,
canonical hashing, and file loading."""

import json

import pytest

from fedcbo.config import (DEFAULT_HYPERPARAMS, canonical_json, config_hash,
                           load_config, resolve_config)
from fedcbo.errors import ConfigError
from fedcbo.sde import HyperParams


def test_empty_config_resolves_to_defaults():
    config = resolve_config({})
    assert config.protocol == "fedcbo"
    assert config.seeds == [0, 1, 2]
    assert config.problem["kind"] == "learner"
    assert config.hyperparams == DEFAULT_HYPERPARAMS
    assert isinstance(config.hp(), HyperParams)


def test_partial_sections_merge_over_defaults():
    config = resolve_config({
        "hyperparams": {"alpha": 50.0},
        "schedule": {"rounds": 3},
        "seeds": [7],
    })
    assert config.hyperparams["alpha"] == 50.0
    assert config.hyperparams["step_size"] == DEFAULT_HYPERPARAMS["step_size"]
    assert config.schedule["rounds"] == 3
    assert config.seeds == [7]


def test_benchmark_kind_switches_problem_defaults():
    config = resolve_config({"problem": {"kind": "benchmark"}})
    assert config.problem["objective"] == "quadratic"
    assert config.problem["dim"] == 2
    spec = config.init_spec()
    assert spec.std == config.problem["init_std"]


def test_validation_collects_every_problem_at_once():
    with pytest.raises(ConfigError) as err:
        resolve_config({
            "problem": {"kind": "benchmark", "dim": 0, "scale": -1.0},
            "hyperparams": {"alpha": 0.0, "bogus": 1},
            "protocol": "gossip",
            "extra_section": {},
        })
    problems = err.value.problems
    assert len(problems) >= 5
    joined = "\n".join(problems)
    assert "problem.dim" in joined
    assert "problem.scale" in joined
    assert "hyperparams.alpha" in joined
    assert "hyperparams.bogus" in joined
    assert "protocol" in joined
    assert "extra_section" in joined


def test_unknown_fields_are_rejected_per_section():
    with pytest.raises(ConfigError) as err:
        resolve_config({"schedule": {"steps": 10}})
    assert any("schedule.steps" in p for p in err.value.problems)


def test_learner_problem_constraints():
    with pytest.raises(ConfigError) as err:
        resolve_config({"problem": {"n_agents": 10, "n_clusters": 4}})
    assert any("divisible" in p for p in err.value.problems)
    with pytest.raises(ConfigError):
        resolve_config({"problem": {"input_dim": 1}})
    with pytest.raises(ConfigError):
        resolve_config({"problem": {"model": "forest"}})


def test_seed_and_type_validation():
    with pytest.raises(ConfigError):
        resolve_config({"seeds": []})
    with pytest.raises(ConfigError):
        resolve_config({"seeds": [0, "one"]})
    with pytest.raises(ConfigError):
        resolve_config({"seeds": [True]})
    with pytest.raises(ConfigError):
        resolve_config({"hyperparams": {"local_steps": 2.5}})
    with pytest.raises(ConfigError):
        resolve_config({"schedule": {"participation": 1.5}})
    with pytest.raises(ConfigError):
        resolve_config([1, 2, 3])


def test_canonical_json_is_order_independent():
    a = canonical_json({"b": 1, "a": {"d": 2, "c": 3}})
    b = canonical_json({"a": {"c": 3, "d": 2}, "b": 1})
    assert a == b
    assert " " not in a


def test_config_hash_tracks_values_not_ordering():
    base = resolve_config({"seeds": [0]})
    same = resolve_config({"seeds": [0]})
    assert base.hash() == same.hash()
    changed = resolve_config({"seeds": [0], "hyperparams": {"alpha": 11.0}})
    assert base.hash() != changed.hash()
    assert config_hash(base.resolved()) == base.hash()
    assert len(base.hash()) == 64


def test_resolved_roundtrips_through_json():
    config = resolve_config({"problem": {"kind": "benchmark"}})
    resolved = config.resolved()
    assert json.loads(json.dumps(resolved)) == resolved


def test_load_config_from_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"protocol": "ifca", "seeds": [4]}))
    config = load_config(path)
    assert config.protocol == "ifca"
    assert config.seeds == [4]


def test_load_config_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(tmp_path / "absent.json")
    assert any("not found" in p for p in err.value.problems)

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert any("not valid JSON" in p for p in err.value.problems)
