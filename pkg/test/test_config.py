import pytest
import yaml

from isaclab.config import (ConfigError, ExperimentSpec, SystemConfig, load_spec,
                            load_system_config, spec_from_mapping)


def key_path_of(data):
    with pytest.raises(ConfigError) as info:
        spec_from_mapping(data)
    return info.value.key_path


def test_defaults():
    spec = spec_from_mapping({})
    assert spec == ExperimentSpec()
    assert spec.system.p_max == pytest.approx(0.1)
    assert spec.system.action_dim == 16
    assert spec.system.observation_dim == 8 * 35
    assert spec.method == "agentic-fallback"
    assert spec.trainer.resolved_target_entropy(16) == -16


def test_sections_and_coercion():
    spec = spec_from_mapping({
        "system": {"n_antennas": 8, "target_gain": [0.003, 0.004], "user_distances_m": [30, 50]},
        "trainer": {"gamma": 1, "hidden_widths": [64, 64]},
        "sweep": [0, 5],
        "seeds": [7],
        "reward_mode": "file:reward.txt",
        "label": "mine",
    })
    assert spec.system.target_gain == complex(0.003, 0.004)
    assert spec.system.user_distances_m == (30, 50)
    assert spec.trainer.gamma == 1.0
    assert spec.trainer.hidden_widths == (64, 64)
    assert spec.sweep == (0.0, 5.0)
    assert spec.method == "mine"


def test_unknown_keys_carry_their_path():
    assert key_path_of({"system": {"antennas": 4}}) == "system.antennas"
    assert key_path_of({"trainner": {}}) == "trainner"


def test_invalid_values():
    assert key_path_of({"system": {"n_users": 3}}) == "system.user_distances_m"
    assert key_path_of({"system": {"target_angle_deg": 90}}) == "system.target_angle_deg"
    assert key_path_of({"system": {"target_gain": "big"}}) == "system.target_gain"
    assert key_path_of({"trainer": {"n_heads": 3}}) == "trainer.n_heads"
    assert key_path_of({"trainer": {"tau": 0}}) == "trainer.tau"
    assert key_path_of({"llm": {"retries": 5}}) == "llm.retries"
    assert key_path_of({"reward_shaping": {"c_scale": 0}}) == "reward_shaping.c_scale"
    assert key_path_of({"sweep": [20, 10]}) == "sweep"
    assert key_path_of({"sweep": 20}) == "sweep"
    assert key_path_of({"seeds": []}) == "seeds"
    assert key_path_of({"reward_mode": "file:"}) == "reward_mode"
    assert key_path_of({"agent_kind": "ddpg"}) == "agent_kind"


def test_load_spec_returns_bytes(tmp_path):
    path = tmp_path / "spec.yaml"
    path.write_text(yaml.safe_dump({"seeds": [1, 2], "agent_kind": "mrt"}))
    spec, raw = load_spec(path)
    assert spec.seeds == (1, 2)
    assert raw == path.read_bytes()

    path.write_text("seeds: [1, 2\n")
    with pytest.raises(ConfigError):
        load_spec(path)


def test_load_system_config(tmp_path):
    path = tmp_path / "system.yaml"
    path.write_text("n_antennas: 6\nrician_k: 3\n")
    assert load_system_config(path) == SystemConfig(n_antennas=6, rician_k=3.0)
