import numpy as np
import pytest

from isaclab import phy
from isaclab.config import SystemConfig
from isaclab.core import (EnvUsageError, InvalidActionError, IsacEnv, action_to_beamformer,
                          beamformer_to_action, channels_from_frame, feature_map)
from isaclab.reward import builtin_normalized_reward, parse


def make_env(**kwargs):
    return IsacEnv(SystemConfig(**kwargs), builtin_normalized_reward())


def test_observation_shape_and_padding():
    env = make_env()
    obs = env.reset(0)
    c = env.config
    assert obs.shape == (c.history_len * c.frame_dim,)
    # only the newest frame is filled after reset
    np.testing.assert_array_equal(obs[:-c.frame_dim], 0)
    assert env.observation_scale().shape == obs.shape


def test_newest_frame_holds_current_channel():
    env = make_env()
    obs = env.reset(1)
    c = env.config
    h = channels_from_frame(obs[-c.frame_dim:], c.n_antennas, c.n_users)
    np.testing.assert_array_equal(h, env.channels.h)

    out = env.step(np.zeros(c.action_dim) + 0.1)
    h = channels_from_frame(out.observation[-c.frame_dim:], c.n_antennas, c.n_users)
    np.testing.assert_array_equal(h, env.channels.h)
    assert out.observation[-3] == pytest.approx(out.rate_bps_hz)
    assert out.observation[-1] == pytest.approx(1 / c.episode_len)


def test_action_layout():
    w = np.arange(8).reshape(4, 2) + 1j * np.arange(8, 16).reshape(4, 2)
    np.testing.assert_array_equal(action_to_beamformer(beamformer_to_action(w), 4, 2), w)


def test_power_is_projected():
    env = make_env()
    env.reset(0)
    out = env.step(np.full(env.action_dim, 50.0))
    assert out.info["power_used"] == pytest.approx(env.config.p_max)
    assert out.info["power_ratio"] == pytest.approx(1.0)


def test_episode_end():
    env = make_env(episode_len=3)
    env.reset(0)
    action = np.full(env.action_dim, 0.1)
    assert not env.step(action).done
    assert not env.step(action).done
    assert env.step(action).done
    with pytest.raises(EnvUsageError):
        env.step(action)


def test_step_before_reset():
    with pytest.raises(EnvUsageError):
        make_env().step(np.zeros(16))


def test_invalid_actions():
    env = make_env()
    env.reset(0)
    with pytest.raises(InvalidActionError):
        env.step(np.zeros(3))
    bad = np.zeros(env.action_dim)
    bad[2] = np.nan
    with pytest.raises(InvalidActionError):
        env.step(bad)


def test_zero_action_caps_crb():
    env = make_env()
    env.reset(0)
    out = env.step(np.zeros(env.action_dim))
    assert out.crb == phy.CRB_CAP
    assert out.rate_bps_hz == 0


def test_same_seed_same_trajectory():
    actions = np.random.default_rng(9).uniform(-1, 1, (10, 16))

    def trace():
        env = make_env(episode_len=10)
        env.reset(42)
        return [env.step(a) for a in actions]

    for a, b in zip(trace(), trace()):
        np.testing.assert_array_equal(a.observation, b.observation)
        assert a.reward == b.reward


def test_reward_override_per_step():
    env = make_env()
    env.reset(0)
    out = env.step(np.full(env.action_dim, 0.2), reward=parse("step_frac"))
    assert out.reward == pytest.approx(1 / env.config.episode_len)


def test_features():
    config = SystemConfig()
    state = phy.sample_channels(config, np.random.default_rng(0))
    beam = phy.mrt_beamformer(state, config.p_max)
    f = feature_map(state, beam, config, 5)
    assert f["log10_crb"] == pytest.approx(np.log10(f["crb"]))
    assert f["min_user_rate"] <= f["rate"]
    assert f["step_frac"] == pytest.approx(0.1)
    assert f["power_budget"] == pytest.approx(config.p_max)
