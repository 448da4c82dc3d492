import math
import os

import numpy as np
import pytest
import torch

from isaclab import agent as sac
from isaclab import nets
from isaclab.core import make_env_factory
from isaclab.reward import builtin_normalized_reward, parse
from isaclab.selftest import check_gradients, tiny_system, tiny_trainer

slow = pytest.mark.skipif(not os.environ.get("ISACLAB_SLOW"), reason="set ISACLAB_SLOW=1")


def transition(reward, obs_dim=3, action_dim=2):
    return sac.Transition(obs=np.full(obs_dim, reward), action=np.zeros(action_dim),
                          reward=reward, next_obs=np.zeros(obs_dim), done=False)


def tiny_agent(actor_kind="agentic", **overrides):
    torch.manual_seed(0)
    system = tiny_system(history_len=2 if actor_kind == "agentic" else 1)
    return sac.SacAgent(system.observation_dim, system.action_dim, tiny_trainer(**overrides),
                        actor_kind=actor_kind, history_len=system.history_len), system


def batch_for(agent, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return sac.Batch(obs=rng.standard_normal((n, agent.obs_dim)),
                     action=rng.uniform(-1, 1, (n, agent.action_dim)),
                     reward=rng.standard_normal(n),
                     next_obs=rng.standard_normal((n, agent.obs_dim)),
                     done=np.zeros(n))


def test_memory_is_fifo():
    memory = sac.ReplayMemory(3, 3, 2)
    for r in range(5):
        memory.push(transition(float(r)))
    assert len(memory) == 3
    assert [t.reward for t in memory.transitions()] == [2.0, 3.0, 4.0]


def test_memory_samples_without_replacement():
    memory = sac.ReplayMemory(10, 3, 2)
    for r in range(10):
        memory.push(transition(float(r)))
    batch = memory.sample(10, np.random.default_rng(0))
    assert sorted(batch.reward) == list(map(float, range(10)))
    np.testing.assert_array_equal(batch.obs[:, 0], batch.reward)


def test_polyak_identities():
    a, _ = tiny_agent()
    online, target = a.q1, a.q1_target
    with torch.no_grad():
        for p in online.parameters():
            p.add_(1.0)
    before = [p.clone() for p in target.parameters()]
    sac.polyak_update(target, online, 0.0)
    for p, q in zip(target.parameters(), before):
        assert torch.equal(p, q)
    sac.polyak_update(target, online, 1.0)
    for p, q in zip(target.parameters(), online.parameters()):
        assert torch.equal(p, q)


def test_full_copy_after_update():
    a, _ = tiny_agent(tau=1.0)
    a.update(batch_for(a))
    for p, q in zip(a.q2_target.parameters(), a.q2.parameters()):
        assert torch.equal(p, q)


def test_zero_discount_target_is_reward():
    a, _ = tiny_agent(gamma=0.0)
    batch = batch_for(a)
    _, target = a.critic_loss(batch, a.noise(len(batch), a.action_dim))
    assert torch.equal(target, a.tensor(batch.reward))


def test_gradients_match_finite_differences():
    assert check_gradients("agentic").passed
    assert check_gradients("mlp_sac").passed


def test_act():
    a, system = tiny_agent()
    obs = np.random.default_rng(1).standard_normal(system.observation_dim)
    first = a.act(obs, deterministic=True)
    np.testing.assert_array_equal(first, a.act(obs, deterministic=True))
    assert first.shape == (system.action_dim,)
    assert np.all(np.abs(a.act(obs)) < 1)
    with pytest.raises(sac.ObservationShapeError):
        a.act(obs[:-1])


def test_saturated_actor_stays_inside_open_box():
    a, system = tiny_agent("mlp_sac")
    with torch.no_grad():
        a.actor.body[-1].bias[:a.action_dim] = 20.0
        a.actor.body[-1].bias[a.action_dim:] = nets.LOG_STD_MIN
    obs = np.zeros(system.observation_dim)
    for deterministic in (True, False):
        action = a.act(obs, deterministic=deterministic)
        assert np.all(np.abs(action) < 1)
        assert np.all(action > 0.999)


def test_update_report():
    a, _ = tiny_agent()
    report = a.update(batch_for(a))
    assert all(math.isfinite(v) for v in report.as_dict().values())
    assert 0 <= report.gate_entropy <= math.log(a.config.n_experts) + 1e-9
    assert a.n_updates == 1


def test_mlp_update_report():
    a, _ = tiny_agent("mlp_sac", gate_balance_coef=0.1)
    assert a.update(batch_for(a)).gate_entropy == 0


def test_divergence_is_reported():
    a, _ = tiny_agent()
    batch = batch_for(a)
    bad = sac.Batch(obs=batch.obs, action=batch.action, reward=batch.reward * np.nan,
                    next_obs=batch.next_obs, done=batch.done)
    with pytest.raises(sac.TrainingDivergedError):
        a.update(bad)


def test_checkpoint_round_trip(tmp_path):
    a, system = tiny_agent()
    a.update(batch_for(a))
    path = tmp_path / "checkpoint.pt"
    sac.save_checkpoint(path, a.state(), reward_text="rate")
    loaded, payload = sac.load_checkpoint(path)
    assert payload["reward"] == "rate"
    assert payload["trainer"]["d_model"] == 8
    obs = np.random.default_rng(2).standard_normal(system.observation_dim)
    np.testing.assert_allclose(loaded.act(obs, deterministic=True),
                               a.act(obs, deterministic=True), rtol=1e-6)


def run_train(**overrides):
    system = tiny_system()
    reward = builtin_normalized_reward()
    return sac.train(make_env_factory(system, reward), reward, tiny_trainer(**overrides))


def test_no_updates_before_warmup():
    result = run_train(total_steps=8, warmup_steps=20, eval_period=4)
    assert result.n_updates == 0
    assert [row["env_step"] for row in result.metrics] == [4, 8]


def test_eval_rows_and_final_row():
    result = run_train(total_steps=25, eval_period=10)
    assert [row["env_step"] for row in result.metrics] == [10, 20, 25]
    assert result.n_updates == 25 - 3
    assert result.best_return == max(row["mean_return"] for row in result.metrics)
    assert result.best_state is not None


def test_zero_steps_still_evaluates():
    result = run_train(total_steps=0)
    assert [row["env_step"] for row in result.metrics] == [0]


def test_training_is_deterministic():
    assert run_train(seed=5).metrics == run_train(seed=5).metrics


def test_metrics_csv(tmp_path):
    rows = [{"env_step": 10, "mean_return": 1.5, "mean_rate": 2.0, "mean_crb": 1e-4}]
    sac.write_metrics_csv(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == \
        "env_step,mean_return,mean_rate,mean_crb"
    assert sac.read_metrics_csv(tmp_path / "m.csv") == rows


def test_evaluate_policy():
    system = tiny_system(n_antennas=4, user_distances_m=(40.0,))
    factory = make_env_factory(system, builtin_normalized_reward())
    policy = sac.baseline_heuristics("random", system)
    one = sac.evaluate_policy(policy, factory, 1, seed=3)
    assert one.mean_return == one.episodes[0]["return"]
    assert one.mean_rate == one.episodes[0]["mean_rate"]
    again = sac.evaluate_policy(policy, factory, 3, seed=3)
    assert again.episodes == sac.evaluate_policy(policy, factory, 3, seed=3).episodes


def test_mrt_beats_random_single_user():
    system = tiny_system(n_antennas=4, user_distances_m=(40.0,))
    factory = make_env_factory(system, parse("rate"))
    mrt = sac.evaluate_policy(sac.baseline_heuristics("mrt", system), factory, 20, seed=0)
    rnd = sac.evaluate_policy(sac.baseline_heuristics("random", system), factory, 20, seed=0)
    assert mrt.mean_rate > rnd.mean_rate


def test_random_policy_is_feasible_after_projection():
    system = tiny_system()
    policy = sac.baseline_heuristics("random", system, seed=0)
    env = make_env_factory(system, parse("power_used"))()
    obs = env.reset(0)
    for _ in range(system.episode_len):
        out = env.step(policy.act(obs))
        assert out.info["power_used"] <= system.p_max * (1 + 1e-9)
        obs = out.observation


def test_mrt_policy_matches_closed_form():
    system = tiny_system(n_antennas=4, user_distances_m=(40.0,), noise_power=1.0)
    env = make_env_factory(system, parse("rate"))()
    obs = env.reset(0)
    h = env.channels.h[0]
    out = env.step(sac.baseline_heuristics("mrt", system).act(obs))
    assert out.rate_bps_hz == pytest.approx(np.log2(1 + system.p_max * np.linalg.norm(h) ** 2))


def test_mlp_baseline_needs_single_frame():
    system = tiny_system(history_len=1)
    reward = builtin_normalized_reward()
    result = sac.baseline_mlp_sac(make_env_factory(system, reward), reward, tiny_trainer())
    assert result.agent.actor_kind == "mlp_sac"
    with pytest.raises(AssertionError):
        sac.baseline_mlp_sac(make_env_factory(tiny_system(), reward), reward, tiny_trainer())


@slow
def test_critic_learns_constant_reward():
    system = tiny_system()
    reward = parse("1")
    config = tiny_trainer(total_steps=5000, eval_period=5000, warmup_steps=200, batch_size=32,
                          gamma=0.5, lr_critic=1e-3, hidden_widths=(32, 32),
                          init_alpha=1e-6, autotune_alpha=False)
    result = sac.train(make_env_factory(system, reward), reward, config)
    assert result.last_losses.critic_loss < 1e-3


if __name__ == "__main__":
    test_memory_is_fifo()
    test_eval_rows_and_final_row()
