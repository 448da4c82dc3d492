import math

import pytest
import torch

from isaclab import nets
from isaclab.config import TrainerConfig
from isaclab.selftest import check_gate, check_squashed_density


def tiny():
    return TrainerConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, n_experts=3,
                         expert_hidden=8, hidden_widths=(8, 8))


def test_moe_actor_shapes_and_gate():
    torch.manual_seed(0)
    actor = nets.TransformerMoeActor(frame_dim=5, history_len=4, action_dim=6, config=tiny())
    mean, log_std, gate = actor(torch.randn(7, 20))
    assert mean.shape == (7, 6)
    assert log_std.shape == (7, 6)
    assert gate.shape == (7, 3)
    assert torch.allclose(gate.sum(dim=-1), torch.ones(7), atol=1e-6)
    assert float(log_std.min()) >= nets.LOG_STD_MIN
    assert float(log_std.max()) <= nets.LOG_STD_MAX


def test_output_width_independent_of_experts():
    for n_experts in (1, 2, 5):
        config = TrainerConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, n_experts=n_experts,
                               expert_hidden=8)
        mean, _, _ = nets.TransformerMoeActor(3, 2, 4, config)(torch.zeros(1, 6))
        assert mean.shape == (1, 4)


def test_uniform_gate_from_zero_logits():
    actor = nets.TransformerMoeActor(3, 2, 4, tiny())
    with torch.no_grad():
        actor.gate.weight.zero_()
        actor.gate.bias.zero_()
    _, _, gate = actor(torch.randn(2, 6))
    assert torch.allclose(gate, torch.full((2, 3), 1 / 3))
    assert float(nets.gate_entropy(gate)) == pytest.approx(math.log(3))
    assert float(nets.gate_balance_penalty(gate)) == pytest.approx(0.0, abs=1e-12)


def test_extreme_observations_stay_finite():
    assert check_gate().passed


def test_input_scale_is_applied():
    scale = torch.tensor([2.0, 0.5, 1.0])
    critic = nets.Critic(3, 1, (4,), input_scale=scale)
    plain = nets.Critic(3, 1, (4,))
    plain.load_state_dict({k: v for k, v in critic.state_dict().items() if k != "input_scale"},
                          strict=False)
    obs = torch.tensor([[1.0, 4.0, 3.0]])
    action = torch.zeros(1, 1)
    assert torch.allclose(critic(obs, action), plain(obs * scale, action))


def test_squashed_sample_in_range():
    mean = torch.tensor([[0.0, 3.0, -3.0]])
    log_std = torch.zeros(1, 3)
    action, logp = nets.squashed_sample(mean, log_std, torch.tensor([[10.0, 10.0, -10.0]]))
    assert bool((action.abs() <= 1).all())
    assert bool(torch.isfinite(logp).all())


def test_squashed_density_oracle():
    assert check_squashed_density().passed


def test_tanh_log_det_is_stable():
    u = torch.tensor([0.0, 0.5, 20.0, -40.0], dtype=torch.float64)
    expected = torch.log(1 - torch.tanh(u[:2]) ** 2)
    assert torch.allclose(nets.tanh_log_det(u)[:2], expected)
    assert bool(torch.isfinite(nets.tanh_log_det(u)).all())


def test_mlp_actor_is_smaller():
    config = TrainerConfig()
    frame_dim, history_len, action_dim = 35, 8, 16
    moe = nets.TransformerMoeActor(frame_dim, history_len, action_dim, config)
    flat = nets.MlpActor(frame_dim, action_dim, config.hidden_widths)
    assert nets.parameter_count(flat) < nets.parameter_count(moe)
    _, _, gate = flat(torch.zeros(1, frame_dim))
    assert gate is None
