"""Policy and value networks for the SAC learner."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


def _scale_buffer(module, input_scale, dim):
    if input_scale is None:
        scale = torch.ones(dim)
    else:
        scale = torch.as_tensor(input_scale, dtype=torch.get_default_dtype()).reshape(-1)
        assert scale.numel() == dim, "input scale must match the observation width"
    module.register_buffer("input_scale", scale.clone())


def mlp(widths, activation=nn.ReLU):
    """Linear layers of the given widths with activations in between."""
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


def sinusoidal_encoding(length, d_model):
    position = torch.arange(length, dtype=torch.get_default_dtype()).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.get_default_dtype())
                    * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)[:, :d_model // 2]
    return pe


class TransformerMoeActor(nn.Module):
    """Transformer encoder over the frame history feeding a gated mixture
    of expert heads.

    :param frame_dim: width of one observation frame
    :param history_len: number of stacked frames H, oldest first
    :param action_dim: raw action width
    :param config: TrainerConfig (d_model, n_layers, n_heads, d_ff,
        n_experts, expert_hidden)
    :param input_scale: per-feature observation scale, or None

    `forward` returns `(mean, log_std, gate)`; the experts are fused densely,
    mean and log-std being the gate-weighted sums of the expert outputs.
    """
    def __init__(self, frame_dim, history_len, action_dim, config, input_scale=None):
        super().__init__()
        self.frame_dim = frame_dim
        self.history_len = history_len
        self.action_dim = action_dim
        self.n_experts = config.n_experts

        _scale_buffer(self, input_scale, frame_dim * history_len)
        self.register_buffer("positional", sinusoidal_encoding(history_len, config.d_model))
        self.embed = nn.Linear(frame_dim, config.d_model)
        layer = nn.TransformerEncoderLayer(config.d_model, config.n_heads,
                                           dim_feedforward=config.d_ff, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, config.n_layers,
                                             enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.d_model)
        self.gate = nn.Linear(config.d_model, config.n_experts)
        self.experts = nn.ModuleList([
            mlp((config.d_model, config.expert_hidden, config.expert_hidden, 2 * action_dim))
            for _ in range(config.n_experts)
        ])

    def encode(self, obs):
        x = (obs * self.input_scale).reshape(-1, self.history_len, self.frame_dim)
        x = self.embed(x) + self.positional
        x = self.norm(self.encoder(x))
        # newest frame summarizes the attended history
        return x[:, -1]

    def forward(self, obs):
        z = self.encode(obs)
        gate = torch.softmax(self.gate(z), dim=-1)
        heads = torch.stack([expert(z) for expert in self.experts], dim=1)
        fused = torch.sum(gate.unsqueeze(-1) * heads, dim=1)
        mean, log_std = fused.split(self.action_dim, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX), gate


class MlpActor(nn.Module):
    """Plain MLP Gaussian policy over the flattened observation."""
    def __init__(self, obs_dim, action_dim, hidden_widths=(256, 256), input_scale=None):
        super().__init__()
        self.action_dim = action_dim
        _scale_buffer(self, input_scale, obs_dim)
        self.body = mlp((obs_dim,) + tuple(hidden_widths) + (2 * action_dim,))

    def forward(self, obs):
        mean, log_std = self.body(obs * self.input_scale).split(self.action_dim, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX), None


class Critic(nn.Module):
    """Q(s, a) approximator."""
    def __init__(self, obs_dim, action_dim, hidden_widths=(256, 256), input_scale=None):
        super().__init__()
        _scale_buffer(self, input_scale, obs_dim)
        self.body = mlp((obs_dim + action_dim,) + tuple(hidden_widths) + (1,))

    def forward(self, obs, action):
        return self.body(torch.cat([obs * self.input_scale, action], dim=-1)).squeeze(-1)


def tanh_log_det(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))


def squashed_log_prob(mean, log_std, u):
    """Log-density of tanh(u) under the squashed Gaussian, summed over
    the action dimensions."""
    z = (u - mean) / log_std.exp()
    gaussian = -0.5 * z ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    return torch.sum(gaussian - tanh_log_det(u), dim=-1)


def squashed_sample(mean, log_std, noise):
    """Reparameterized sample `tanh(mean + std * noise)` and its log-density.

    The noise is passed in so callers own the random stream.
    """
    u = mean + log_std.exp() * noise
    return torch.tanh(u), squashed_log_prob(mean, log_std, u)


def gate_entropy(gate):
    """Mean entropy of the gate distributions in a batch, in nats."""
    if gate is None:
        return torch.zeros(())
    return -torch.sum(gate * torch.log(gate.clamp_min(1e-12)), dim=-1).mean()


def gate_balance_penalty(gate):
    """Squared deviation of the batch-mean gate from uniform."""
    if gate is None:
        return torch.zeros(())
    usage = gate.mean(dim=0)
    return torch.sum((usage - 1.0 / gate.shape[-1]) ** 2)


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())
