"""Numerical oracles run by `isaclab selftest`.

Each check returns a CheckResult instead of raising so that one failure
does not hide the others.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from isaclab import phy
from isaclab import reward as dsl
from isaclab.agent import Batch, SacAgent, train
from isaclab.config import SystemConfig, TrainerConfig
from isaclab.core import IsacEnv, make_env_factory
from isaclab.nets import TransformerMoeActor, squashed_log_prob

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# CRB against a numerically differentiated Fisher information

def dft_snapshots(n_streams, snapshots):
    """K x L orthogonal snapshots with S S^H = L I."""
    assert n_streams <= snapshots, "need K <= L for orthogonal snapshots"
    k = np.arange(n_streams)[:, None]
    l = np.arange(snapshots)[None, :]
    return np.exp(-2j * np.pi * k * l / snapshots)


def echo_mean(theta, alpha, w, s):
    """Noise-free echo alpha a(theta) a(theta)^T W S, one column per snapshot."""
    n = w.shape[0]
    a = phy.steering_vector(n, theta)
    return alpha * np.outer(a, a) @ w @ s


def numerical_crb(channels, action, config, step=1e-4):
    """CRB on theta from a finite-difference Fisher information matrix.

    Unknowns (theta, Re alpha, Im alpha); the theta derivative uses the
    4-point central difference, the alpha derivatives are exact.
    """
    w = action.w
    s = dft_snapshots(w.shape[1], config.snapshots)
    theta, alpha = channels.theta, channels.alpha

    def mu(t):
        return echo_mean(t, alpha, w, s)

    d_theta = (-mu(theta + 2 * step) + 8 * mu(theta + step)
               - 8 * mu(theta - step) + mu(theta - 2 * step)) / (12 * step)
    base = echo_mean(theta, 1.0, w, s)
    derivs = np.stack([d_theta.ravel(), base.ravel(), 1j * base.ravel()], axis=1)
    fim = 2.0 / config.noise_power * np.real(derivs.conj().T @ derivs)
    return float(np.linalg.inv(fim)[0, 0])


def oracle_configs():
    """Array sizes and user counts the CRB oracle sweeps over."""
    distances = {1: (40.0,), 2: (40.0, 60.0)}
    return [SystemConfig(n_antennas=n, n_users=k, user_distances_m=distances[k])
            for n in (2, 4, 8) for k in (1, 2)]


def check_crb_oracle(n_draws=50, rel_tol=1e-6, seed=0):
    configs = oracle_configs()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_draws):
        config = configs[i % len(configs)]
        channels = phy.sample_channels(config, rng)
        w = rng.standard_normal((config.n_antennas, config.n_users)) \
            + 1j * rng.standard_normal((config.n_antennas, config.n_users))
        action = phy.project_power(w, config.p_max)
        analytic = phy.crb_angle(channels, action, config)
        numeric = numerical_crb(channels, action, config)
        worst = max(worst, abs(analytic - numeric) / numeric)
    passed = worst <= rel_tol
    return CheckResult("crb-oracle", passed, "worst relative error {:.2e}".format(worst))


# Gradients against central finite differences

def tiny_trainer(**overrides):
    values = dict(d_model=8, n_layers=1, n_heads=2, d_ff=8, n_experts=2, expert_hidden=8,
                  hidden_widths=(8, 8), batch_size=4, warmup_steps=0, capacity=64,
                  eval_period=10, eval_episodes=1, total_steps=10)
    values.update(overrides)
    return TrainerConfig(**values)


def tiny_system(**overrides):
    values = dict(n_antennas=2, n_users=1, user_distances_m=(50.0,), history_len=2,
                  episode_len=5, snapshots=8)
    values.update(overrides)
    return SystemConfig(**values)


def _fixed_batch(agent, rng, n=4):
    return Batch(obs=rng.standard_normal((n, agent.obs_dim)),
                 action=rng.uniform(-1, 1, (n, agent.action_dim)),
                 reward=rng.standard_normal(n),
                 next_obs=rng.standard_normal((n, agent.obs_dim)),
                 done=np.zeros(n))


def _first_weight(module):
    return next(p for p in module.parameters() if p.dim() == 2)


def gradient_error(loss_fn, param, index=(0, 0), eps=1e-6):
    """Relative error between autograd and a central difference at one entry."""
    param.grad = None
    loss_fn().backward()
    analytic = float(param.grad[index])
    with torch.no_grad():
        original = float(param[index])
        param[index] = original + eps
        plus = float(loss_fn())
        param[index] = original - eps
        minus = float(loss_fn())
        param[index] = original
    numeric = (plus - minus) / (2 * eps)
    return abs(analytic - numeric) / max(abs(numeric), 1e-8)


def check_gradients(actor_kind="agentic", rel_tol=1e-4, seed=0):
    torch.manual_seed(seed)
    system = tiny_system(history_len=2 if actor_kind == "agentic" else 1)
    agent = SacAgent(system.observation_dim, system.action_dim, tiny_trainer(),
                     actor_kind=actor_kind, history_len=system.history_len,
                     dtype=torch.float64)
    rng = np.random.default_rng(seed)
    batch = _fixed_batch(agent, rng)
    noise = torch.as_tensor(rng.standard_normal((len(batch), agent.action_dim)))
    obs = agent.tensor(batch.obs)

    critic_err = gradient_error(lambda: agent.critic_loss(batch, noise)[0],
                                _first_weight(agent.q1))
    actor_err = gradient_error(lambda: agent.actor_loss(obs, noise)[0],
                               _first_weight(agent.actor))
    worst = max(critic_err, actor_err)
    return CheckResult("gradients-" + actor_kind, worst <= rel_tol,
                       "critic {:.2e}, actor {:.2e}".format(critic_err, actor_err))


def check_gate(seed=0, n_inputs=1000):
    torch.manual_seed(seed)
    system = tiny_system()
    actor = TransformerMoeActor(system.frame_dim, system.history_len, system.action_dim,
                                tiny_trainer(n_experts=3))
    gen = torch.Generator().manual_seed(seed)
    obs = torch.cat([torch.randn(n_inputs, system.observation_dim, generator=gen),
                     torch.full((1, system.observation_dim), 1e3),
                     torch.full((1, system.observation_dim), -1e3)])
    with torch.no_grad():
        mean, log_std, gate = actor(obs)
    sum_err = float((gate.sum(dim=-1) - 1).abs().max())
    finite = bool(torch.isfinite(mean).all() and torch.isfinite(log_std).all())
    passed = sum_err <= 1e-6 and finite and bool((gate >= 0).all())
    return CheckResult("gate", passed,
                       "max |sum - 1| {:.1e}, finite outputs {}".format(sum_err, finite))


def check_squashed_density(mean=0.3, log_std=-0.5, delta=1e-5, rel_tol=1e-3):
    """1-D squashed Gaussian density against a differentiated CDF."""
    sigma = math.exp(log_std)

    def cdf(a):
        return 0.5 * (1 + math.erf((math.atanh(a) - mean) / (sigma * math.sqrt(2))))

    worst = 0.0
    for a in (-0.9, -0.5, 0.0, 0.4, 0.8, 0.95):
        numeric = (cdf(a + delta) - cdf(a - delta)) / (2 * delta)
        u = torch.tensor([[math.atanh(a)]], dtype=torch.float64)
        logp = squashed_log_prob(torch.tensor([[mean]], dtype=torch.float64),
                                 torch.tensor([[log_std]], dtype=torch.float64), u)
        worst = max(worst, abs(math.exp(float(logp)) - numeric) / numeric)
    return CheckResult("squashed-density", worst <= rel_tol,
                       "worst relative error {:.2e}".format(worst))


# Reward language fuzzing

_FUZZ_CONSTANTS = (0.0, 1.0, 2.0, 0.5, 10.0, 0.001, 2.5e-07, 123.25)


def random_ast(rng, max_depth=5):
    """Random well-formed AST with non-negative constants."""
    if max_depth <= 1 or rng.random() < 0.25:
        if rng.random() < 0.5:
            return dsl.Constant(float(rng.choice(_FUZZ_CONSTANTS)))
        return dsl.Feature(str(rng.choice(dsl.FEATURE_NAMES)))
    sub = max_depth - 1
    roll = rng.integers(4)
    if roll == 0:
        cls = [dsl.Neg, dsl.Log10, dsl.Ln, dsl.Exp, dsl.Abs, dsl.Tanh][rng.integers(6)]
        return cls(random_ast(rng, sub))
    if roll == 1:
        lo = float(rng.integers(-5, 3))
        return dsl.Clip(random_ast(rng, sub), lo, lo + float(rng.integers(0, 5)))
    cls = [dsl.Add, dsl.Sub, dsl.Mul, dsl.Div, dsl.Pow, dsl.Min, dsl.Max][rng.integers(7)]
    return cls(random_ast(rng, sub), random_ast(rng, sub))


def check_round_trip(n_cases=1000, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        expr = dsl.validate(random_ast(rng))
        text = expr.canonical()
        again = dsl.parse(text)
        if again != expr or again.canonical() != text:
            return CheckResult("dsl-round-trip", False, "mismatch on {!r}".format(text))
    return CheckResult("dsl-round-trip", True, "{} expressions".format(n_cases))


_FUZZ_ALPHABET = b"0123456789.eE+-*/^(), \tratecbloglnxpmiudsh_\xff\xc3"


def check_byte_fuzz(n_cases=10000, max_len=4096, seed=0):
    rng = np.random.default_rng(seed)
    accepted = 0
    for _ in range(n_cases):
        n = int(rng.integers(0, max_len))
        if rng.random() < 0.5:
            data = bytes(rng.integers(0, 256, n, dtype=np.uint8))
        else:
            data = bytes(rng.choice(np.frombuffer(_FUZZ_ALPHABET, dtype=np.uint8), n))
        try:
            dsl.parse(data)
            accepted += 1
        except dsl.ParseError:
            pass
        except Exception as e:
            return CheckResult("dsl-byte-fuzz", False,
                               "{!r} raised {}".format(data, type(e).__name__))
    return CheckResult("dsl-byte-fuzz", True,
                       "{} inputs, {} parsed".format(n_cases, accepted))


# Determinism

def env_trace(config, seed, actions, reward):
    env = IsacEnv(config, reward)
    env.reset(seed)
    return [(out.observation.tobytes(), out.reward)
            for out in (env.step(a) for a in actions)]


def check_env_determinism(seed=7):
    config = SystemConfig(episode_len=10)
    actions = np.random.default_rng(seed).uniform(-1, 1, (10, config.action_dim))
    reward = dsl.builtin_normalized_reward()
    same = env_trace(config, seed, actions, reward) == env_trace(config, seed, actions, reward)
    return CheckResult("env-determinism", same, "identical" if same else "traces differ")


def check_train_determinism(seed=3):
    system = tiny_system()
    reward = dsl.builtin_normalized_reward()
    trainer = tiny_trainer(seed=seed, total_steps=12, eval_period=6)
    runs = [train(make_env_factory(system, reward), reward, trainer).metrics for _ in range(2)]
    same = runs[0] == runs[1]
    return CheckResult("train-determinism", same, "identical" if same else "metrics differ")


CHECKS = (
    check_crb_oracle,
    lambda: check_gradients("agentic"),
    lambda: check_gradients("mlp_sac"),
    check_gate,
    check_squashed_density,
    check_round_trip,
    check_byte_fuzz,
    check_env_determinism,
    check_train_determinism,
)


def run_selftest(checks=CHECKS):
    results = []
    for check in checks:
        start = time.perf_counter()
        try:
            result = check()
        except Exception as e:
            logger.exception("self-test check crashed")
            result = CheckResult(getattr(check, "__name__", "check"), False,
                                 "{}: {}".format(type(e).__name__, e))
        result = CheckResult(result.name, result.passed, result.detail,
                             time.perf_counter() - start)
        logger.info("%-20s %s  %s", result.name, "ok" if result.passed else "FAIL",
                    result.detail)
        results.append(result)
    return results
