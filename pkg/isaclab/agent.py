"""Soft actor-critic learner, replay memory, evaluator and baselines.

Metrics CSV header: ``env_step,mean_return,mean_rate,mean_crb``; one row per
evaluation.
"""

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from isaclab import nets, phy
from isaclab.config import TrainerConfig
from isaclab.core import beamformer_to_action, channels_from_frame

logger = logging.getLogger(__name__)

METRICS_HEADER = ("env_step", "mean_return", "mean_rate", "mean_crb")

ACTOR_KINDS = ("agentic", "mlp_sac")

# evaluation episodes never share seeds with training episodes
EVAL_SEED_OFFSET = 1_000_000


class TrainingDivergedError(Exception):
    pass


class ObservationShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.reward)


class ReplayMemory:
    """Fixed-capacity FIFO ring of transitions.

    :param capacity: maximum number of stored transitions
    :param obs_dim: flat observation width
    :param action_dim: raw action width
    """
    def __init__(self, capacity, obs_dim, action_dim):
        assert capacity >= 1, "capacity must be positive"
        self.capacity = capacity

        # # #

        self._obs = np.zeros((capacity, obs_dim))
        self._action = np.zeros((capacity, action_dim))
        self._reward = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, obs_dim))
        self._done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def push(self, transition):
        assert math.isfinite(transition.reward), "reward must be finite"
        i = self.inserted % self.capacity
        self._obs[i] = transition.obs
        self._action[i] = transition.action
        self._reward[i] = transition.reward
        self._next_obs[i] = transition.next_obs
        self._done[i] = float(transition.done)
        self.inserted += 1

    def _ordered_slots(self):
        if self.inserted <= self.capacity:
            return np.arange(self.inserted)
        start = self.inserted % self.capacity
        return (start + np.arange(self.capacity)) % self.capacity

    def transitions(self):
        """Stored transitions, oldest first."""
        return [Transition(obs=self._obs[i].copy(), action=self._action[i].copy(),
                           reward=float(self._reward[i]), next_obs=self._next_obs[i].copy(),
                           done=bool(self._done[i]))
                for i in self._ordered_slots()]

    def sample(self, batch_size, rng):
        """Uniform batch, without replacement inside the batch."""
        size = len(self)
        assert batch_size <= size, "not enough transitions for a batch"
        idx = rng.choice(size, size=batch_size, replace=False)
        return Batch(obs=self._obs[idx], action=self._action[idx], reward=self._reward[idx],
                     next_obs=self._next_obs[idx], done=self._done[idx])


@dataclass(frozen=True)
class LossReport:
    critic_loss: float
    actor_loss: float
    alpha_loss: float
    entropy: float
    gate_entropy: float

    def as_dict(self):
        return dataclasses.asdict(self)


def polyak_update(target, online, tau):
    """target <- (1 - tau) target + tau online."""
    with torch.no_grad():
        for tp, p in zip(target.parameters(), online.parameters()):
            tp.mul_(1.0 - tau).add_(p, alpha=tau)


class SacAgent:
    """Twin-critic SAC with an automatically tuned entropy temperature.

    :param obs_dim: flat observation width
    :param action_dim: raw action width
    :param config: TrainerConfig
    :param actor_kind: "agentic" (Transformer-MoE) or "mlp_sac"
    :param history_len: frames stacked in one observation
    :param input_scale: per-feature observation scale shared by all nets
    :param dtype: parameter dtype; float64 for gradient checks
    """
    def __init__(self, obs_dim, action_dim, config, actor_kind="agentic", history_len=1,
                 input_scale=None, dtype=torch.float32):
        assert actor_kind in ACTOR_KINDS, "unknown actor kind"
        assert obs_dim % history_len == 0, "observation must hold whole frames"
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.config = config
        self.actor_kind = actor_kind
        self.history_len = history_len
        self.dtype = dtype

        if actor_kind == "agentic":
            self.actor = nets.TransformerMoeActor(obs_dim // history_len, history_len,
                                                  action_dim, config, input_scale)
        else:
            self.actor = nets.MlpActor(obs_dim, action_dim, config.hidden_widths, input_scale)
        self.q1 = nets.Critic(obs_dim, action_dim, config.hidden_widths, input_scale)
        self.q2 = nets.Critic(obs_dim, action_dim, config.hidden_widths, input_scale)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for module in (self.actor, self.q1, self.q2, self.q1_target, self.q2_target):
            module.to(dtype)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)

        self.log_alpha = torch.tensor(math.log(config.init_alpha), dtype=dtype,
                                      requires_grad=config.autotune_alpha)
        self.target_entropy = config.resolved_target_entropy(action_dim)

        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.lr_actor)
        self.critic_opt = torch.optim.Adam(
            list(self.q1.parameters()) + list(self.q2.parameters()), lr=config.lr_critic)
        self.alpha_opt = (torch.optim.Adam([self.log_alpha], lr=config.lr_alpha)
                          if config.autotune_alpha else None)

        # # #

        self._gen = torch.Generator().manual_seed(config.seed)
        self.n_updates = 0

    @property
    def alpha(self):
        return float(self.log_alpha.exp())

    @property
    def parameter_count(self):
        return nets.parameter_count(self.actor)

    def tensor(self, x):
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def noise(self, *shape):
        return torch.randn(*shape, generator=self._gen).to(self.dtype)

    def act(self, obs, deterministic=False):
        """Raw action in (-1, 1)^action_dim for one observation."""
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (self.obs_dim,):
            raise ObservationShapeError("expected observation of shape ({},), got {}"
                                        .format(self.obs_dim, obs.shape))
        with torch.no_grad():
            mean, log_std, _ = self.actor(self.tensor(obs).unsqueeze(0))
            if deterministic:
                action = torch.tanh(mean)
            else:
                action, _ = nets.squashed_sample(mean, log_std, self.noise(*mean.shape))
            # tanh rounds to +-1 for large pre-activations
            bound = 1.0 - torch.finfo(action.dtype).eps
            action = action.clamp(-bound, bound)
        return action.squeeze(0).double().numpy()

    def critic_loss(self, batch, noise):
        """Twin critic regression onto the soft Bellman target.

        Returns `(loss, target)`.
        """
        obs, action = self.tensor(batch.obs), self.tensor(batch.action)
        reward, next_obs = self.tensor(batch.reward), self.tensor(batch.next_obs)
        done = self.tensor(batch.done)
        with torch.no_grad():
            mean, log_std, _ = self.actor(next_obs)
            next_action, next_logp = nets.squashed_sample(mean, log_std, noise)
            q_next = torch.min(self.q1_target(next_obs, next_action),
                               self.q2_target(next_obs, next_action))
            soft = q_next - self.log_alpha.exp() * next_logp
            target = reward + self.config.gamma * (1.0 - done) * soft
        loss = F.mse_loss(self.q1(obs, action), target) + F.mse_loss(self.q2(obs, action), target)
        return loss, target

    def actor_loss(self, obs, noise):
        """Returns `(loss, log_prob, gate)`."""
        mean, log_std, gate = self.actor(obs)
        action, logp = nets.squashed_sample(mean, log_std, noise)
        q = torch.min(self.q1(obs, action), self.q2(obs, action))
        loss = (self.log_alpha.exp().detach() * logp - q).mean()
        if self.config.gate_balance_coef:
            loss = loss + self.config.gate_balance_coef * nets.gate_balance_penalty(gate)
        return loss, logp, gate

    def update(self, batch) -> LossReport:
        n = len(batch)
        critic_loss, _ = self.critic_loss(batch, self.noise(n, self.action_dim))
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()

        obs = self.tensor(batch.obs)
        actor_loss, logp, gate = self.actor_loss(obs, self.noise(n, self.action_dim))
        self.actor_opt.zero_grad()
        actor_loss.backward()
        self.actor_opt.step()

        if self.alpha_opt is not None:
            alpha_loss = -(self.log_alpha * (logp.detach() + self.target_entropy)).mean()
            self.alpha_opt.zero_grad()
            alpha_loss.backward()
            self.alpha_opt.step()
        else:
            alpha_loss = torch.zeros(())

        polyak_update(self.q1_target, self.q1, self.config.tau)
        polyak_update(self.q2_target, self.q2, self.config.tau)
        self.n_updates += 1

        report = LossReport(critic_loss=float(critic_loss),
                            actor_loss=float(actor_loss),
                            alpha_loss=float(alpha_loss),
                            entropy=float(-logp.detach().mean()),
                            gate_entropy=float(nets.gate_entropy(gate)))
        bad = [k for k, v in report.as_dict().items() if not math.isfinite(v)]
        if bad:
            raise TrainingDivergedError(
                "non-finite {} after update {} (alpha={:.3g}, losses={})"
                .format(", ".join(bad), self.n_updates, self.alpha, report.as_dict()))
        return report

    def state(self):
        """Parameters and settings, detached from the live modules."""
        return copy.deepcopy({
            "actor_kind": self.actor_kind,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "history_len": self.history_len,
            "trainer": dataclasses.asdict(self.config),
            "actor": self.actor.state_dict(),
            "q1": self.q1.state_dict(),
            "q2": self.q2.state_dict(),
            "q1_target": self.q1_target.state_dict(),
            "q2_target": self.q2_target.state_dict(),
            "log_alpha": self.log_alpha.detach(),
        })

    def load_state(self, state):
        for key in ("actor", "q1", "q2", "q1_target", "q2_target"):
            getattr(self, key).load_state_dict(state[key])
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])


def agent_from_state(state):
    trainer = dict(state["trainer"])
    trainer["hidden_widths"] = tuple(trainer["hidden_widths"])
    agent = SacAgent(state["obs_dim"], state["action_dim"], TrainerConfig(**trainer),
                     actor_kind=state["actor_kind"], history_len=state["history_len"])
    agent.load_state(state)
    return agent


def save_checkpoint(path, state, reward_text=None, extra=None):
    """Self-describing checkpoint: parameters, trainer config and reward."""
    payload = dict(state)
    payload["reward"] = reward_text
    payload["extra"] = extra or {}
    torch.save(payload, str(path))


def load_checkpoint(path):
    """Returns `(agent, payload)`."""
    payload = torch.load(str(path), map_location="cpu")
    return agent_from_state(payload), payload


# Policies

class TrainedPolicy:
    """Deterministic policy view of an agent."""
    def __init__(self, agent):
        self.agent = agent

    def reset(self, seed):
        pass

    def act(self, observation):
        return self.agent.act(observation, deterministic=True)


class RandomPolicy:
    """Uniform raw actions; the environment projects them to the budget."""
    def __init__(self, action_dim, seed=None):
        self.action_dim = action_dim
        self._rng = np.random.default_rng(seed)

    def reset(self, seed):
        self._rng = np.random.default_rng(seed)

    def act(self, observation):
        return self._rng.uniform(-1.0, 1.0, self.action_dim)


class MrtPolicy:
    """Maximum ratio transmission on the newest observed channel."""
    def __init__(self, system):
        self.system = system

    def reset(self, seed):
        pass

    def act(self, observation):
        c = self.system
        frame = np.asarray(observation)[-c.frame_dim:]
        h = channels_from_frame(frame, c.n_antennas, c.n_users)
        channels = phy.ChannelState(h=h, theta=0.0, alpha=0j, los=h, scatter=h,
                                    pathloss=np.ones(c.n_users))
        return beamformer_to_action(phy.mrt_beamformer(channels, c.p_max).w)


def baseline_heuristics(kind, system, seed=None):
    """Policy for the "random" or "mrt" floor."""
    if kind == "random":
        return RandomPolicy(system.action_dim, seed)
    if kind == "mrt":
        return MrtPolicy(system)
    raise ValueError("unknown heuristic {!r}".format(kind))


# Evaluation

@dataclass
class EvalResult:
    mean_return: float
    mean_rate: float
    mean_crb: float
    episodes: List[Dict[str, float]] = field(default_factory=list)


def run_episode(policy, env, seed, reward=None):
    policy.reset(seed)
    obs = env.reset(seed)
    total, rates, crbs = 0.0, [], []
    done = False
    while not done:
        out = env.step(policy.act(obs), reward)
        total += out.reward
        rates.append(out.rate_bps_hz)
        crbs.append(out.crb)
        obs, done = out.observation, out.done
    return {"seed": seed, "return": total,
            "mean_rate": float(np.mean(rates)), "mean_crb": float(np.mean(crbs))}


def evaluate_policy(policy, env_factory, n_episodes, seed, reward=None):
    """Episode i runs on seed `seed + i`."""
    assert n_episodes >= 1, "need at least one episode"
    env = env_factory()
    episodes = [run_episode(policy, env, seed + i, reward) for i in range(n_episodes)]
    return EvalResult(mean_return=float(np.mean([e["return"] for e in episodes])),
                      mean_rate=float(np.mean([e["mean_rate"] for e in episodes])),
                      mean_crb=float(np.mean([e["mean_crb"] for e in episodes])),
                      episodes=episodes)


# Training

@dataclass
class TrainResult:
    policy: Any
    metrics: List[Dict[str, float]]
    best_return: float
    best_state: Optional[Dict[str, Any]]
    n_updates: int
    last_losses: Optional[LossReport]

    @property
    def agent(self):
        return self.policy.agent


def _metrics_row(env_step, result):
    return {"env_step": env_step, "mean_return": result.mean_return,
            "mean_rate": result.mean_rate, "mean_crb": result.mean_crb}


def train(env_factory, reward, config, agent_kind="agentic", eval_reward=None):
    """Interleave exploration, replay updates and periodic evaluation.

    Evaluation rows land on every multiple of `eval_period` plus the last
    step; the best checkpoint is the row with the highest mean return.
    """
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    env = env_factory()
    history_len = env.config.history_len
    agent = SacAgent(env.observation_dim, env.action_dim, config, actor_kind=agent_kind,
                     history_len=history_len, input_scale=env.observation_scale())
    policy = TrainedPolicy(agent)
    memory = ReplayMemory(config.capacity, env.observation_dim, env.action_dim)
    eval_seed = EVAL_SEED_OFFSET + config.seed
    eval_reward = eval_reward if eval_reward is not None else reward
    logger.info("training %s actor (%d parameters) for %d steps",
                agent_kind, agent.parameter_count, config.total_steps)

    metrics = []
    best_return, best_state, losses = -math.inf, None, None

    def evaluate_now(env_step):
        nonlocal best_return, best_state
        result = evaluate_policy(policy, env_factory, config.eval_episodes, eval_seed,
                                 eval_reward)
        row = _metrics_row(env_step, result)
        metrics.append(row)
        logger.info("step %d: return %.3f, rate %.3f bps/Hz, crb %.3e",
                    env_step, row["mean_return"], row["mean_rate"], row["mean_crb"])
        if result.mean_return > best_return:
            best_return, best_state = result.mean_return, agent.state()

    obs = env.reset(int(rng.integers(2 ** 31)))
    for step in range(config.total_steps):
        env_step = step + 1
        if step < config.warmup_steps:
            action = rng.uniform(-1.0, 1.0, env.action_dim)
        else:
            action = agent.act(obs)
        out = env.step(action, reward)
        memory.push(Transition(obs=obs, action=action, reward=out.reward,
                               next_obs=out.observation, done=out.done))
        obs = out.observation
        if out.done:
            obs = env.reset(int(rng.integers(2 ** 31)))

        if env_step >= config.warmup_steps and len(memory) >= config.batch_size:
            for _ in range(config.updates_per_step):
                losses = agent.update(memory.sample(config.batch_size, rng))

        if env_step % config.eval_period == 0 or env_step == config.total_steps:
            evaluate_now(env_step)

    if config.total_steps == 0:
        evaluate_now(0)
    return TrainResult(policy=policy, metrics=metrics, best_return=best_return,
                       best_state=best_state, n_updates=agent.n_updates, last_losses=losses)


def baseline_mlp_sac(env_factory, reward, config, eval_reward=None):
    """The same trainer with a plain MLP actor over a single frame."""
    assert env_factory().config.history_len == 1, "MLP baseline expects H = 1"
    return train(env_factory, reward, config, agent_kind="mlp_sac", eval_reward=eval_reward)


def write_metrics_csv(rows, path):
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_HEADER})


def read_metrics_csv(path):
    with Path(path).open(newline="") as f:
        return [{"env_step": int(r["env_step"]), "mean_return": float(r["mean_return"]),
                 "mean_rate": float(r["mean_rate"]), "mean_crb": float(r["mean_crb"])}
                for r in csv.DictReader(f)]
