"""Episodic ISAC environment around the physics in `isaclab.phy`.

Observation layout, per frame (oldest frame first, H frames stacked):

    [0, NK)          Re h   (user-major, h[k, n])
    [NK, 2NK)        Im h
    [2NK, 3NK)       Re W of the previous step (W[n, k], row-major)
    [3NK, 4NK)       Im W of the previous step
    4NK              previous sum rate
    4NK + 1          previous log10(CRB)
    4NK + 2          step index / T

Raw actions use the same W layout: first NK entries real parts, last NK
imaginary parts.
"""

import logging
from collections import deque
from dataclasses import dataclass
from functools import partial
from typing import Dict

import numpy as np

from isaclab import phy
from isaclab.reward import evaluate

logger = logging.getLogger(__name__)


class EnvUsageError(Exception):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    rate_bps_hz: float
    crb: float
    reward: float
    done: bool
    info: Dict[str, float]


def action_to_beamformer(raw, n_antennas, n_users):
    """Reshape a raw real vector to the complex N x K precoder."""
    nk = n_antennas * n_users
    raw = np.asarray(raw, dtype=float)
    return (raw[:nk] + 1j * raw[nk:]).reshape(n_antennas, n_users)


def beamformer_to_action(w):
    w = np.asarray(w)
    return np.concatenate([w.real.ravel(), w.imag.ravel()])


def channels_from_frame(frame, n_antennas, n_users):
    """Recover the K x N channel block of one observation frame."""
    nk = n_antennas * n_users
    return (frame[:nk] + 1j * frame[nk:2 * nk]).reshape(n_users, n_antennas)


def feature_map(channels, action, config, step_index):
    """Named step features; the CRB is clamped to phy.CRB_CAP."""
    rates = phy.per_user_rates(channels, action, config.noise_power)
    try:
        crb = min(phy.crb_angle(channels, action, config), phy.CRB_CAP)
    except phy.UnobservableTargetError:
        crb = phy.CRB_CAP
    budget = config.p_max
    used = action.power
    return {
        "rate": float(np.sum(rates)),
        "crb": float(crb),
        "log10_crb": float(np.log10(crb)),
        "min_user_rate": float(np.min(rates)),
        "power_used": used,
        "power_budget": budget,
        "power_ratio": float(min(used / budget, 1.0)),
        "step_frac": step_index / config.episode_len,
    }


class IsacEnv:
    """Dual-functional BS environment with power-projected actions.

    :param config: SystemConfig, validated on construction
    :param reward: default RewardExpr used by `step`

    One instance owns one random stream; it is not meant to be shared
    between threads.
    """
    def __init__(self, config, reward=None):
        config.validate()
        self.config = config
        self.reward = reward

        # # #

        self._rng = None
        self._channels = None
        self._frames = deque(maxlen=config.history_len)
        self._t = 0
        self._done = True

    @property
    def observation_dim(self):
        return self.config.observation_dim

    @property
    def action_dim(self):
        return self.config.action_dim

    @property
    def channels(self):
        return self._channels

    def observation_scale(self):
        """Per-feature scale bringing observations to order one."""
        c = self.config
        nk = c.n_antennas * c.n_users
        pathloss = np.asarray(c.user_distances_m, dtype=float) ** (-c.pathloss_exponent)
        h_scale = np.repeat(1 / np.sqrt(pathloss / 2), c.n_antennas)
        w_scale = np.full(nk, np.sqrt(2 * nk / c.p_max))
        frame = np.concatenate([h_scale, h_scale, w_scale, w_scale, [0.1, 0.25, 1.0]])
        return np.tile(frame, c.history_len)

    def _frame(self, w_prev, rate_prev, log10_crb_prev):
        h = self._channels.h
        return np.concatenate([h.real.ravel(), h.imag.ravel(),
                               w_prev.real.ravel(), w_prev.imag.ravel(),
                               [rate_prev, log10_crb_prev, self._t / self.config.episode_len]])

    def _observation(self):
        c = self.config
        pad = c.history_len - len(self._frames)
        zeros = [np.zeros(c.frame_dim)] * pad
        return np.concatenate(zeros + list(self._frames))

    def reset(self, seed):
        """Start an episode; identical seeds give identical trajectories."""
        c = self.config
        self._rng = np.random.default_rng(seed)
        self._channels = phy.sample_channels(c, self._rng)
        self._t = 0
        self._done = False
        self._frames.clear()
        w0 = np.zeros((c.n_antennas, c.n_users), dtype=complex)
        self._frames.append(self._frame(w0, 0.0, 0.0))
        logger.debug("reset episode with seed %s", seed)
        return self._observation()

    def step(self, action, reward=None) -> StepOutcome:
        """Execute one raw action and advance the channel."""
        if self._done:
            raise EnvUsageError("episode finished or not started; call reset()")
        reward = reward if reward is not None else self.reward
        if reward is None:
            raise EnvUsageError("no reward expression given")
        c = self.config
        raw = np.asarray(action, dtype=float).ravel()
        if raw.shape != (c.action_dim,):
            raise InvalidActionError("expected {} action entries, got {}"
                                     .format(c.action_dim, raw.size))
        if not np.all(np.isfinite(raw)):
            raise InvalidActionError("action contains non-finite entries")

        beam = phy.project_power(action_to_beamformer(raw, c.n_antennas, c.n_users), c.p_max)
        info = feature_map(self._channels, beam, c, self._t + 1)
        value = evaluate(reward, info)

        self._channels = phy.evolve_channels(self._channels, c, self._rng)
        self._t += 1
        self._done = self._t >= c.episode_len
        self._frames.append(self._frame(beam.w, info["rate"], info["log10_crb"]))
        return StepOutcome(observation=self._observation(),
                           rate_bps_hz=info["rate"],
                           crb=info["crb"],
                           reward=value,
                           done=self._done,
                           info=info)


def make_env_factory(config, reward=None):
    """Zero-argument factory, picklable for process pools."""
    return partial(IsacEnv, config, reward)
