"""Configuration dataclasses and spec-file loading."""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Invalid configuration value, reported against its dotted key path."""
    def __init__(self, key_path, message):
        super().__init__("{}: {}".format(key_path, message))
        self.key_path = key_path
        self.message = message


def dbm_to_watts(p_dbm):
    """p_mW = 10^(dBm/10)."""
    return 10 ** (p_dbm / 10) / 1000


@dataclass
class SystemConfig:
    """Constants of the dual-functional base station world.

    :param n_antennas: ULA element count N (half-wavelength spacing)
    :param n_users: downlink user count K
    :param snapshots: sensing snapshots L per step
    :param p_max_dbm: transmit power budget
    :param noise_power: sigma^2 in linear watts
    :param target_angle_deg: target azimuth, strictly inside (-90, 90)
    :param target_gain: complex reflection amplitude alpha
    :param pathloss_exponent: distance path-loss exponent
    :param user_distances_m: one distance per user
    :param rician_k: Rician factor, 0 means Rayleigh
    :param channel_corr: Gauss-Markov coefficient rho of the scattered part
    :param episode_len: steps T per episode
    :param history_len: observation stack depth H
    """
    n_antennas: int = 4
    n_users: int = 2
    snapshots: int = 32
    p_max_dbm: float = 20.0
    noise_power: float = 1e-6
    target_angle_deg: float = 30.0
    target_gain: complex = 0.004 + 0j
    pathloss_exponent: float = 2.2
    user_distances_m: Tuple[float, ...] = (40.0, 60.0)
    rician_k: float = 0.0
    channel_corr: float = 0.9
    episode_len: int = 50
    history_len: int = 8

    @property
    def p_max(self):
        """Power budget in linear watts."""
        return dbm_to_watts(self.p_max_dbm)

    @property
    def action_dim(self):
        return 2 * self.n_antennas * self.n_users

    @property
    def frame_dim(self):
        return 4 * self.n_antennas * self.n_users + 3

    @property
    def observation_dim(self):
        return self.history_len * self.frame_dim

    def validate(self, prefix="system"):
        def check(ok, key, message):
            if not ok:
                raise ConfigError("{}.{}".format(prefix, key), message)

        for key in ("n_antennas", "n_users", "snapshots", "episode_len", "history_len"):
            value = getattr(self, key)
            check(isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                  key, "must be a positive integer")
        check(self.n_antennas >= self.n_users, "n_antennas", "need N >= K")
        check(self.snapshots >= 2, "snapshots", "need L >= 2")
        check(math.isfinite(self.noise_power) and self.noise_power > 0,
              "noise_power", "must be positive")
        check(math.isfinite(self.p_max_dbm), "p_max_dbm", "must be finite")
        check(abs(self.target_angle_deg) < 90, "target_angle_deg", "need |theta| < 90")
        check(0.0 <= self.channel_corr <= 1.0, "channel_corr", "need 0 <= rho <= 1")
        check(self.rician_k >= 0, "rician_k", "must be >= 0")
        check(math.isfinite(self.pathloss_exponent), "pathloss_exponent", "must be finite")
        check(len(self.user_distances_m) == self.n_users,
              "user_distances_m", "need one distance per user")
        check(all(d > 0 for d in self.user_distances_m),
              "user_distances_m", "distances must be positive")
        check(abs(self.target_gain) > 0, "target_gain", "must be non-zero")


@dataclass
class TrainerConfig:
    """SAC trainer hyperparameters. Defaults are declared, not measured."""
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    n_experts: int = 4
    expert_hidden: int = 128
    hidden_widths: Tuple[int, ...] = (256, 256)
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    gamma: float = 0.95
    tau: float = 0.005
    batch_size: int = 256
    warmup_steps: int = 1000
    capacity: int = 100_000
    target_entropy: Optional[float] = None
    init_alpha: float = 0.2
    autotune_alpha: bool = True
    gate_balance_coef: float = 0.0
    updates_per_step: int = 1
    total_steps: int = 50_000
    eval_period: int = 5000
    eval_episodes: int = 5
    seed: int = 0

    def resolved_target_entropy(self, action_dim):
        if self.target_entropy is None:
            return -float(action_dim)
        return self.target_entropy

    def validate(self, prefix="trainer"):
        def check(ok, key, message):
            if not ok:
                raise ConfigError("{}.{}".format(prefix, key), message)

        for key in ("d_model", "n_layers", "n_heads", "d_ff", "n_experts", "expert_hidden",
                    "batch_size", "capacity", "eval_period", "eval_episodes",
                    "updates_per_step"):
            value = getattr(self, key)
            check(isinstance(value, int) and value >= 1, key, "must be a positive integer")
        for key in ("warmup_steps", "total_steps"):
            check(isinstance(getattr(self, key), int) and getattr(self, key) >= 0,
                  key, "must be a non-negative integer")
        check(self.d_model % self.n_heads == 0, "n_heads", "must divide d_model")
        check(len(self.hidden_widths) >= 1 and all(w >= 1 for w in self.hidden_widths),
              "hidden_widths", "need positive widths")
        for key in ("lr_actor", "lr_critic", "lr_alpha", "init_alpha"):
            check(getattr(self, key) > 0, key, "must be positive")
        check(0 < self.gamma <= 1, "gamma", "need 0 < gamma <= 1")
        check(0 < self.tau <= 1, "tau", "need 0 < tau <= 1")
        check(self.gate_balance_coef >= 0, "gate_balance_coef", "must be >= 0")


@dataclass
class RewardShaping:
    """Calibration constants folded into the normalized reward."""
    rate_ref: float = 10.0
    c_ref: float = -4.0
    c_scale: float = 2.0
    beta: float = 1.0
    gamma: float = 1.0

    def validate(self, prefix="reward_shaping"):
        if not self.rate_ref > 0:
            raise ConfigError(prefix + ".rate_ref", "must be positive")
        if not self.c_scale > 0:
            raise ConfigError(prefix + ".c_scale", "must be positive")
        for key in ("c_ref", "beta", "gamma"):
            if not math.isfinite(getattr(self, key)):
                raise ConfigError("{}.{}".format(prefix, key), "must be finite")


@dataclass
class LlmEndpoint:
    """Chat-completion service descriptor. The token itself lives in the
    environment variable named by `token_env`."""
    url: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-mini"
    token_env: str = "ISACLAB_LLM_TOKEN"
    timeout: float = 60.0
    retries: int = 2
    temperature: float = 0.0
    top_k: int = 3
    fallback_on_error: bool = False

    def validate(self, prefix="llm"):
        if not self.url:
            raise ConfigError(prefix + ".url", "must be set")
        if not self.timeout > 0:
            raise ConfigError(prefix + ".timeout", "must be positive")
        if not 0 <= self.retries <= 2:
            raise ConfigError(prefix + ".retries", "need 0 <= retries <= 2")
        if not self.top_k >= 1:
            raise ConfigError(prefix + ".top_k", "must be >= 1")


AGENT_KINDS = ("agentic", "mlp_sac", "random", "mrt")


def check_reward_mode(mode, key_path="reward_mode"):
    if mode in ("llm", "fallback", "manual"):
        return
    if isinstance(mode, str) and mode.startswith("file:") and len(mode) > len("file:"):
        return
    raise ConfigError(key_path, "expected llm, fallback, manual or file:PATH, got {!r}".format(mode))


@dataclass
class ExperimentSpec:
    """One method swept over transmit powers and seeds."""
    system: SystemConfig = field(default_factory=SystemConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    reward_shaping: RewardShaping = field(default_factory=RewardShaping)
    llm: LlmEndpoint = field(default_factory=LlmEndpoint)
    reward_mode: str = "fallback"
    agent_kind: str = "agentic"
    sweep: Tuple[float, ...] = (10.0, 15.0, 20.0, 25.0, 30.0)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    label: Optional[str] = None

    @property
    def method(self):
        if self.label:
            return self.label
        return "{}-{}".format(self.agent_kind, self.reward_mode.split(":")[0])

    def validate(self):
        self.system.validate()
        self.trainer.validate()
        self.reward_shaping.validate()
        self.llm.validate()
        check_reward_mode(self.reward_mode)
        if self.agent_kind not in AGENT_KINDS:
            raise ConfigError("agent_kind", "expected one of {}".format(", ".join(AGENT_KINDS)))
        if len(self.seeds) < 1:
            raise ConfigError("seeds", "need at least one seed")
        if len(self.sweep) < 1:
            raise ConfigError("sweep", "need at least one power")
        if any(b <= a for a, b in zip(self.sweep, self.sweep[1:])):
            raise ConfigError("sweep", "values must be strictly increasing")
        if not self.output_dir:
            raise ConfigError("output_dir", "must be set")


def _coerce(cls, data, prefix):
    """Build dataclass `cls` from a flat mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key_path = "{}.{}".format(prefix, key) if prefix else str(key)
        if key not in fields:
            raise ConfigError(key_path, "unknown key")
        default = fields[key].default
        if key == "target_gain":
            value = _coerce_complex(value, key_path)
        elif isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def _coerce_complex(value, key_path):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ConfigError(key_path, "expected a number or [re, im]")


_SECTIONS = {
    "system": SystemConfig,
    "trainer": TrainerConfig,
    "reward_shaping": RewardShaping,
    "llm": LlmEndpoint,
}


def spec_from_mapping(data: Dict[str, Any]) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "spec file must hold a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(str(key), "unknown key")
        if key in _SECTIONS:
            kwargs[key] = _coerce(_SECTIONS[key], value, key)
        elif key in ("sweep", "seeds"):
            convert = float if key == "sweep" else int
            try:
                kwargs[key] = tuple(convert(v) for v in value)
            except (TypeError, ValueError) as e:
                raise ConfigError(key, "expected a list of numbers") from e
        else:
            kwargs[key] = value
    spec = ExperimentSpec(**kwargs)
    spec.validate()
    return spec


def load_spec(path):
    """Read and validate a YAML spec file.

    Returns `(spec, raw_bytes)`; the bytes feed the run's spec hash.
    """
    raw = Path(path).read_bytes()
    try:
        data = yaml.safe_load(raw.decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise ConfigError("<root>", "unreadable spec file: {}".format(e)) from e
    spec = spec_from_mapping(data if data is not None else {})
    logger.debug("loaded spec %s (%s)", path, spec.method)
    return spec, raw


def load_system_config(path):
    """Read a flat YAML file of SystemConfig keys."""
    data = yaml.safe_load(Path(path).read_text())
    config = _coerce(SystemConfig, data, "system")
    config.validate()
    return config
