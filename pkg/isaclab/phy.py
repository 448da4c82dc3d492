"""Array, channel and performance models of the dual-functional base station.

All powers are linear watts. Channels are stored user-major: `h[k]` is the
length-N downlink channel of user k, and `h[k]^H w_j` is `np.vdot(h[k], w_j)`.
"""

from dataclasses import dataclass

import numpy as np

# CRB feature value used when the target is not illuminated.
CRB_CAP = 1e6

# Denominator guard for tr(A R_W A^H).
ILLUMINATION_EPS = 1e-12

# Factor in front of |alpha|^2 L in the angle Fisher information. The
# self-test perturbs it to prove the numerical oracle catches a wrong bound.
FISHER_FACTOR = 2.0


class UnobservableTargetError(Exception):
    """The beamformer delivers (numerically) no energy toward the target."""


@dataclass(frozen=True)
class ChannelState:
    """Downlink channels plus the sensing target.

    `h` is the observable K x N channel; `los` and `scatter` are its
    unit-power line-of-sight and scattered components and `pathloss` the
    per-user linear gain, so that
    h_k = sqrt(PL_k) (sqrt(kappa/(1+kappa)) los_k + sqrt(1/(1+kappa)) scatter_k).
    """
    h: np.ndarray
    theta: float
    alpha: complex
    los: np.ndarray
    scatter: np.ndarray
    pathloss: np.ndarray


@dataclass(frozen=True)
class BeamformerAction:
    """Complex N x K precoder, column k carrying user k's stream."""
    w: np.ndarray

    @property
    def power(self):
        return float(np.sum(np.abs(self.w) ** 2))


def steering_vector(n_antennas, theta):
    """ULA response, element n = exp(j pi n sin(theta))."""
    n = np.arange(n_antennas)
    return np.exp(1j * np.pi * n * np.sin(theta))


def steering_derivative(n_antennas, theta):
    """d a / d theta, element n = j pi n cos(theta) exp(j pi n sin(theta))."""
    n = np.arange(n_antennas)
    return 1j * np.pi * n * np.cos(theta) * steering_vector(n_antennas, theta)


def draw_scatter(rng, n_users, n_antennas):
    """i.i.d. circular complex Gaussian entries of unit variance."""
    re = rng.standard_normal((n_users, n_antennas))
    im = rng.standard_normal((n_users, n_antennas))
    return (re + 1j * im) / np.sqrt(2)


def _compose(los, scatter, pathloss, rician_k):
    if np.isinf(rician_k):
        los_w, nlos_w = 1.0, 0.0
    else:
        los_w = np.sqrt(rician_k / (1 + rician_k))
        nlos_w = np.sqrt(1 / (1 + rician_k))
    return np.sqrt(pathloss)[:, None] * (los_w * los + nlos_w * scatter)


def sample_channels(config, rng):
    """Draw a fresh channel state for the start of an episode.

    Draw order on `rng`: the K LoS angles, uniform in (-60, 60) degrees,
    then the scattered component via `draw_scatter`.
    """
    n, k = config.n_antennas, config.n_users
    los_angles = rng.uniform(-np.pi / 3, np.pi / 3, size=k)
    los = np.stack([steering_vector(n, phi) for phi in los_angles])
    scatter = draw_scatter(rng, k, n)
    pathloss = np.asarray(config.user_distances_m, dtype=float) ** (-config.pathloss_exponent)
    h = _compose(los, scatter, pathloss, config.rician_k)
    return ChannelState(h=h,
                        theta=float(np.deg2rad(config.target_angle_deg)),
                        alpha=complex(config.target_gain),
                        los=los,
                        scatter=scatter,
                        pathloss=pathloss)


def evolve_channels(state, config, rng):
    """Gauss-Markov step on the scattered part; LoS, theta and alpha stay."""
    rho = config.channel_corr
    if rho == 1.0:
        return state
    innovation = draw_scatter(rng, *state.scatter.shape)
    scatter = rho * state.scatter + np.sqrt(1 - rho ** 2) * innovation
    h = _compose(state.los, scatter, state.pathloss, config.rician_k)
    return ChannelState(h=h, theta=state.theta, alpha=state.alpha,
                        los=state.los, scatter=scatter, pathloss=state.pathloss)


def project_power(w, p_max):
    """Scale `w` onto the Frobenius ball of radius sqrt(p_max).

    Directions are preserved; matrices already inside the ball, including
    the all-zero matrix, pass through unchanged.
    """
    assert p_max > 0, "power budget must be positive"
    w = np.asarray(w, dtype=complex)
    norm = np.linalg.norm(w)
    if norm == 0:
        return BeamformerAction(w=w.copy())
    scale = min(1.0, np.sqrt(p_max) / norm)
    return BeamformerAction(w=w * scale)


def per_user_rates(channels, action, noise_power):
    """log2(1 + SINR_k) for every user."""
    assert noise_power > 0, "noise power must be positive"
    # gains[k, j] = |h_k^H w_j|^2
    gains = np.abs(channels.h.conj() @ action.w) ** 2
    signal = np.diag(gains)
    interference = gains.sum(axis=1) - signal
    return np.log2(1 + signal / (interference + noise_power))


def sum_rate(channels, action, noise_power):
    return float(np.sum(per_user_rates(channels, action, noise_power)))


def crb_angle(channels, action, config):
    """Cramer-Rao bound on the target angle, in rad^2.

    Monostatic echo alpha A(theta) W s(l) with A = a a^T, L unit-power
    snapshots and (theta, Re alpha, Im alpha) unknown.
    """
    n = config.n_antennas
    a = steering_vector(n, channels.theta)
    da = steering_derivative(n, channels.theta)
    big_a = np.outer(a, a)
    big_da = np.outer(da, a) + np.outer(a, da)
    r_w = action.w @ action.w.conj().T

    illumination = np.trace(big_a @ r_w @ big_a.conj().T).real
    if illumination <= ILLUMINATION_EPS:
        raise UnobservableTargetError(
            "tr(A R_W A^H) = {:.3e} <= {:.0e}".format(illumination, ILLUMINATION_EPS))
    direct = np.trace(big_da @ r_w @ big_da.conj().T).real
    cross = np.trace(big_da @ r_w @ big_a.conj().T)
    info = direct - abs(cross) ** 2 / illumination
    fisher = FISHER_FACTOR * abs(channels.alpha) ** 2 * config.snapshots * info
    if not fisher > 0:
        raise UnobservableTargetError("angle Fisher information {:.3e} is not positive"
                                      .format(fisher))
    return float(config.noise_power / fisher)


def mrt_beamformer(channels, p_max):
    """Maximum ratio transmission with an equal power split over users."""
    h = channels.h
    n_users = h.shape[0]
    directions = h / np.linalg.norm(h, axis=1, keepdims=True)
    return BeamformerAction(w=np.sqrt(p_max / n_users) * directions.T)


def steered_beamformer(n_antennas, n_users, theta, p_max):
    """Rank-one beam toward `theta`, every stream on the same direction."""
    direction = steering_vector(n_antennas, theta).conj() / np.sqrt(n_antennas)
    w = np.tile(direction[:, None], (1, n_users)) * np.sqrt(p_max / n_users)
    return BeamformerAction(w=w)
