"""Training diffusion schedule, noise-level estimation and adaptive schedules.

The forward process adds noise without rescaling the clean cloud,
``x_t = x_0 + sigma_bar_t * z``, with ``sigma_bar_t**2 = (1 - alpha_bar_t) / alpha_bar_t``.
Quantities such as ``1 - alpha_bar_t`` are tiny for the default schedule
(about 2e-9 at t = 1), so they are accumulated in log space with
``log1p``/``expm1`` instead of being formed by subtraction.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .geometry import as_points

__all__ = [
    "DEFAULT_T",
    "DEFAULT_BETA_T",
    "CHI3_CALIBRATION",
    "DiffusionSchedule",
    "linear_schedule",
    "per_step_variance",
    "forward_sample",
    "NoiseEstimate",
    "estimate_noise_variance",
    "match_timestep",
    "AdaptiveSchedule",
    "adaptive_schedule",
    "format_schedule_table",
]

DEFAULT_T = 1000
DEFAULT_BETA_T = 2e-6

# Var(|z|) for z ~ N(0, I_3) is 3 - 8/pi
CHI3_CALIBRATION = 1.0 / (3.0 - 8.0 / math.pi)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Per-timestep schedule arrays indexed by ``t = 0..T``.

    Attributes:
        T: number of diffusion steps.
        beta: ``beta[0] = 0`` and ``beta[t]`` for ``t >= 1``.
        alpha: ``1 - beta``.
        log_alpha_bar: cumulative ``log(alpha)``.
        alpha_bar: cumulative product of ``alpha``.
        one_minus_alpha_bar: ``1 - alpha_bar`` without cancellation.
        sigma_bar_sq: total noise variance ``(1 - alpha_bar) / alpha_bar``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    log_alpha_bar: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray
    sigma_bar_sq: np.ndarray

    @property
    def sigma_bar(self):
        return np.sqrt(self.sigma_bar_sq)

    def check_t(self, t, lo=0):
        if not isinstance(t, (int, np.integer)) or not lo <= t <= self.T:
            raise InvalidInput(f"timestep must be an integer in [{lo}, {self.T}], got {t!r}")
        return int(t)


def _from_beta(beta):
    beta = np.asarray(beta, dtype=np.float64)
    log_ab = np.cumsum(np.log1p(-beta))
    arrays = dict(
        beta=beta,
        alpha=1.0 - beta,
        log_alpha_bar=log_ab,
        alpha_bar=np.exp(log_ab),
        one_minus_alpha_bar=-np.expm1(log_ab),
        sigma_bar_sq=np.expm1(-log_ab),
    )
    for arr in arrays.values():
        arr.setflags(write=False)
    return DiffusionSchedule(T=beta.size - 1, **arrays)


def linear_schedule(T=DEFAULT_T, beta_T=DEFAULT_BETA_T):
    """Linear schedule ``beta_t = beta_T * t / T`` with ``beta_0 = 0``."""
    if int(T) != T or T < 1:
        raise InvalidInput(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_T < 1.0:
        raise InvalidInput(f"beta_T must lie in (0, 1), got {beta_T!r}")
    T = int(T)
    return _from_beta(beta_T * np.arange(T + 1, dtype=np.float64) / T)


def per_step_variance(schedule, t):
    """Variance ``beta_t / alpha_bar_t`` injected between ``t - 1`` and ``t``."""
    t = schedule.check_t(t, lo=1)
    return float(schedule.beta[t] * math.exp(-schedule.log_alpha_bar[t]))


def forward_sample(schedule, x0, t, rng):
    """Draw ``x_t = x_0 + sigma_bar_t * z`` with ``z ~ N(0, I)``."""
    t = schedule.check_t(t)
    x0 = as_points(x0, "x0")
    z = rng.standard_normal(x0.shape)
    return x0 + math.sqrt(schedule.sigma_bar_sq[t]) * z


@dataclass(frozen=True)
class NoiseEstimate:
    """Noise variance read off the spread of predicted score norms."""

    sigma_bar_sq_raw: float
    sigma_bar_sq: float
    calibration: float

    @property
    def sigma(self):
        return math.sqrt(self.sigma_bar_sq)


def estimate_noise_variance(scores, calibration="chi3"):
    """Estimate the total noise variance from per-point score vectors.

    The raw estimate is the population variance of the score norms. In
    ``"chi3"`` mode it is divided by ``3 - 8/pi``, the variance of the norm
    of a standard 3-D Gaussian, which makes it unbiased for isotropic noise.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1, 3)
    if s.shape[0] < 2:
        raise InvalidInput("need at least 2 score vectors to estimate a variance")
    if calibration == "raw":
        factor = 1.0
    elif calibration == "chi3":
        factor = CHI3_CALIBRATION
    else:
        raise InvalidInput(f"unknown calibration mode {calibration!r}")
    raw = float(np.var(np.sqrt(np.einsum("ij,ij->i", s, s))))
    return NoiseEstimate(sigma_bar_sq_raw=raw, sigma_bar_sq=raw * factor, calibration=factor)


def match_timestep(schedule, sigma_bar_sq):
    """Linear search for the timestep whose noise variance is closest.

    Ties resolve to the smaller timestep.
    """
    if not sigma_bar_sq >= 0:
        raise InvalidInput(f"sigma_bar_sq must be non-negative, got {sigma_bar_sq!r}")
    return int(np.argmin(np.abs(schedule.sigma_bar_sq - sigma_bar_sq)))


@dataclass(frozen=True)
class AdaptiveSchedule:
    """Increasing timesteps ``0 = taus[0] < ... < taus[-1]`` to walk down."""

    taus: tuple
    L: int

    @property
    def tau_hat(self):
        return self.taus[-1]

    def steps(self):
        """``(t, t_prev)`` pairs in the order they are applied."""
        return [(self.taus[i], self.taus[i - 1]) for i in range(len(self.taus) - 1, 0, -1)]

    def __len__(self):
        return len(self.taus) - 1


def _collapse(taus, L):
    out = [0]
    for t in sorted(set(int(t) for t in taus)):
        if t > out[-1]:
            out.append(t)
    return AdaptiveSchedule(taus=tuple(out), L=L)


def adaptive_schedule(schedule, tau_hat, L=5):
    """Split ``[0, tau_hat]`` into ``L`` equal steps aligned to integer timesteps.

    Each interpolated step ``l * tau_hat / L`` is replaced by the nearest
    training timestep (half rounds up); repeats are dropped, so small
    ``tau_hat`` may yield fewer than ``L`` iterations.
    """
    tau_hat = schedule.check_t(tau_hat)
    if int(L) != L or L < 1:
        raise InvalidInput(f"L must be a positive integer, got {L!r}")
    L = int(L)
    candidates = [math.floor(l * tau_hat / L + 0.5) for l in range(L + 1)]
    return _collapse(candidates, L)


def format_schedule_table(schedule, taus=None):
    """Plain-text table ``t beta alpha_bar sigma_bar_sq``, one timestep per line."""
    rows = range(schedule.T + 1) if taus is None else taus
    lines = ["# t beta alpha_bar sigma_bar_sq"]
    for t in rows:
        lines.append(
            f"{t} {schedule.beta[t]:.12e} {schedule.alpha_bar[t]:.17g} {schedule.sigma_bar_sq[t]:.12e}"
        )
    return "\n".join(lines) + "\n"
