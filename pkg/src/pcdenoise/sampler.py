"""Reverse sampling steps and the patch-wise iterative denoising driver."""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, NumericalError
from .geometry import NeighborIndex, as_points, denormalize, extract_patches, normalize_unit_sphere, stitch_patches
from .schedule import (
    AdaptiveSchedule,
    adaptive_schedule,
    estimate_noise_variance,
    linear_schedule,
    match_timestep,
)

__all__ = [
    "SAMPLER_MODES",
    "SamplerConfig",
    "StepCoefficients",
    "step_coefficients",
    "reverse_step",
    "deterministic_step",
    "gdm_reverse_step",
    "fixed_schedule",
    "DenoiseReport",
    "CloudNoise",
    "estimate_noise",
    "denoise",
]

SAMPLER_MODES = ("adaptive", "fixed", "one_step", "gdm")


@dataclass
class SamplerConfig:
    """Options for :func:`denoise`.

    ``alpha``/``alpha_decay``/``fixed_steps`` only apply to ``mode="fixed"``;
    their defaults are arbitrary.
    """

    eta: float = 0.0
    mode: str = "adaptive"
    L: int = 5
    seed: int = 0
    alpha: float = 0.99
    alpha_decay: float = 0.95
    fixed_steps: int = 5
    patch_size: int = 1000
    n_patches: object = "full"
    calibration: str = "chi3"
    normalize: bool = True
    jobs: int = 1
    T: int = 1000
    beta_T: float = 2e-6

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidInput(f"eta must lie in [0, 1], got {self.eta}")
        if self.mode not in SAMPLER_MODES:
            raise InvalidInput(f"mode must be one of {SAMPLER_MODES}, got {self.mode!r}")
        if self.L < 1:
            raise InvalidInput(f"L must be at least 1, got {self.L}")
        if self.jobs < 1:
            raise InvalidInput(f"jobs must be at least 1, got {self.jobs}")


@dataclass(frozen=True)
class StepCoefficients:
    """Coefficients of one reverse step from ``t`` to ``t_minus_delta``.

    ``m`` multiplies ``x_t`` in the posterior mean and ``mu_coeff = 1 - m``
    multiplies the score.
    """

    t: int
    t_minus_delta: int
    eta: float
    sigma_cap: float
    sigma_eta: float
    m: float
    mu_coeff: float


def step_coefficients(schedule, t, t_minus_delta, eta=0.0):
    """Closed-form variance and score coefficient for a jump of ``t - t_minus_delta``."""
    t = schedule.check_t(t, lo=1)
    s = schedule.check_t(t_minus_delta)
    if s >= t:
        raise InvalidInput(f"t_minus_delta must be < t, got {s} >= {t}")
    if eta < 0:
        raise InvalidInput(f"eta must be non-negative, got {eta}")
    ab_t, ab_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
    om_t, om_s = schedule.one_minus_alpha_bar[t], schedule.one_minus_alpha_bar[s]
    # alpha_bar_s - alpha_bar_t, formed without cancellation
    gap = ab_s * -math.expm1(schedule.log_alpha_bar[t] - schedule.log_alpha_bar[s])
    sigma_cap = schedule.sigma_bar_sq[s] * gap / (om_t * ab_s)
    sigma_eta = eta * sigma_cap
    # 1 - alpha_bar_s * (1 + sigma_eta) == om_s - alpha_bar_s * sigma_eta
    arg = (om_s - ab_s * sigma_eta) * ab_t / (om_t * ab_s)
    if arg < 0:
        raise NumericalError(f"negative argument under sqrt for t={t}, delta={t - s}, eta={eta}")
    m = math.sqrt(arg)
    return StepCoefficients(t, s, float(eta), float(sigma_cap), float(sigma_eta), m, 1.0 - m)


def reverse_step(schedule, x_t, scores, t, t_minus_delta, eta=0.0, rng=None):
    """``x_{t-delta} = x_t + mu_coeff * s + z`` with ``z ~ N(0, sigma_eta I)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != x_t.shape:
        raise InvalidInput(f"scores shape {scores.shape} does not match points {x_t.shape}")
    c = step_coefficients(schedule, t, t_minus_delta, eta)
    out = x_t + c.mu_coeff * scores
    if c.sigma_eta > 0:
        if rng is None:
            raise InvalidInput("an rng is required when eta > 0")
        out = out + math.sqrt(c.sigma_eta) * rng.standard_normal(x_t.shape)
    return out


def deterministic_step(schedule, x_t, scores, t, t_minus_delta):
    """The ``eta = 0`` reverse step written directly in terms of ``alpha_bar``."""
    t = schedule.check_t(t, lo=1)
    s = schedule.check_t(t_minus_delta)
    if s >= t:
        raise InvalidInput(f"t_minus_delta must be < t, got {s} >= {t}")
    ab_t, ab_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
    om_t, om_s = schedule.one_minus_alpha_bar[t], schedule.one_minus_alpha_bar[s]
    coeff = 1.0 - math.sqrt(om_s * ab_t / (om_t * ab_s))
    return np.asarray(x_t, dtype=np.float64) + coeff * np.asarray(scores, dtype=np.float64)


def gdm_reverse_step(schedule, x_t, scores, t, rng=None):
    """Conventional DDPM step, including the ``1/sqrt(alpha_t)`` rescaling.

    With ``rng=None`` only the mean is returned.
    """
    t = schedule.check_t(t, lo=1)
    x_t = np.asarray(x_t, dtype=np.float64)
    beta = schedule.beta[t]
    if beta == 0:
        return x_t.copy()
    alpha = schedule.alpha[t]
    mean = (x_t - beta / math.sqrt(schedule.one_minus_alpha_bar[t]) * np.asarray(scores)) / math.sqrt(alpha)
    if rng is None:
        return mean
    return mean + math.sqrt(beta) * rng.standard_normal(x_t.shape)


def fixed_schedule(alpha=0.99, alpha_decay=0.95, steps=5, schedule=None):
    """Non-adaptive schedule from the geometric sequence ``alpha * alpha_decay**l``.

    The running product of the sequence scales the largest training noise
    variance; each product is matched to its nearest training timestep.
    Repeated timesteps are collapsed.
    """
    if not 0 < alpha <= 1 or not 0 < alpha_decay <= 1:
        raise InvalidInput("alpha and alpha_decay must lie in (0, 1]")
    if steps < 1:
        raise InvalidInput(f"steps must be at least 1, got {steps}")
    schedule = schedule or linear_schedule()
    seq = alpha * alpha_decay ** np.arange(steps)
    levels = schedule.sigma_bar_sq[-1] * np.cumprod(seq)
    taus = [0] + [match_timestep(schedule, lv) for lv in levels]
    out = [0]
    for t in sorted(set(taus)):
        if t > out[-1]:
            out.append(t)
    return AdaptiveSchedule(taus=tuple(out), L=int(steps))


@dataclass
class DenoiseReport:
    """What :func:`denoise` estimated and did."""

    sigma_hat: float
    sigma_bar_sq_raw: float
    tau_hat: int
    taus: tuple
    mode: str
    n_patches: int
    displacements: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_text(self):
        lines = [
            f"sigma_hat = {self.sigma_hat:.9g}",
            f"sigma_bar_sq_raw = {self.sigma_bar_sq_raw:.9g}",
            f"tau_hat = {self.tau_hat}",
            f"mode = {self.mode}",
            f"n_patches = {self.n_patches}",
            "schedule = " + " ".join(str(t) for t in self.taus),
            "mean_displacement = " + " ".join(f"{d:.9g}" for d in self.displacements),
            f"wall_time = {self.wall_time:.3f}",
        ]
        return "\n".join(lines) + "\n"


def _patch_rng(seed, ordinal):
    return np.random.default_rng([int(seed), int(ordinal)])


def _run_patch(schedule, provider, config, steps, x_T, ordinal):
    rng = _patch_rng(config.seed, ordinal)
    x = x_T.copy()
    disp = []
    for t, t_prev in steps:
        s = provider.scores(x, x_T, t, schedule.T)
        if config.mode == "gdm":
            nxt = gdm_reverse_step(schedule, x, s, t, rng)
        else:
            nxt = reverse_step(schedule, x, s, t, t_prev, config.eta, rng)
        disp.append(np.sqrt(((nxt - x) ** 2).sum(axis=1)))
        x = nxt
    return x, disp


@dataclass
class _Prepared:
    work: np.ndarray
    center: np.ndarray
    scale: float
    provider: object
    patches: list
    inputs: list


def _prepare(cloud, provider, config):
    pts = as_points(cloud, "cloud")
    if config.normalize:
        work, center, scale = normalize_unit_sphere(pts)
        provider = provider.in_frame(center, scale)
    else:
        work, center, scale = pts, np.zeros(3), 1.0
    patches = extract_patches(work, config.patch_size, coverage=config.n_patches, index=NeighborIndex(work))
    inputs = []
    for patch in patches:
        x = work[patch.indices]
        if provider.needs_centering:
            x = x - work[patch.center_index]
        inputs.append(x)
    return _Prepared(work, center, scale, provider, patches, inputs)


def _estimate(prep, config, schedule):
    scores = np.concatenate([prep.provider.scores(x, x, schedule.T, schedule.T) for x in prep.inputs])
    est = estimate_noise_variance(scores, config.calibration)
    return est, match_timestep(schedule, est.sigma_bar_sq)


@dataclass(frozen=True)
class CloudNoise:
    """Noise estimate for a whole cloud.

    ``sigma_hat`` is in input units; ``tau_hat`` indexes the training
    schedule, which lives in the normalized frame (input units divided by
    ``scale``).
    """

    sigma_hat: float
    sigma_bar_sq_raw: float
    tau_hat: int
    scale: float


def estimate_noise(cloud, provider, config=None, schedule=None):
    """Estimate the noise level of ``cloud`` and match it to a timestep."""
    config = config or SamplerConfig()
    schedule = schedule or linear_schedule(config.T, config.beta_T)
    prep = _prepare(cloud, provider, config)
    est, tau = _estimate(prep, config, schedule)
    return CloudNoise(est.sigma * prep.scale, est.sigma_bar_sq_raw * prep.scale**2, int(tau), float(prep.scale))


def denoise(cloud, provider, config=None, schedule=None):
    """Estimate the noise level of ``cloud`` and denoise it patch by patch.

    Returns:
        ``(denoised, report)``; ``denoised`` is in the input's coordinates.
    """
    start = time.perf_counter()
    config = config or SamplerConfig()
    schedule = schedule or linear_schedule(config.T, config.beta_T)
    prep = _prepare(cloud, provider, config)
    work, scale, provider = prep.work, prep.scale, prep.provider
    patches, inputs = prep.patches, prep.inputs
    n = work.shape[0]

    if config.mode == "fixed":
        sigma_hat, raw = float("nan"), float("nan")
        sched = fixed_schedule(config.alpha, config.alpha_decay, config.fixed_steps, schedule)
        tau_hat = sched.tau_hat
    else:
        est, tau_hat = _estimate(prep, config, schedule)
        sigma_hat, raw = est.sigma, est.sigma_bar_sq_raw
        if config.mode == "one_step":
            sched = AdaptiveSchedule(taus=(0, tau_hat) if tau_hat > 0 else (0,), L=1)
        elif config.mode == "gdm":
            # single-timestep DDPM chain from tau_hat down to 0
            sched = AdaptiveSchedule(taus=tuple(range(tau_hat + 1)), L=max(tau_hat, 1))
        else:
            sched = adaptive_schedule(schedule, tau_hat, config.L)
    steps = sched.steps()

    def work_fn(item):
        ordinal, x = item
        return _run_patch(schedule, provider, config, steps, x, ordinal)

    if config.jobs > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(work_fn, enumerate(inputs)))
    else:
        results = [work_fn(item) for item in enumerate(inputs)]

    positions = []
    for patch, (x, _) in zip(patches, results):
        if provider.needs_centering:
            x = x + work[patch.center_index]
        positions.append(x)
    out = stitch_patches(n, work, patches, positions)

    displacements = []
    for i in range(len(steps)):
        per_point = np.concatenate([disp[i] for _, disp in results])
        displacements.append(float(per_point.mean()) * scale)

    if config.normalize:
        out = denormalize(out, prep.center, scale)
    report = DenoiseReport(
        sigma_hat=sigma_hat * scale,
        sigma_bar_sq_raw=raw * scale * scale,
        tau_hat=int(tau_hat),
        taus=sched.taus,
        mode=config.mode,
        n_patches=len(patches),
        displacements=displacements,
        wall_time=time.perf_counter() - start,
    )
    return out, report
