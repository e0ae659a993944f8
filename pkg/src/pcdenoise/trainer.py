"""Patch-wise training of the score network with two-stage sampling."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInput, NumericalError
from .geometry import NeighborIndex, as_points
from .nn import adam_step, grad
from .nn.tensor import Tensor, gather, mul, reduce_mean, reduce_sum
from .sampler import reverse_step
from .schedule import forward_sample, linear_schedule
from .score_model import NetworkConfig, ScoreNetwork

__all__ = [
    "TrainConfig",
    "TrainSample",
    "ground_truth_score",
    "loss_weight",
    "loss",
    "crop_patch",
    "sample_training_step",
    "train",
    "write_loss_csv",
]


@dataclass
class TrainConfig:
    T: int = 1000
    beta_T: float = 2e-6
    patch_size: int = 1000
    K_p: int = 256
    lam: float = 0.99
    lr: float = 1e-4
    iterations: int = 1000
    seed: int = 0
    augment: bool = True
    scale_range: tuple = (0.8, 1.25)
    checkpoint_every: int = 0
    checkpoint_dir: str = None
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInput(f"lambda must lie in [0, 1], got {self.lam}")
        if not 1 <= self.K_p <= self.patch_size:
            raise InvalidInput(f"K_p must lie in [1, patch_size], got {self.K_p}")
        if self.iterations < 0:
            raise InvalidInput("iterations must be non-negative")


@dataclass
class TrainSample:
    """Everything produced by one two-stage sampling pass."""

    x0: np.ndarray
    mask: np.ndarray
    t: int
    delta: int
    x_t: np.ndarray
    pred_t: Tensor
    x_prev: np.ndarray
    pred_prev: Tensor
    truth_t: np.ndarray
    truth_prev: np.ndarray


def ground_truth_score(x, x0):
    """Displacement from each point of ``x`` to its nearest point in ``x0``."""
    x = as_points(x, "x")
    try:
        x0 = as_points(x0, "x0")
    except InvalidInput:
        raise InvalidInput("clean cloud must be a non-empty (n, 3) array") from None
    return x0[NeighborIndex(x0).nearest(x)] - x


def loss_weight(sigma_bar_t, lam):
    if not sigma_bar_t > 0:
        raise InvalidInput(f"sigma_bar_t must be positive, got {sigma_bar_t}")
    return (1.0 - lam) / sigma_bar_t + lam


def loss(pred, truth, sigma_bar_t, lam=0.99, mask=None):
    """Weighted squared score error averaged over (masked) points.

    ``mean_i |w * (pred_i - truth_i)|^2`` with ``w = (1 - lam) / sigma_bar_t + lam``.
    Rows outside ``mask`` are dropped before the reduction, so they receive
    exactly zero gradient.
    """
    w = loss_weight(sigma_bar_t, lam)
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInput(f"pred shape {pred.shape} does not match truth {truth.shape}")
    if mask is not None:
        rows = np.flatnonzero(mask)
        pred = gather(pred, rows)
        truth = truth[rows]
    diff = mul(pred - truth, w)
    return reduce_mean(reduce_sum(mul(diff, diff), axis=1))


def crop_patch(clean, index, patch_size, K_p, rng):
    """Random seed point plus its nearest neighbours, centred on the seed.

    Returns:
        ``(patch, mask)`` where ``mask`` flags the ``K_p`` points nearest the seed.
    """
    n = clean.shape[0]
    if n < patch_size:
        raise InvalidInput(f"cloud of {n} points is smaller than patch_size={patch_size}")
    seed = int(rng.integers(n))
    idx = index.query(clean[seed], patch_size)
    mask = np.zeros(patch_size, dtype=bool)
    mask[:K_p] = True
    return clean[idx] - clean[seed], mask


def _augment(patch, config, rng):
    rot = Rotation.random(random_state=rng).as_matrix()
    scale = rng.uniform(*config.scale_range)
    return scale * patch @ rot.T


def sample_training_step(clean, config, rng, network, schedule=None, index=None):
    """Crop a patch and run both sampling stages.

    Stage one noises the clean patch to ``x_t`` and predicts scores from
    ``x_t`` alone. Stage two moves ``x_t`` with those predictions to
    ``x_{t - delta}`` and predicts again, with ``x_t`` as the original.
    """
    schedule = schedule or linear_schedule(config.T, config.beta_T)
    clean = as_points(clean, "clean")
    index = index or NeighborIndex(clean)
    x0, mask = crop_patch(clean, index, config.patch_size, config.K_p, rng)
    if config.augment:
        x0 = _augment(x0, config, rng)
    t = int(rng.integers(1, schedule.T + 1))
    delta = int(rng.integers(1, t + 1))

    x_t = forward_sample(schedule, x0, t, rng)
    pred_t = network.forward(x_t, x_t, t, schedule.T)
    # stage-two input is treated as data; no gradient flows into stage one
    x_prev = reverse_step(schedule, x_t, pred_t.data, t, t - delta, eta=0.0)
    pred_prev = network.forward(x_prev, x_t, t - delta, schedule.T)
    return TrainSample(
        x0=x0,
        mask=mask,
        t=t,
        delta=delta,
        x_t=x_t,
        pred_t=pred_t,
        x_prev=x_prev,
        pred_prev=pred_prev,
        truth_t=ground_truth_score(x_t, x0),
        truth_prev=ground_truth_score(x_prev, x0),
    )


def sample_loss(sample, schedule, lam):
    """Sum of the masked losses of both stages.

    The stage-two weight uses ``max(t - delta, 1)`` since the weight is
    undefined at zero noise.
    """
    sb = schedule.sigma_bar
    l1 = loss(sample.pred_t, sample.truth_t, sb[sample.t], lam, sample.mask)
    l2 = loss(sample.pred_prev, sample.truth_prev, sb[max(sample.t - sample.delta, 1)], lam, sample.mask)
    return l1 + l2


def train(shapes, config=None, network=None, log=None):
    """Train a score network on clean clouds.

    Args:
        shapes: sequence of clean ``(n, 3)`` clouds.
        config: :class:`TrainConfig`.
        network: optional :class:`ScoreNetwork` to continue training.
        log: optional callable receiving each history row.

    Returns:
        ``(network, history)``; history rows are dicts with keys
        ``iteration, loss, sigma_bar_t, t, delta``.
    """
    config = config or TrainConfig()
    shapes = [as_points(s, "shape") for s in shapes]
    if not shapes:
        raise InvalidInput("need at least one clean cloud")
    schedule = linear_schedule(config.T, config.beta_T)
    network = network or ScoreNetwork(config.network)
    indices = [NeighborIndex(s) for s in shapes]
    rng = np.random.default_rng(config.seed)
    params = list(network.params)
    history = []
    for it in range(1, config.iterations + 1):
        k = int(rng.integers(len(shapes)))
        try:
            sample = sample_training_step(shapes[k], config, rng, network, schedule, indices[k])
            total = sample_loss(sample, schedule, config.lam)
            value = float(total.data)
            if not math.isfinite(value):
                raise NumericalError("non-finite loss")
            grads = grad(total, params)
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        adam_step(network.params, grads, lr=config.lr)
        row = dict(
            iteration=it,
            loss=value,
            sigma_bar_t=float(schedule.sigma_bar[sample.t]),
            t=sample.t,
            delta=sample.delta,
        )
        history.append(row)
        if log is not None:
            log(row)
        if config.checkpoint_every and config.checkpoint_dir and it % config.checkpoint_every == 0:
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            network.save(os.path.join(config.checkpoint_dir, f"ckpt_{it:07d}.bin"))
    return network, history


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "loss", "sigma_bar_t", "t", "delta"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})
