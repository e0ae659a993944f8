"""Chamfer distance and analytic point-to-surface distance."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInput, Unsupported
from .geometry import NeighborIndex, as_points

__all__ = ["chamfer", "point_to_surface", "surface_distances", "EvalReport"]


def _nn_sq(src, dst):
    idx = NeighborIndex(dst).nearest(src)
    d = src - dst[idx]
    return (d * d).sum(axis=1)


def chamfer(a, b):
    """Symmetric Chamfer distance with squared nearest-neighbour distances.

    ``mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2``.
    """
    a = as_points(a, "a")
    b = as_points(b, "b")
    return float(_nn_sq(a, b).mean() + _nn_sq(b, a).mean())


def _square_dist(xy, z, h):
    """Distance from points to the square ``[-h, h]^2`` lying in a z-plane."""
    out = np.clip(np.abs(xy) - h, 0.0, None)
    return np.sqrt((out**2).sum(axis=1) + z**2)


def surface_distances(points, shape):
    """Per-point unsigned distance to the analytic surface of ``shape``."""
    p = as_points(points)
    kind = shape.kind
    if kind == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - shape.radius)
    if kind == "plane":
        return _square_dist(p[:, :2], p[:, 2], shape.half_size)
    if kind == "two_planes":
        g = 0.5 * shape.gap
        return np.minimum(
            _square_dist(p[:, :2], p[:, 2] - g, shape.half_size),
            _square_dist(p[:, :2], p[:, 2] + g, shape.half_size),
        )
    if kind == "torus":
        ring = np.hypot(p[:, 0], p[:, 1]) - shape.R
        return np.abs(np.hypot(ring, p[:, 2]) - shape.r)
    if kind == "cube":
        h = shape.half_size
        q = np.abs(p) - h
        outside = np.linalg.norm(np.clip(q, 0.0, None), axis=1)
        inside = -q.max(axis=1)
        return np.where(q.max(axis=1) > 0, outside, inside)
    raise Unsupported(f"no closed-form distance for shape kind {kind!r}")


def point_to_surface(cloud, shape):
    """Mean absolute distance of ``cloud`` to the analytic surface."""
    return float(surface_distances(cloud, shape).mean())


@dataclass
class EvalReport:
    """Evaluation summary; ``nan`` marks fields that were not measured."""

    chamfer: float
    p2s_mean: float = float("nan")
    sigma_estimated: float = float("nan")
    tau_hat: float = float("nan")
    wall_time: float = float("nan")

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is not None and v < 0:
                raise InvalidInput(f"{k} must be non-negative, got {v}")

    FIELDS = ("chamfer", "p2s_mean", "sigma_estimated", "tau_hat", "wall_time")

    def csv_header(self):
        return ",".join(self.FIELDS)

    def csv_row(self):
        return ",".join(f"{getattr(self, f):.12g}" for f in self.FIELDS)

    def to_csv(self):
        return self.csv_header() + "\n" + self.csv_row() + "\n"

    def to_table(self):
        width = max(len(f) for f in self.FIELDS)
        return "\n".join(f"{f:<{width}}  {getattr(self, f):.6g}" for f in self.FIELDS) + "\n"
