"""Synthetic clean shapes and noise patterns."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .geometry import as_points

__all__ = [
    "SHAPE_KINDS",
    "NOISE_PATTERNS",
    "ShapeSpec",
    "NoiseSpec",
    "sample_shape",
    "apply_noise",
    "parse_noise",
]

SHAPE_KINDS = ("sphere", "plane", "cube", "torus", "two_planes")
NOISE_PATTERNS = ("gaussian_iso", "laplace", "discrete", "gaussian_aniso", "gaussian_unidir", "uniform")


@dataclass(frozen=True)
class ShapeSpec:
    """An analytic surface and how many points to draw from it.

    Size parameters: ``radius`` (sphere), ``half_size`` (cube half edge and
    plane half width), ``R``/``r`` (torus radii), ``gap`` (two_planes
    separation).
    """

    kind: str = "sphere"
    n: int = 10000
    seed: int = 0
    radius: float = 1.0
    half_size: float = 0.5
    R: float = 1.0
    r: float = 0.3
    gap: float = 0.1

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidInput(f"kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if self.n < 1:
            raise InvalidInput(f"n must be positive, got {self.n}")
        if min(self.radius, self.half_size, self.R, self.r, self.gap) <= 0:
            raise InvalidInput("shape size parameters must be positive")
        if self.kind == "torus" and self.r >= self.R:
            raise InvalidInput("torus needs r < R")


def _sphere(spec, rng):
    p = rng.standard_normal((spec.n, 3))
    return spec.radius * p / np.linalg.norm(p, axis=1, keepdims=True)


def _plane(spec, rng):
    h = spec.half_size
    xy = rng.uniform(-h, h, size=(spec.n, 2))
    return np.column_stack([xy, np.zeros(spec.n)])


def _cube(spec, rng):
    h = spec.half_size
    face = rng.integers(0, 6, size=spec.n)
    uv = rng.uniform(-h, h, size=(spec.n, 2))
    out = np.empty((spec.n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        out[sel, a] = sign[sel] * h
        out[sel, others[0]] = uv[sel, 0]
        out[sel, others[1]] = uv[sel, 1]
    return out


def _torus(spec, rng):
    R, r = spec.R, spec.r
    pts = []
    need = spec.n
    while need > 0:
        m = max(2 * need, 64)
        u = rng.uniform(0, 2 * math.pi, m)
        v = rng.uniform(0, 2 * math.pi, m)
        # area element is proportional to R + r cos(v)
        keep = rng.uniform(0, R + r, m) < R + r * np.cos(v)
        u, v = u[keep][:need], v[keep][:need]
        ring = R + r * np.cos(v)
        pts.append(np.column_stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)]))
        need -= u.size
    return np.concatenate(pts)


def _two_planes(spec, rng):
    p = _plane(spec, rng)
    side = rng.integers(0, 2, size=spec.n)
    p[:, 2] = np.where(side == 0, -0.5 * spec.gap, 0.5 * spec.gap)
    return p


_SAMPLERS = {"sphere": _sphere, "plane": _plane, "cube": _cube, "torus": _torus, "two_planes": _two_planes}


def sample_shape(spec):
    """Uniform-by-area samples on the surface described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    return _SAMPLERS[spec.kind](spec, rng)


@dataclass(frozen=True)
class NoiseSpec:
    """A per-point noise pattern.

    Parameters by pattern: ``sigma`` (gaussian_iso, discrete,
    gaussian_unidir), ``b`` (laplace scale), ``a`` (uniform half width),
    ``cov`` (gaussian_aniso 3x3), ``direction`` (gaussian_unidir),
    ``levels`` (discrete offset count).
    """

    pattern: str = "gaussian_iso"
    sigma: float = 0.0
    b: float = 0.0
    a: float = 0.0
    levels: int = 8
    cov: tuple = field(default=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)))
    direction: tuple = (0.0, 0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in NOISE_PATTERNS:
            raise InvalidInput(f"pattern must be one of {NOISE_PATTERNS}, got {self.pattern!r}")
        if min(self.sigma, self.b, self.a) < 0:
            raise InvalidInput("noise scales must be non-negative")
        if self.levels < 1:
            raise InvalidInput("levels must be positive")
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=0):
            raise InvalidInput("cov must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-15:
            raise InvalidInput("cov must be positive semi-definite")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise InvalidInput("direction must have unit norm")


def _psd_factor(cov):
    w, v = np.linalg.eigh(np.asarray(cov, dtype=np.float64))
    return v * np.sqrt(np.clip(w, 0.0, None))


def apply_noise(cloud, spec):
    """Perturb each point independently according to ``spec``."""
    pts = as_points(cloud, "cloud")
    rng = np.random.default_rng(spec.seed)
    n = pts.shape[0]
    p = spec.pattern
    if p == "gaussian_iso":
        disp = spec.sigma * rng.standard_normal((n, 3))
    elif p == "laplace":
        disp = rng.laplace(0.0, spec.b, size=(n, 3)) if spec.b > 0 else np.zeros((n, 3))
    elif p == "uniform":
        disp = rng.uniform(-spec.a, spec.a, size=(n, 3))
    elif p == "discrete":
        offsets = rng.standard_normal((spec.levels, 3))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        disp = spec.sigma * offsets[rng.integers(0, spec.levels, size=n)]
    elif p == "gaussian_aniso":
        disp = rng.standard_normal((n, 3)) @ _psd_factor(spec.cov).T
    else:
        disp = spec.sigma * rng.standard_normal(n)[:, None] * np.asarray(spec.direction, dtype=np.float64)
    return pts + disp


def parse_noise(text, seed=0):
    """Parse a compact noise description.

    Accepted forms: ``gaussian:S``, ``laplace:B``, ``uniform:A``,
    ``discrete:S`` or ``discrete:LEVELS:S``, ``unidir:X,Y,Z:S`` and
    ``aniso:SX,SY,SZ`` (diagonal standard deviations) or ``aniso:c11,...,c33``.
    """
    parts = text.strip().split(":")
    kind = parts[0].lower()
    try:
        if kind in ("gaussian", "gaussian_iso", "iso") and len(parts) == 2:
            return NoiseSpec("gaussian_iso", sigma=float(parts[1]), seed=seed)
        if kind in ("laplace", "la") and len(parts) == 2:
            return NoiseSpec("laplace", b=float(parts[1]), seed=seed)
        if kind in ("uniform", "uf") and len(parts) == 2:
            return NoiseSpec("uniform", a=float(parts[1]), seed=seed)
        if kind in ("discrete", "dc") and len(parts) in (2, 3):
            levels = int(parts[1]) if len(parts) == 3 else 8
            return NoiseSpec("discrete", sigma=float(parts[-1]), levels=levels, seed=seed)
        if kind in ("unidir", "gaussian_unidir", "ug") and len(parts) == 3:
            d = np.array([float(v) for v in parts[1].split(",")])
            return NoiseSpec("gaussian_unidir", sigma=float(parts[2]), direction=tuple(d / np.linalg.norm(d)), seed=seed)
        if kind in ("aniso", "gaussian_aniso", "ag") and len(parts) == 2:
            vals = [float(v) for v in parts[1].split(",")]
            if len(vals) == 3:
                cov = np.diag(np.square(vals))
            elif len(vals) == 9:
                cov = np.array(vals).reshape(3, 3)
            else:
                raise ValueError
            return NoiseSpec("gaussian_aniso", cov=tuple(map(tuple, cov)), seed=seed)
    except ValueError as exc:
        raise InvalidInput(f"cannot parse noise description {text!r}: {exc}") from exc
    raise InvalidInput(f"cannot parse noise description {text!r}")
