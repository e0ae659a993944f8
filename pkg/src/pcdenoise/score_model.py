"""Score providers: the nearest-clean-point oracle and the learned network.

A provider maps the current cloud ``x_t`` (and the original noisy cloud
``x_T``) to one score vector per point, pointing toward the underlying
surface. The network follows the feature-extraction, feature-fusion,
gradient-prediction and gradient-fusion pipeline at a small width.
"""

import abc
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import InvalidInput
from .geometry import NeighborIndex, as_points
from .nn import MLP, Linear, ModelParams, ResidualBlock, load_checkpoint, save_checkpoint
from .nn.tensor import (
    Tensor,
    concat,
    gather,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
)

__all__ = [
    "ScoreProvider",
    "OracleScore",
    "DisplacementOracle",
    "NetworkConfig",
    "ScoreNetwork",
    "NetworkScore",
    "fuse_gradients",
    "positional_encoding",
    "timestep_embedding",
    "FUSION_MODES",
    "GRAD_FUSION_MODES",
]

FUSION_MODES = ("fused", "F_T", "F_t", "F_mean")
GRAD_FUSION_MODES = ("weighted", "const", "k1")


class ScoreProvider(abc.ABC):
    """Produces per-point score vectors for a cloud.

    ``needs_centering`` tells the sampler whether patches should be shifted
    to their center point before scoring.
    """

    needs_centering = False

    @abc.abstractmethod
    def scores(self, current, original, t, T):
        """Score vectors ``(n, 3)`` for ``current`` given ``original``."""

    def in_frame(self, center, scale):
        """Provider acting on coordinates ``(x - center) / scale``."""
        return self


class OracleScore(ScoreProvider):
    """Displacement from each point to its nearest clean reference point."""

    def __init__(self, clean):
        self.index = NeighborIndex(clean)

    @property
    def clean(self):
        return self.index.points

    def scores(self, current, original=None, t=None, T=None):
        x = as_points(current, "current")
        return self.clean[self.index.nearest(x)] - x

    def in_frame(self, center, scale):
        return OracleScore((self.clean - np.asarray(center)) / scale)


class DisplacementOracle(ScoreProvider):
    """Exact noise displacement ``x_0[i] - x[i]`` for index-aligned clouds.

    This is the score of the Gaussian perturbation kernel itself; unlike
    :class:`OracleScore` it keeps the tangential part of the noise.

    Pass the ``noisy`` cloud as well to score arbitrary subsets (patches):
    each row is then identified by its position in ``original``.
    """

    def __init__(self, clean, noisy=None):
        self.clean = as_points(clean, "clean")
        self.noisy = None if noisy is None else as_points(noisy, "noisy")
        if self.noisy is not None and self.noisy.shape != self.clean.shape:
            raise InvalidInput("clean and noisy clouds must be index-aligned")
        self._index = None if noisy is None else NeighborIndex(self.noisy)

    def scores(self, current, original=None, t=None, T=None):
        x = as_points(current, "current")
        if self._index is not None:
            ref = x if original is None else as_points(original, "original")
            if ref.shape != x.shape:
                raise InvalidInput(f"original {ref.shape} does not match current {x.shape}")
            return self.clean[self._index.nearest(ref)] - x
        if x.shape != self.clean.shape:
            raise InvalidInput(f"expected {self.clean.shape[0]} points aligned with the clean cloud, got {x.shape[0]}")
        return self.clean - x

    def in_frame(self, center, scale):
        center = np.asarray(center)
        noisy = None if self.noisy is None else (self.noisy - center) / scale
        return DisplacementOracle((self.clean - center) / scale, noisy)


def positional_encoding(points, n_freqs=4):
    """Raw coordinates plus ``sin``/``cos`` at ``2**j * pi`` for each axis."""
    p = np.asarray(points, dtype=np.float64)
    parts = [p]
    for j in range(n_freqs):
        w = (2.0**j) * math.pi
        parts.append(np.sin(w * p))
        parts.append(np.cos(w * p))
    return np.concatenate(parts, axis=1)


def timestep_embedding(t, T, n_freqs=4):
    """``sin``/``cos`` features of the relative timestep ``t / T``."""
    r = t / T
    out = []
    for j in range(n_freqs):
        w = (2.0**j) * math.pi
        out.extend([math.sin(w * r), math.cos(w * r)])
    return np.array(out)


def _dense_knn(feats, k):
    """Row-wise k nearest rows of ``feats`` (self included), ties by index."""
    sq = np.einsum("ij,ij->i", feats, feats)
    d2 = sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T
    np.fill_diagonal(d2, -np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def fuse_gradients(gs, ws, mode="weighted"):
    """Combine ``k`` candidate gradients per point into one.

    Args:
        gs: ``(n, k, 3)`` candidates, ordered nearest neighbour first.
        ws: ``(n, k)`` importance logits.
        mode: ``"weighted"`` (softmax over ``ws``), ``"const"`` (plain
            mean) or ``"k1"`` (nearest candidate only).

    Returns:
        ``(n, 3)`` tensor.
    """
    gs = gs if isinstance(gs, Tensor) else Tensor(np.asarray(gs, dtype=np.float64))
    n, k = gs.shape[0], gs.shape[1]
    if mode == "weighted":
        ws = ws if isinstance(ws, Tensor) else Tensor(np.asarray(ws, dtype=np.float64))
        weights = reshape(softmax(ws), (n, k, 1))
        return reduce_sum(mul(gs, weights), axis=1)
    if mode == "const":
        return reduce_mean(gs, axis=1)
    if mode == "k1":
        return gather(reshape(gs, (n * k, 3)), np.arange(n) * k)
    raise InvalidInput(f"unknown gradient fusion mode {mode!r}")


@dataclass
class NetworkConfig:
    """Hyperparameters of :class:`ScoreNetwork`.

    Positional encoding uses ``3 + 6 * pe_freqs`` dims and the timestep
    embedding ``2 * t_freqs`` dims.
    """

    width: int = 32
    graph_layers: int = 3
    graph_k: int = 16
    fusion_k: int = 32
    residual_blocks: int = 4
    pe_freqs: int = 4
    t_freqs: int = 4
    fusion_mode: str = "fused"
    grad_fusion_mode: str = "weighted"
    head_gain: float = 0.1
    rescale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise InvalidInput(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.grad_fusion_mode not in GRAD_FUSION_MODES:
            raise InvalidInput(
                f"grad_fusion_mode must be one of {GRAD_FUSION_MODES}, got {self.grad_fusion_mode!r}"
            )
        for name in ("width", "graph_layers", "graph_k", "fusion_k", "residual_blocks"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ScoreNetwork:
    """Desk-scale score network operating on centred patches."""

    def __init__(self, config=None, params=None):
        self.config = config = config or NetworkConfig()
        rng = np.random.default_rng(config.seed)
        d = config.width
        self.params = ModelParams()
        p = self.params
        self.edge_convs = [Linear(p, "fe.conv0", 6, d, rng)]
        for i in range(1, config.graph_layers):
            self.edge_convs.append(Linear(p, f"fe.conv{i}", 2 * d, d, rng))
        self.fe_out = Linear(p, "fe.out", config.graph_layers * d, d, rng)

        enc = 3 + 6 * config.pe_freqs + 2 * config.t_freqs
        self.mlp_e = MLP(p, "ff.e", (enc, d, d, d), rng)
        self.mlp_wt = MLP(p, "ff.wt", (2 * d, d, d, d), rng)
        self.mlp_wT = MLP(p, "ff.wT", (2 * d, d, d, d), rng)
        self.mlp_out = MLP(p, "ff.out", (d, d, d, d), rng)

        self.gp_in = Linear(p, "gp.in", 3 + d, d, rng)
        self.gp_blocks = [ResidualBlock(p, f"gp.res{i}", d, rng) for i in range(config.residual_blocks)]
        # scores live on the noise scale (~1e-2), so start the head near zero
        self.gp_g = Linear(p, "gp.g", d, 3, rng, gain=config.head_gain)
        self.gp_w = Linear(p, "gp.w", d, 1, rng)

        if params is not None:
            self.params.load_state(params.state() if isinstance(params, ModelParams) else params)

    # feature extraction

    def edge_conv(self, layer, feats):
        """One edge-convolution layer over the feature-space kNN graph."""
        f = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=np.float64))
        n = f.shape[0]
        k = self.config.graph_k
        idx = _dense_knn(f.data, k)
        centre = gather(f, np.repeat(np.arange(n), k))
        nbr = gather(f, idx.reshape(-1))
        edge = concat([centre, nbr - centre], axis=-1)
        h = relu(self.edge_convs[layer](edge))
        return reduce_max(reshape(h, (n, k, self.config.width)), axis=1)

    def extract_features(self, points):
        """Per-point features ``(n, width)`` of a cloud."""
        pts = as_points(points)
        if pts.shape[0] < self.config.graph_k:
            raise InvalidInput(f"need at least graph_k={self.config.graph_k} points, got {pts.shape[0]}")
        f = Tensor(pts)
        outs = []
        for layer in range(self.config.graph_layers):
            f = self.edge_conv(layer, f)
            outs.append(f)
        return self.fe_out(concat(outs, axis=-1))

    # feature fusion

    def fuse_features(self, x_t, t, T, feat_t, feat_T, mode=None):
        """Blend features of the current and original clouds into ``(n, width)``."""
        mode = mode or self.config.fusion_mode
        if mode == "F_T":
            return self.mlp_out(feat_T)
        if mode == "F_t":
            return self.mlp_out(feat_t)
        if feat_t.shape != feat_T.shape:
            raise InvalidInput(f"feature shapes differ: {feat_t.shape} vs {feat_T.shape}")
        if mode == "F_mean":
            return self.mlp_out(mul(feat_t + feat_T, 0.5))
        if mode != "fused":
            raise InvalidInput(f"unknown fusion mode {mode!r}")
        x_t = np.asarray(x_t, dtype=np.float64)
        n = x_t.shape[0]
        if feat_t.shape[0] != n:
            raise InvalidInput(f"{feat_t.shape[0]} features for {n} points")
        temb = np.broadcast_to(timestep_embedding(t, T, self.config.t_freqs), (n, 2 * self.config.t_freqs))
        e = self.mlp_e(Tensor(np.concatenate([positional_encoding(x_t, self.config.pe_freqs), temb], axis=1)))
        e_t = self.mlp_wt(concat([feat_t, e], axis=-1))
        e_T = self.mlp_wT(concat([feat_T, e], axis=-1))
        return self.mlp_out(mul(feat_t, e_t) + mul(feat_T, e_T))

    # gradient prediction

    def predict_gradient(self, rel, feats):
        """Gradient candidates and importance logits.

        Args:
            rel: ``(m, 3)`` relative coordinates ``v - x_i``.
            feats: ``(m, width)`` features of the supporting points ``x_i``.

        Returns:
            ``(g, w)`` tensors of shapes ``(m, 3)`` and ``(m, 1)``.
        """
        rel = rel if isinstance(rel, Tensor) else Tensor(np.asarray(rel, dtype=np.float64))
        h = self.gp_in(concat([rel, feats], axis=-1))
        for block in self.gp_blocks:
            h = block(h)
        h = relu(h)
        return self.gp_g(h), self.gp_w(h)

    # full forward

    def forward(self, x_t, x_T, t, T):
        """Predicted scores ``(n, 3)`` for the centred patch ``x_t``."""
        cfg = self.config
        x_t = as_points(x_t, "x_t")
        x_T = as_points(x_T, "x_T")
        n = x_t.shape[0]
        if x_T.shape != x_t.shape:
            raise InvalidInput(f"x_t and x_T must be index-aligned, got {x_t.shape} and {x_T.shape}")
        k = 1 if cfg.grad_fusion_mode == "k1" else cfg.fusion_k
        if n < max(k, cfg.graph_k):
            raise InvalidInput(f"patch of {n} points is smaller than k={max(k, cfg.graph_k)}")

        # work at unit patch radius; scores scale back linearly
        r = float(np.sqrt((x_T**2).sum(axis=1).mean())) if cfg.rescale else 1.0
        if not r > 0:
            r = 1.0
        if r != 1.0:
            x_t = x_t / r
            x_T = x_T / r

        mode = cfg.fusion_mode
        feat_t = None if mode == "F_T" else self.extract_features(x_t)
        if mode == "F_t":
            feat_T = None
        elif mode == "F_T" or x_T is x_t or np.array_equal(x_T, x_t):
            feat_T = feat_t if feat_t is not None else self.extract_features(x_T)
        else:
            feat_T = self.extract_features(x_T)
        F = self.fuse_features(x_t, t, T, feat_t, feat_T)

        idx = _dense_knn(x_t, k)
        rel = (x_t[:, None, :] - x_t[idx]).reshape(n * k, 3)
        g, w = self.predict_gradient(rel, gather(F, idx.reshape(-1)))
        out = fuse_gradients(reshape(g, (n, k, 3)), reshape(w, (n, k)), cfg.grad_fusion_mode)
        return mul(out, r) if r != 1.0 else out

    def save(self, path):
        save_checkpoint(path, self.params, {"network": self.config.to_dict(), "step": self.params.step})

    @classmethod
    def load(cls, path):
        state, hyper = load_checkpoint(path)
        net = cls(NetworkConfig.from_dict(hyper.get("network", {})), params=state)
        net.params.step = int(hyper.get("step", 0))
        return net


class NetworkScore(ScoreProvider):
    """Score provider backed by a :class:`ScoreNetwork`."""

    needs_centering = True

    def __init__(self, network):
        self.network = network

    @classmethod
    def from_checkpoint(cls, path):
        return cls(ScoreNetwork.load(path))

    def scores(self, current, original, t, T):
        return self.network.forward(current, original, t, T).data
