"""Point-cloud containers, exact nearest-neighbour queries, and patching.

Point clouds are plain ``(n, 3)`` float64 arrays. Every routine here breaks
distance ties by the lowest point index, so results are deterministic and
can be compared exactly against brute-force scans.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import CoverageError, InvalidInput

__all__ = [
    "as_points",
    "normalize_unit_sphere",
    "denormalize",
    "NeighborIndex",
    "knn",
    "farthest_point_sample",
    "Patch",
    "extract_patches",
    "stitch_patches",
]


def as_points(points, name="points"):
    """Validate and return ``points`` as a contiguous ``(n, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInput(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise InvalidInput(f"{name} must contain at least one point")
    if not np.isfinite(arr).all():
        raise InvalidInput(f"{name} contains non-finite coordinates")
    return arr


def normalize_unit_sphere(points):
    """Translate the centroid to the origin and scale the max radius to 1.

    Returns:
        (normalized, center, scale) with ``points == normalized * scale + center``.
        When all points coincide the scale is 1.
    """
    pts = as_points(points)
    center = pts.mean(axis=0)
    shifted = pts - center
    radius = np.sqrt((shifted**2).sum(axis=1)).max()
    scale = float(radius) if radius > 0 else 1.0
    return shifted / scale, center, scale


def denormalize(points, center, scale):
    """Invert :func:`normalize_unit_sphere`."""
    return np.asarray(points, dtype=np.float64) * scale + np.asarray(center)


def _sq_dist(points, query):
    d = points - query
    return np.einsum("ij,ij->i", d, d)


class NeighborIndex:
    """Exact k-nearest-neighbour index over a fixed point set.

    Candidates come from a KD-tree; the final ordering is recomputed from
    exact squared distances and sorted by ``(distance, index)``.
    """

    # extra candidates fetched so ties at the k-th neighbour are usually
    # resolved without a brute-force fallback
    _SLACK = 4

    def __init__(self, points):
        self.points = as_points(points)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def query(self, point, k):
        """Indices of the ``k`` nearest points to a single 3-vector."""
        q = np.asarray(point, dtype=np.float64).reshape(1, 3)
        return self.query_many(q, k)[0]

    def query_many(self, queries, k):
        """Row-wise :meth:`query` for an ``(m, 3)`` array; returns ``(m, k)``."""
        n = len(self)
        k = int(k)
        if k < 1 or k > n:
            raise InvalidInput(f"k must be in [1, {n}], got {k}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = queries.shape[0]
        if m == 0:
            return np.empty((0, k), dtype=np.int64)
        kc = min(n, k + self._SLACK)
        _, cand = self._tree.query(queries, k=kc)
        cand = np.asarray(cand, dtype=np.int64).reshape(m, kc)
        diff = self.points[cand] - queries[:, None, :]
        d2 = np.einsum("mkj,mkj->mk", diff, diff)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        out = cand[:, :k].copy()
        if kc < n:
            # rows where the k-th distance is tied with the last candidate may
            # be missing a lower-index point at the same distance
            unsure = d2[:, k - 1] >= d2[:, -1]
            for row in np.flatnonzero(unsure):
                out[row] = self._brute(queries[row], k)
        return out

    def nearest(self, queries):
        """Index of the single nearest point for each query row."""
        return self.query_many(queries, 1)[:, 0]

    def _brute(self, q, k):
        d2 = _sq_dist(self.points, q)
        order = np.lexsort((np.arange(d2.size), d2))
        return order[:k]


def knn(index, query, k):
    """``k`` nearest neighbours of ``query``, ascending by distance."""
    return index.query(query, k)


def _fps_order(points, seed_index):
    """Yield farthest-point-sampling picks one at a time."""
    n = points.shape[0]
    picked = int(seed_index)
    mind = np.full(n, np.inf)
    for _ in range(n):
        yield picked
        mind = np.minimum(mind, _sq_dist(points, points[picked]))
        # np.argmax returns the first maximum, i.e. the lowest index
        picked = int(np.argmax(mind))


def farthest_point_sample(points, m, seed_index=0):
    """Greedy farthest point sampling.

    Args:
        points: ``(n, 3)`` array.
        m: number of indices to return, ``1 <= m <= n``.
        seed_index: first pick.

    Returns:
        ``(m,)`` int array of picked indices in pick order.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise InvalidInput(f"m must be in [1, {n}], got {m}")
    if not 0 <= seed_index < n:
        raise InvalidInput(f"seed_index {seed_index} out of range for {n} points")
    out = np.empty(m, dtype=np.int64)
    for i, idx in zip(range(m), _fps_order(pts, seed_index)):
        out[i] = idx
    return out


@dataclass(frozen=True)
class Patch:
    """A subset of a parent cloud around one center point.

    ``indices`` are ordered by distance to the center, so ``indices[0]`` is
    the center itself and ``mask`` flags the leading ``mask_size`` entries.
    """

    indices: np.ndarray
    center_index: int
    mask: np.ndarray

    def __len__(self):
        return self.indices.shape[0]


def _make_patch(index, center, patch_size, mask_size):
    idx = index.query(index.points[center], patch_size)
    mask = np.zeros(idx.shape[0], dtype=bool)
    mask[: min(mask_size, idx.shape[0])] = True
    idx.setflags(write=False)
    mask.setflags(write=False)
    return Patch(indices=idx, center_index=int(center), mask=mask)


def extract_patches(points, patch_size, coverage="full", mask_size=None, seed_index=0, index=None):
    """Cover a cloud with overlapping kNN patches centred on FPS picks.

    Args:
        points: ``(n, 3)`` array.
        patch_size: points per patch; clipped to ``n``.
        coverage: ``"full"`` picks the smallest FPS prefix whose patches cover
            every point; an integer forces that many patches.
        mask_size: size of the highlighted region (defaults to ``patch_size``).
        seed_index: first FPS pick.
        index: optional prebuilt :class:`NeighborIndex` over ``points``.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if patch_size < 1:
        raise InvalidInput(f"patch_size must be positive, got {patch_size}")
    patch_size = min(int(patch_size), n)
    mask_size = patch_size if mask_size is None else int(mask_size)
    index = NeighborIndex(pts) if index is None else index

    if coverage == "full":
        limit = None
    else:
        limit = int(coverage)
        if not 1 <= limit <= n:
            raise InvalidInput(f"patch count must be in [1, {n}], got {coverage}")

    patches = []
    covered = np.zeros(n, dtype=bool)
    for center in _fps_order(pts, seed_index):
        patch = _make_patch(index, center, patch_size, mask_size)
        patches.append(patch)
        covered[patch.indices] = True
        if limit is None and covered.all():
            break
        if limit is not None and len(patches) == limit:
            break
    return patches


def stitch_patches(n, original, patches, positions):
    """Assemble per-patch results into one cloud.

    Each point takes its position from the patch whose center, measured in
    the ``original`` cloud, is nearest to it; ties go to the earlier patch.

    Args:
        n: number of points in the parent cloud.
        original: ``(n, 3)`` positions used to measure center distances.
        patches: sequence of :class:`Patch`.
        positions: per-patch ``(len(patch), 3)`` arrays, aligned with
            ``patch.indices``.
    """
    original = as_points(original, "original")
    if original.shape[0] != n:
        raise InvalidInput(f"original has {original.shape[0]} points, expected {n}")
    out = np.empty((n, 3))
    best = np.full(n, np.inf)
    for patch, pos in zip(patches, positions):
        pos = np.asarray(pos, dtype=np.float64)
        if pos.shape != (len(patch), 3):
            raise InvalidInput(f"patch positions have shape {pos.shape}, expected {(len(patch), 3)}")
        d = _sq_dist(original[patch.indices], original[patch.center_index])
        better = d < best[patch.indices]
        tgt = patch.indices[better]
        best[tgt] = d[better]
        out[tgt] = pos[better]
    missing = np.flatnonzero(~np.isfinite(best))
    if missing.size:
        raise CoverageError(f"{missing.size} point(s) not covered by any patch, first index {missing[0]}")
    return out
