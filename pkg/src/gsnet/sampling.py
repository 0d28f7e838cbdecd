"""Farthest-point sampling and 3-NN inverse-distance feature interpolation."""

from dataclasses import dataclass

import numpy as np

from ._knn import smallest_k, sq_dists
from .errors import InvalidArgumentError
from .geometry import as_cloud

COINCIDENT_DIST = 1e-10


@dataclass(frozen=True)
class SampleSelection:
    indices: np.ndarray
    seed_index: int

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class InterpolationPlan:
    indices: np.ndarray  # (M, 3) source rows per target
    weights: np.ndarray  # (M, 3), rows sum to 1

    def __len__(self):
        return self.indices.shape[0]


def _check_m(m, n):
    if int(m) != m or not 1 <= m <= n:
        raise InvalidArgumentError(f"sample size m={m} must satisfy 1 <= m <= N (N={n})")
    return int(m)


def fps(cloud, m, seed_index=0, random_start=None):
    """Greedy farthest-point sampling.

    Each new index maximizes the minimum squared distance to the points already
    chosen; ties go to the lowest index. ``random_start`` (an integer seed)
    replaces ``seed_index`` with a seeded uniform draw.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    m = _check_m(m, n)
    if random_start is not None:
        seed_index = int(np.random.default_rng(random_start).integers(n))
    if int(seed_index) != seed_index or not 0 <= seed_index < n:
        raise InvalidArgumentError(f"seed_index={seed_index} out of range [0, {n})")
    seed_index = int(seed_index)
    out = np.empty(m, dtype=np.intp)
    out[0] = seed_index
    diff = pts - pts[seed_index]
    mind = np.einsum("ij,ij->i", diff, diff)
    mind[seed_index] = -1.0
    for step in range(1, m):
        nxt = int(np.argmax(mind))
        out[step] = nxt
        diff = pts - pts[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
        mind[nxt] = -1.0
    return SampleSelection(out, seed_index)


def stride_sample(n, m):
    """Every floor(n/m)-th index; the sampler used when FPS is switched off."""
    m = _check_m(m, n)
    return SampleSelection(np.arange(m, dtype=np.intp) * (n // m), 0)


def covering_radius(cloud, indices):
    """Largest distance from any point to its nearest selected point."""
    pts = as_cloud(cloud)
    d2 = sq_dists(pts, pts[np.asarray(indices)])
    return float(np.sqrt(d2.min(axis=1).max()))


def gather(rows, selection):
    arr = np.asarray(rows)
    idx = np.asarray(selection.indices if isinstance(selection, SampleSelection) else selection)
    if idx.size and (idx.min() < 0 or idx.max() >= arr.shape[0]):
        raise InvalidArgumentError(f"selection index out of range [0, {arr.shape[0]})")
    return arr[idx]


def plan_interpolation(targets, sources, power=2.0):
    tgt = as_cloud(targets)
    src = as_cloud(sources)
    if src.shape[0] < 3:
        raise InvalidArgumentError(f"interpolation needs >= 3 source points, got {src.shape[0]}")
    idx = np.empty((tgt.shape[0], 3), dtype=np.intp)
    dist = np.empty((tgt.shape[0], 3))
    block = max(1, (1 << 22) // src.shape[0])
    for start in range(0, tgt.shape[0], block):
        d2 = sq_dists(tgt[start:start + block], src)
        near = smallest_k(d2, 3)
        idx[start:start + block] = near
        dist[start:start + block] = np.sqrt(np.take_along_axis(d2, near, axis=1))
    inv = np.maximum(dist, COINCIDENT_DIST) ** (-power)
    weights = inv / inv.sum(axis=1, keepdims=True)
    hit = dist[:, 0] < COINCIDENT_DIST
    weights[hit] = (1.0, 0.0, 0.0)
    return InterpolationPlan(idx, weights)


def interpolate(plan, source_features):
    feats = np.asarray(source_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] == 0:
        raise InvalidArgumentError(f"source features must be (M, C) with C > 0, got {feats.shape}")
    if plan.indices.max() >= feats.shape[0]:
        raise InvalidArgumentError("interpolation plan references rows beyond the source features")
    return np.einsum("mk,mkc->mc", plan.weights, feats[plan.indices])
