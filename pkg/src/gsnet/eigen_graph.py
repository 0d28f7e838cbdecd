"""Eigen-Graph construction: Euclidean kNN, structure tensors, eigenvalue kNN.

Neighbor rows never contain the anchor itself and are ordered by ascending
distance with ties broken by ascending index, so every result is a
deterministic function of the input coordinates.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError
from ._knn import knn_rows
from .geometry import as_cloud

DENSE_LIMIT = 4096
# Values within this distance below zero are treated as rounding noise.
CLAMP_TOL = 1e-10
SYMMETRY_TOL = 1e-10
# 1 - |r| below this marks a (near) repeated root of the characteristic cubic.
DISCRIMINANT_TOL = 1e-12
# Relative eigenvalue gap below which analytic eigenvectors are not trusted.
VECTOR_GAP_TOL = 1e-5


@dataclass(frozen=True)
class NeighborGraph:
    euclid_idx: np.ndarray
    eigen_idx: np.ndarray

    @property
    def k1(self):
        return self.euclid_idx.shape[1]

    @property
    def k2(self):
        return self.eigen_idx.shape[1]

    def __len__(self):
        return self.euclid_idx.shape[0]


@dataclass(frozen=True)
class EigenDescriptorSet:
    lambdas: np.ndarray
    vectors: Optional[np.ndarray] = None

    def __len__(self):
        return self.lambdas.shape[0]


def _check_k(k, n, name="k"):
    if int(k) != k or not 1 <= k <= n - 1:
        raise InvalidArgumentError(f"{name}={k} must satisfy 1 <= {name} <= N-1 (N={n})")
    return int(k)


def knn_euclidean(cloud, k):
    pts = as_cloud(cloud)
    k = _check_k(k, pts.shape[0])
    return knn_rows(pts, k)


def _check_index_rows(idx, n):
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != n:
        raise InvalidArgumentError(f"index rows must have shape ({n}, k), got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidArgumentError(f"neighbor index out of range [0, {n})")
    return idx


def structure_tensors(cloud, euclid_idx):
    """Per-point ``C_i = M_i M_i^T`` with columns ``x_{i_j} - x_i``; shape (N, 3, 3)."""
    pts = as_cloud(cloud)
    idx = _check_index_rows(euclid_idx, pts.shape[0])
    m = pts[idx] - pts[:, None, :]
    return np.einsum("nki,nkj->nij", m, m)


def _sym3_eigvals_analytic(a):
    """Trigonometric roots of the trace-shifted characteristic cubic.

    Returns descending eigenvalues and a mask of inputs whose roots are
    (nearly) repeated, where the closed form loses accuracy.
    """
    a00, a11, a22 = a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]
    a01, a02, a12 = a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]
    q = (a00 + a11 + a22) / 3.0
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    flat = p == 0.0
    ps = np.where(flat, 1.0, p)
    b00, b11, b22 = b00 / ps, b11 / ps, b22 / ps
    c01, c02, c12 = a01 / ps, a02 / ps, a12 / ps
    det = (b00 * (b11 * b22 - c12 * c12)
           - c01 * (c01 * b22 - c12 * c02)
           + c02 * (c01 * c12 - b11 * c02))
    r = np.clip(det / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    lam = np.stack([l1, l2, l3], axis=1)
    lam[flat] = q[flat, None]
    degenerate = flat | (1.0 - np.abs(r) < DISCRIMINANT_TOL)
    return lam, degenerate


def _unit_null_vector(a, lam):
    """Unit vector spanning the null space of ``a - lam I`` via row cross products."""
    shifted = a - lam[:, None, None] * np.eye(3)
    r0, r1, r2 = shifted[:, 0], shifted[:, 1], shifted[:, 2]
    cands = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], axis=1)
    norms = np.linalg.norm(cands, axis=2)
    best = np.argmax(norms, axis=1)
    rows = np.arange(a.shape[0])
    v = cands[rows, best]
    return v / norms[rows, best][:, None]


def _jacobi_sym3(a, max_sweeps=50):
    """Cyclic Jacobi on a batch of symmetric 3x3 matrices; descending order."""
    a = a.copy()
    n = a.shape[0]
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.maximum(np.max(np.abs(a), axis=(1, 2)), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        if np.all(off <= (1e-17 * scale) ** 2):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            # Huge theta overflows theta**2 to inf, which correctly gives t = 0.
            with np.errstate(over="ignore"):
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            rot[:, p, p] = c
            rot[:, q, q] = c
            rot[:, p, q] = s
            rot[:, q, p] = -s
            a = np.swapaxes(rot, 1, 2) @ a @ rot
            v = v @ rot
    lam = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return lam, v


def _clamp_small_negative(lam):
    near = (lam < 0.0) & (lam >= -CLAMP_TOL)
    lam[near] = 0.0
    return lam


def eig_sym3_batch(tensors, vectors=False):
    """Eigen-decompose a stack of symmetric 3x3 matrices.

    Returns ``(lambdas, vecs)`` with lambdas of shape (N, 3) sorted descending
    and ``vecs`` (N, 3, 3) holding eigenvectors as columns, or ``None`` when
    ``vectors`` is false.
    """
    a = np.asarray(tensors, dtype=np.float64)
    if a.ndim != 3 or a.shape[1:] != (3, 3):
        raise InvalidArgumentError(f"expected (N, 3, 3) tensors, got {a.shape}")
    asym = np.abs(a - np.swapaxes(a, 1, 2))
    if a.size and asym.max() > SYMMETRY_TOL:
        raise InvalidArgumentError(
            f"matrix is not symmetric: max |C - C^T| = {asym.max():.3g} > {SYMMETRY_TOL}")
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    lam, fallback = _sym3_eigvals_analytic(a)
    vecs = None
    if vectors:
        spread = np.maximum(np.abs(lam).max(axis=1), 1e-300)
        gaps = np.minimum(lam[:, 0] - lam[:, 1], lam[:, 1] - lam[:, 2])
        fallback = fallback | (gaps < VECTOR_GAP_TOL * spread)
        vecs = np.empty_like(a)
        ok = ~fallback
        if np.any(ok):
            v1 = _unit_null_vector(a[ok], lam[ok, 0])
            v3 = _unit_null_vector(a[ok], lam[ok, 2])
            # Re-orthogonalize v3 against v1 before completing the frame.
            v3 = v3 - np.einsum("ij,ij->i", v3, v1)[:, None] * v1
            v3 /= np.linalg.norm(v3, axis=1, keepdims=True)
            v2 = np.cross(v3, v1)
            vecs[ok] = np.stack([v1, v2, v3], axis=2)
    if np.any(fallback):
        jl, jv = _jacobi_sym3(a[fallback])
        lam[fallback] = jl
        if vectors:
            vecs[fallback] = jv
    return _clamp_small_negative(lam), vecs


def eig_sym3(c, vectors=True):
    """Eigenvalues (descending) and column eigenvectors of one symmetric 3x3 matrix."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (3, 3):
        raise InvalidArgumentError(f"expected a 3x3 matrix, got {c.shape}")
    lam, vecs = eig_sym3_batch(c[None], vectors=vectors)
    return lam[0], (vecs[0] if vectors else None)


def eigen_descriptors(cloud, k1, vectors=False, euclid_idx=None):
    pts = as_cloud(cloud)
    if euclid_idx is None:
        euclid_idx = knn_rows(pts, _check_k(k1, pts.shape[0], "k1"))
    lam, vecs = eig_sym3_batch(structure_tensors(pts, euclid_idx), vectors=vectors)
    return EigenDescriptorSet(lam, vecs)


def eigen_distance(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.sum(d * d)))


def eigen_distance_matrix(lambdas):
    """Dense pairwise eigenvalue-space distances; refused above DENSE_LIMIT points."""
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.shape[0] > DENSE_LIMIT:
        raise InvalidArgumentError(
            f"dense eigen distance matrix refused for N={lam.shape[0]} > {DENSE_LIMIT}")
    diff = lam[:, None, :] - lam[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def knn_eigen(descriptors, k2):
    lam = descriptors.lambdas if isinstance(descriptors, EigenDescriptorSet) else descriptors
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim != 2 or lam.shape[1] != 3:
        raise InvalidArgumentError(f"eigenvalue triples must have shape (N, 3), got {lam.shape}")
    k2 = _check_k(k2, lam.shape[0], "k2")
    return knn_rows(lam, k2)


def build_graph(cloud, k1, k2):
    """Build the Eigen-Graph: Euclidean and eigenvalue-space neighbor rows."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    _check_k(k1, n, "k1")
    _check_k(k2, n, "k2")
    euclid = knn_rows(pts, int(k1))
    desc = eigen_descriptors(pts, k1, euclid_idx=euclid)
    return NeighborGraph(euclid, knn_eigen(desc, k2)), desc
