"""Brute-force nearest-neighbor kernels with (distance, index) ordering."""

import numpy as np


def sq_dists(a, b):
    # Accumulated per coordinate, left to right: ((dx^2 + dy^2) + dz^2).
    out = (a[:, None, 0] - b[None, :, 0]) ** 2
    for c in range(1, a.shape[1]):
        out += (a[:, None, c] - b[None, :, c]) ** 2
    return out


def smallest_k(d2, k):
    """Column indices of the k smallest entries per row, ordered by (value, index)."""
    rows = d2.shape[0]
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
    below = d2 < kth
    at = d2 == kth
    need = k - below.sum(axis=1, keepdims=True)
    # Among entries tied with the k-th value, keep the lowest indices.
    chosen = below | (at & (np.cumsum(at, axis=1) <= need))
    cols = np.nonzero(chosen)[1].reshape(rows, k)
    vals = np.take_along_axis(d2, cols, axis=1)
    order = np.argsort(vals, axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1)


def knn_rows(space, k):
    """Brute-force kNN over rows of ``space`` (N, D), self excluded."""
    n = space.shape[0]
    out = np.empty((n, k), dtype=np.intp)
    block = max(1, min(n, (1 << 22) // max(1, n * space.shape[1])))
    for start in range(0, n, block):
        stop = min(n, start + block)
        d2 = sq_dists(space[start:stop], space)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = smallest_k(d2, k)
    return out
