"""Independent brute-force reference implementations used as test oracles.

Everything here is written with plain Python loops (or mpmath) and shares no
code with the package beyond the public data layout.
"""

import math

import mpmath
import numpy as np


def knn_loop(space, k):
    """Exhaustive scan: sort by (squared distance, index), self excluded."""
    space = [tuple(map(float, p)) for p in np.asarray(space)]
    rows = []
    for i, a in enumerate(space):
        cands = []
        for j, b in enumerate(space):
            if j != i:
                cands.append((sum((x - y) ** 2 for x, y in zip(a, b)), j))
        cands.sort()
        rows.append([j for _, j in cands[:k]])
    return np.array(rows, dtype=int)


def fps_loop(points, m, seed_index=0):
    """Greedy selection keeping each point's squared distance to the chosen set."""
    pts = [tuple(map(float, p)) for p in np.asarray(points)]
    chosen = [seed_index]
    mind = [math.inf] * len(pts)
    while len(chosen) < m:
        last = pts[chosen[-1]]
        best, best_d = None, -1.0
        for j, p in enumerate(pts):
            mind[j] = min(mind[j], sum((x - y) ** 2 for x, y in zip(p, last)))
            if j not in chosen and mind[j] > best_d:
                best, best_d = j, mind[j]
        chosen.append(best)
    return chosen


def interp_weights_loop(targets, sources):
    """Three nearest sources and inverse-square weights, one target at a time."""
    idx, wts = [], []
    for t in np.asarray(targets):
        d = sorted((math.dist(t, s) ** 2, j) for j, s in enumerate(np.asarray(sources)))[:3]
        dist = [math.sqrt(d2) for d2, _ in d]
        if dist[0] < 1e-10:
            w = [1.0, 0.0, 0.0]
        else:
            inv = [1.0 / max(x, 1e-10) ** 2 for x in dist]
            w = [v / sum(inv) for v in inv]
        idx.append([j for _, j in d])
        wts.append(w)
    return np.array(idx), np.array(wts)


def structure_tensor_loop(points, row, anchor):
    c = np.zeros((3, 3))
    for j in row:
        d = np.asarray(points[j], dtype=float) - np.asarray(points[anchor], dtype=float)
        for a in range(3):
            for b in range(3):
                c[a, b] += d[a] * d[b]
    return c


def cubic_roots(c, dps=50):
    """Eigenvalues of a symmetric 3x3 matrix from its characteristic polynomial."""
    mpmath.mp.dps = dps
    m = mpmath.matrix([[mpmath.mpf(float(x)) for x in r] for r in c])
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    minors = (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0] + m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
              + m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
    det = mpmath.det(m)
    roots = mpmath.polyroots([1, -tr, minors, -det], maxsteps=200, extraprec=200)
    return sorted((float(mpmath.re(r)) for r in roots), reverse=True)


def descriptors_loop(points, k1):
    """From-scratch descriptor pipeline: loop kNN, loop tensors, mpmath roots."""
    rows = knn_loop(points, k1)
    lam = []
    for i, row in enumerate(rows):
        roots = cubic_roots(structure_tensor_loop(points, row, i))
        lam.append([0.0 if -1e-10 <= r < 0 else r for r in roots])
    return np.array(lam)


def _mlp_edge(edge, layers):
    h = list(edge)
    for w, b in layers:
        h = [max(0.0, b[o] + sum(h[i] * w[i][o] for i in range(len(h)))) for o in range(len(b))]
    return h


def gsc_loop(edge_rows_by_branch, params_by_branch):
    """Per-edge MLP, max over each anchor's edges, branches concatenated.

    ``edge_rows_by_branch``: list of per-anchor lists of edge vectors.
    ``params_by_branch``: list of ``[(weight, bias), ...]`` per branch.
    """
    n = len(edge_rows_by_branch[0])
    out = []
    for i in range(n):
        row = []
        for edges, layers in zip(edge_rows_by_branch, params_by_branch):
            mapped = [_mlp_edge(e, layers) for e in edges[i]]
            row.extend(max(col) for col in zip(*mapped))
        out.append(row)
    return np.array(out)


def group_loop(features, idx):
    f = np.asarray(features, dtype=float)
    return [[list(f[j] - f[i]) + list(f[j]) for j in row] for i, row in enumerate(idx)]


def recipe_loop(points, lambdas, idx, parts):
    """Level-1 edge rows; ``parts`` names channels among dx, x, dl, l, d."""
    rows = []
    for i, row in enumerate(idx):
        edges = []
        for j in row:
            xi, xj = list(points[i]), list(points[j])
            li, lj = list(lambdas[i]), list(lambdas[j])
            chans = {
                "dx": [a - b for a, b in zip(xj, xi)], "x": xj,
                "dl": [a - b for a, b in zip(lj, li)], "l": lj,
                "d": [math.dist(xi, xj)],
            }
            edges.append([v for p in parts for v in chans[p]])
        rows.append(edges)
    return rows


RECIPE_PARTS = {
    "x": ["x"], "lambda": ["l"], "dx": ["dx"], "dx+x": ["dx", "x"],
    "dx+x+dlambda+lambda": ["dx", "x", "dl", "l"],
    "dx+x+dlambda+lambda+d": ["dx", "x", "dl", "l", "d"],
    "dlambda+lambda": ["dl", "l"],
}


def gsc_level_loop(config, store, level_no, euclid_idx, eigen_idx, features=None,
                   points=None, lambdas=None):
    """One GSC level built edge by edge from the named parameters in ``store``."""
    edges, layers = [], []
    for branch in config.branch_list:
        idx = euclid_idx if branch == "EU" else eigen_idx
        if features is None:
            recipe = config.recipe if branch == "EU" else "dlambda+lambda"
            edges.append(recipe_loop(points, lambdas, idx, RECIPE_PARTS[recipe]))
        else:
            edges.append(group_loop(features, idx))
        prefix = f"level{level_no}.{branch}"
        layers.append([(store[f"{prefix}.{j}.weight"].tolist(), store[f"{prefix}.{j}.bias"].tolist())
                       for j in range(config.mlp_depth)])
    return gsc_loop(edges, layers)
