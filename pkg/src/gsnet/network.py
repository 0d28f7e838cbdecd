"""GSC layers, hierarchical encoder, classification and segmentation heads.

The network is expressed over :class:`~gsnet.autodiff.Tape` so the same code
serves inference and training. Geometry (neighbor rows, sample selections,
eigenvalues, interpolation weights) is precomputed per cloud by
:func:`prepare_levels` and treated as constant.
"""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import ParamStore, Tape
from .eigen_graph import EigenDescriptorSet, NeighborGraph, build_graph
from .errors import InvalidArgumentError, InvalidDataError
from .geometry import as_cloud
from .sampling import fps, plan_interpolation, stride_sample

RECIPES = {
    "x": 3,
    "lambda": 3,
    "dx": 3,
    "dx+x": 6,
    "dx+x+dlambda+lambda": 12,
    "dx+x+dlambda+lambda+d": 13,
    "dlambda+lambda": 6,
}
DEFAULT_RECIPE = "dx+x+dlambda+lambda+d"
EIGEN_RECIPE = "dlambda+lambda"
BRANCHES = ("EU", "EI", "EU+EI")
CHECKPOINT_FORMAT = "gsnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GscConfig:
    k1: int = 20
    k2: int = 20
    level_sizes: tuple = (1024, 512, 256)
    level_widths: tuple = (64, 128, 256)
    mlp_depth: int = 1
    branches: str = "EU+EI"
    recipe: str = DEFAULT_RECIPE
    fps: bool = True
    fc_widths: tuple = (128,)
    dropout: float = 0.5
    num_classes: int = 5
    num_categories: int = 0
    num_parts: int = 0
    seg_widths: tuple = (64,)

    def __post_init__(self):
        for name in ("level_sizes", "level_widths", "fc_widths", "seg_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.branches not in BRANCHES:
            raise InvalidArgumentError(f"branches must be one of {BRANCHES}, got {self.branches!r}")
        if self.recipe not in RECIPES:
            raise InvalidArgumentError(f"unknown input recipe {self.recipe!r}; known: {sorted(RECIPES)}")
        if len(self.level_sizes) != len(self.level_widths) or not self.level_sizes:
            raise InvalidArgumentError("level_sizes and level_widths must be non-empty and equal length")
        if any(w <= 0 for w in self.level_widths + self.fc_widths + self.seg_widths):
            raise InvalidArgumentError("all layer widths must be positive")
        if self.branches == "EU+EI" and any(w % 2 for w in self.level_widths):
            raise InvalidArgumentError("two-branch levels need even widths (each branch gets half)")
        if list(self.level_sizes) != sorted(self.level_sizes, reverse=True):
            raise InvalidArgumentError("level sizes must be non-increasing")
        if self.k1 < 1 or self.k2 < 1 or self.mlp_depth < 1:
            raise InvalidArgumentError("k1, k2 and mlp_depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 1:
            raise InvalidArgumentError("num_classes must be >= 1")

    @property
    def branch_list(self):
        return self.branches.split("+")

    @property
    def branch_width(self):
        return [w // len(self.branch_list) for w in self.level_widths]

    @property
    def pooled_width(self):
        return sum(2 * w for w in self.level_widths)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes):
        return GscConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class Level:
    """Constant geometry of one encoder level for one cloud (or a stacked batch)."""

    points: np.ndarray
    euclid_idx: np.ndarray
    eigen_idx: np.ndarray
    lambdas: np.ndarray
    selection: np.ndarray  # rows of the previous level (or of the raw cloud for level 1)
    interp_idx: np.ndarray = field(default=None)
    interp_w: np.ndarray = field(default=None)

    @property
    def graph(self):
        return NeighborGraph(self.euclid_idx, self.eigen_idx)


def _downsample(points, m, use_fps):
    if use_fps:
        return fps(points, m, seed_index=0).indices
    return stride_sample(points.shape[0], m).indices


def prepare_levels(cloud, config, interpolation=False):
    """Per-level sampling and Eigen-Graphs for one cloud."""
    pts = as_cloud(cloud)
    levels = []
    current = pts
    for number, size in enumerate(config.level_sizes, start=1):
        if current.shape[0] < size:
            raise InvalidArgumentError(
                f"level {number} needs {size} points but only {current.shape[0]} are available")
        if current.shape[0] > size:
            sel = _downsample(current, size, config.fps)
        else:
            sel = np.arange(size, dtype=np.intp)
        level_pts = current[sel]
        for name, k in (("k1", config.k1), ("k2", config.k2)):
            if k > size - 1:
                raise InvalidArgumentError(
                    f"level {number}: {name}={k} must be <= N-1 (N={size})")
        graph, desc = build_graph(level_pts, config.k1, config.k2)
        levels.append(Level(level_pts, graph.euclid_idx, graph.eigen_idx, desc.lambdas, sel))
        current = level_pts
    if interpolation:
        base = levels[0].points
        for level in levels:
            if level is levels[0] or level.points.shape[0] < 3:
                level.interp_idx = np.repeat(np.arange(base.shape[0])[:, None], 3, axis=1)
                level.interp_w = np.tile([1.0, 0.0, 0.0], (base.shape[0], 1))
            else:
                plan = plan_interpolation(base, level.points)
                level.interp_idx, level.interp_w = plan.indices, plan.weights
    return levels


def stack_levels(per_cloud):
    """Stack per-cloud level lists into batched :class:`Level` objects."""
    out = []
    for parts in zip(*per_cloud):
        kwargs = {}
        for f in fields(Level):
            vals = [getattr(p, f.name) for p in parts]
            kwargs[f.name] = None if vals[0] is None else np.stack(vals)
        out.append(Level(**kwargs))
    return out


def _batch_rows(arr, idx):
    """``arr`` (B, N, C), ``idx`` (B, N, k) -> (B, N, k, C)."""
    b = arr.shape[0]
    return arr[np.arange(b)[:, None, None], idx]


def recipe_edges(points, lambdas, idx, recipe):
    """Level-1 edge rows over neighbor rows ``idx``; batched (B, N, ...) inputs."""
    if recipe not in RECIPES:
        raise InvalidArgumentError(f"unknown input recipe {recipe!r}; known: {sorted(RECIPES)}")
    xj = _batch_rows(points, idx)
    lj = _batch_rows(lambdas, idx)
    dx = xj - points[:, :, None, :]
    dl = lj - lambdas[:, :, None, :]
    parts = {
        "x": [xj],
        "lambda": [lj],
        "dx": [dx],
        "dx+x": [dx, xj],
        "dx+x+dlambda+lambda": [dx, xj, dl, lj],
        "dx+x+dlambda+lambda+d": [dx, xj, dl, lj, np.linalg.norm(dx, axis=-1, keepdims=True)],
        "dlambda+lambda": [dl, lj],
    }[recipe]
    return np.concatenate(parts, axis=-1)


def input_recipe(cloud, descriptors, graph, recipe=DEFAULT_RECIPE):
    """Level-1 edge blocks: ``{"EU": (N, k1, C_recipe), "EI": (N, k2, 6)}``."""
    pts = as_cloud(cloud)[None]
    lam = np.asarray(descriptors.lambdas, dtype=np.float64)[None]
    if lam.shape[1] != pts.shape[1] or len(graph) != pts.shape[1]:
        raise InvalidArgumentError("descriptors and graph must be built from the given cloud")
    return {
        "EU": recipe_edges(pts, lam, graph.euclid_idx[None], recipe)[0],
        "EI": recipe_edges(pts, lam, graph.eigen_idx[None], EIGEN_RECIPE)[0],
    }


def group_features(features, idx):
    """Edge rows ``(f_j - f_i, f_j)`` for every anchor i and neighbor j: (N, k, 2C)."""
    f = np.asarray(features, dtype=np.float64)
    idx = np.asarray(idx)
    if idx.shape[0] != f.shape[0] or (idx.size and (idx.min() < 0 or idx.max() >= f.shape[0])):
        raise InvalidArgumentError("index rows are not valid for these features")
    fj = f[idx]
    return np.concatenate([fj - f[:, None, :], fj], axis=-1)


# -- parameters -------------------------------------------------------------------


def _level_input_width(config, level_no, branch):
    if level_no == 1:
        return RECIPES[config.recipe] if branch == "EU" else RECIPES[EIGEN_RECIPE]
    return 2 * config.level_widths[level_no - 2]


def param_shapes(config, task="classification"):
    shapes = {}
    for l, width in enumerate(config.branch_width, start=1):
        for branch in config.branch_list:
            fan_in = _level_input_width(config, l, branch)
            for j in range(config.mlp_depth):
                shapes[f"level{l}.{branch}.{j}.weight"] = (fan_in, width)
                shapes[f"level{l}.{branch}.{j}.bias"] = (width,)
                fan_in = width
    if task == "classification":
        fan_in = config.pooled_width
        for j, width in enumerate(config.fc_widths):
            shapes[f"head.fc{j}.weight"] = (fan_in, width)
            shapes[f"head.fc{j}.bias"] = (width,)
            fan_in = width
        shapes["head.out.weight"] = (fan_in, config.num_classes)
        shapes["head.out.bias"] = (config.num_classes,)
    elif task == "segmentation":
        if config.num_parts < 1:
            raise InvalidArgumentError("segmentation needs num_parts >= 1")
        fan_in = sum(config.level_widths) + config.num_categories
        for j, width in enumerate(config.seg_widths):
            shapes[f"seg.fc{j}.weight"] = (fan_in, width)
            shapes[f"seg.fc{j}.bias"] = (width,)
            fan_in = width
        shapes["seg.out.weight"] = (fan_in, config.num_parts)
        shapes["seg.out.bias"] = (config.num_parts,)
    else:
        raise InvalidArgumentError(f"unknown task {task!r}")
    return shapes


def init_params(config, seed=0, task="classification"):
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(config, task).items():
        if name.endswith(".weight"):
            store.add(name, rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape))
        else:
            store.add(name, np.zeros(shape))
    return store


# -- forward on the tape -------------------------------------------------------------


def _dense(tape, store, prefix, x, relu=True):
    h = tape.bias_add(tape.linear(x, tape.param(store, prefix + ".weight")),
                      tape.param(store, prefix + ".bias"))
    return tape.relu(h) if relu else h


def _branch(tape, store, config, prefix, source):
    """Per-edge MLP followed by max-pool over the neighbor axis.

    ``source`` is ``("edges", array)`` for precomputed level-1 edge rows or
    ``("group", node, idx)`` to group a feature node along neighbor rows.
    The last layer's bias and ReLU are applied after pooling; both commute
    with the max over neighbors, so the result is unchanged.
    """
    depth = config.mlp_depth
    last = f"{prefix}.{depth - 1}"
    if source[0] == "edges":
        h = tape.constant(source[1])
        if depth == 1:
            h = tape.max_pool(tape.linear(h, tape.param(store, last + ".weight")), axis=2)
        else:
            h = _dense(tape, store, f"{prefix}.0", h)
    else:
        _, feats, idx = source
        w = tape.param(store, f"{prefix}.0.weight")
        if depth == 1:
            h = tape.edge_linear_max(feats, idx, w)
        else:
            h = tape.edge_linear(feats, idx, w)
            h = tape.relu(tape.bias_add(h, tape.param(store, f"{prefix}.0.bias")))
    if depth > 1:
        for j in range(1, depth - 1):
            h = _dense(tape, store, f"{prefix}.{j}", h)
        h = tape.max_pool(tape.linear(h, tape.param(store, last + ".weight")), axis=2)
    return tape.relu(tape.bias_add(h, tape.param(store, last + ".bias")))


def gsc_level(tape, store, config, level_no, level, features=None):
    """One GSC module. ``features`` is None at level 1 (edge rows come from the recipe)."""
    outs = []
    for branch in config.branch_list:
        idx = level.euclid_idx if branch == "EU" else level.eigen_idx
        if features is None:
            recipe = config.recipe if branch == "EU" else EIGEN_RECIPE
            source = ("edges", recipe_edges(level.points, level.lambdas, idx, recipe))
        else:
            source = ("group", features, idx)
        outs.append(_branch(tape, store, config, f"level{level_no}.{branch}", source))
    return outs[0] if len(outs) == 1 else tape.concat(outs, axis=-1)


def encode(tape, store, config, levels):
    """Hierarchical encoder over batched levels; returns one feature node per level."""
    feats = []
    prev = None
    for number, level in enumerate(levels, start=1):
        if prev is not None and level.selection.shape[1] != prev.value.shape[1]:
            prev = tape.gather(prev, level.selection)
        prev = gsc_level(tape, store, config, number, level, prev)
        feats.append(prev)
    return feats


def classify_logits(tape, store, config, level_feats, train=False, seed=0):
    pooled = []
    for f in level_feats:
        pooled.append(tape.max_pool(f, axis=1))
        pooled.append(tape.mean_pool(f, axis=1))
    h = tape.concat(pooled, axis=-1)
    for j in range(len(config.fc_widths)):
        h = _dense(tape, store, f"head.fc{j}", h)
        if train and config.dropout > 0:
            h = tape.dropout(h, config.dropout, (seed, j))
    return _dense(tape, store, "head.out", h, relu=False)


def segment_logits(tape, store, config, levels, level_feats, onehot):
    onehot = np.asarray(onehot, dtype=np.float64)
    batch, n1 = level_feats[0].value.shape[:2]
    if onehot.shape != (batch, config.num_categories):
        raise InvalidArgumentError(
            f"one-hot label must have length {config.num_categories}, got shape {onehot.shape}")
    cols = [level_feats[0]]
    for level, f in zip(levels[1:], level_feats[1:]):
        cols.append(tape.weighted_gather(f, level.interp_idx, level.interp_w))
    if config.num_categories:
        cols.append(tape.constant(np.repeat(onehot[:, None, :], n1, axis=1)))
    h = tape.concat(cols, axis=-1)
    for j in range(len(config.seg_widths)):
        h = _dense(tape, store, f"seg.fc{j}", h)
    return _dense(tape, store, "seg.out", h, relu=False)


# -- numpy-level API ----------------------------------------------------------------


def gsc_forward(features, graph, store, config, level_no=2, points=None, lambdas=None):
    """Run one GSC level on a single cloud and return (N, C_out) features.

    For ``level_no == 1`` pass ``points`` and ``lambdas`` instead of
    ``features``; the configured input recipe builds the edge rows.
    """
    n = len(graph)
    if features is None:
        if points is None or lambdas is None:
            raise InvalidArgumentError("level-1 GSC needs points and lambdas")
        feats_node = None
        pts, lam = as_cloud(points)[None], np.asarray(lambdas, dtype=np.float64)[None]
    else:
        f = np.asarray(features, dtype=np.float64)
        expected = _level_input_width(config, level_no, config.branch_list[0]) // 2
        if f.ndim != 2 or f.shape[0] != n or f.shape[1] != expected:
            raise InvalidArgumentError(
                f"level {level_no} expects features of shape ({n}, {expected}), got {f.shape}")
        pts = lam = None
    level = Level(pts, graph.euclid_idx[None], graph.eigen_idx[None], lam, None)
    tape = Tape()
    if features is not None:
        feats_node = tape.constant(f[None])
    try:
        out = gsc_level(tape, store, config, level_no, level, feats_node)
    except KeyError as exc:
        raise InvalidArgumentError(f"missing parameter {exc.args[0]!r} for level {level_no}") from None
    return out.value[0]


def encoder_forward(cloud, config, store):
    """Per-level ``(points, features)`` pairs for one cloud."""
    levels = prepare_levels(cloud, config)
    tape = Tape()
    feats = encode(tape, store, config, stack_levels([levels]))
    return [(lv.points, f.value[0]) for lv, f in zip(levels, feats)]


def classify_head(level_outputs, store, config, train=False, seed=0):
    if not level_outputs:
        raise InvalidArgumentError("classification head needs at least one level")
    tape = Tape()
    feats = [tape.constant(np.asarray(f)[None]) for _, f in level_outputs]
    return classify_logits(tape, store, config, feats, train, seed).value[0]


def segment_head(level_outputs, onehot, store, config):
    """Per-point part logits at the level-1 points of ``level_outputs``."""
    base = level_outputs[0][0]
    onehot = np.asarray(onehot, dtype=np.float64).reshape(1, -1)
    levels = []
    for pts, _ in level_outputs:
        if pts is base or len(pts) < 3:
            idx = np.repeat(np.arange(len(base))[:, None], 3, axis=1)
            w = np.tile([1.0, 0.0, 0.0], (len(base), 1))
        else:
            plan = plan_interpolation(base, pts)
            idx, w = plan.indices, plan.weights
        levels.append(Level(None, None, None, None, None, idx[None], w[None]))
    tape = Tape()
    feats = [tape.constant(np.asarray(f)[None]) for _, f in level_outputs]
    return segment_logits(tape, store, config, levels, feats, onehot).value[0]


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, store, config, task="classification", extra=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "task": task,
        "config": config.to_dict(),
        "params": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                   for name, arr in store.items()},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Return ``(config, store, task)``; every parameter is shape-checked against the config."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidDataError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidDataError(f"{path}: unsupported checkpoint format/version")
    config = GscConfig.from_dict(doc["config"])
    task = doc.get("task", "classification")
    expected = param_shapes(config, task)
    params = doc["params"]
    missing = sorted(set(expected) - set(params))
    if missing:
        raise InvalidDataError(f"{path}: missing parameter {missing[0]!r}")
    store = ParamStore()
    for name, entry in params.items():
        if name not in expected:
            raise InvalidDataError(f"{path}: unexpected parameter {name!r}")
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if shape != expected[name] or data.size != int(np.prod(shape)):
            raise InvalidDataError(
                f"{path}: parameter {name!r} has shape {shape}, config requires {expected[name]}")
        store.add(name, data.reshape(shape))
    return config, store, task
