"""Point-cloud files, synthetic labeled datasets, rotation protocols, manifests."""

import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError, InvalidDataError, ParseError
from .geometry import apply_transform, as_cloud, jitter, normalize_unit_sphere, random_rotation

FORMATS = ("xyz", "off", "ply")
SHAPES = ("sphere", "cube", "cylinder", "plane", "torus")
PART_SHAPES = ("hemisphere", "capped-cylinder")
PROTOCOLS = ("none", "z/z", "z/s", "s/s", "0/s")
MANIFEST_VERSION = 1

# Rotation mode applied to (train, test) under each protocol; None = untouched.
_PROTOCOL_AXES = {
    "none": (None, None),
    "z/z": ("z", "z"),
    "z/s": ("z", "euler-xyz"),
    "s/s": ("euler-xyz", "euler-xyz"),
    "0/s": (None, "euler-xyz"),
}

CYLINDER_RADIUS = 0.5
CYLINDER_HEIGHT = 2.0
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35


# -- file formats -------------------------------------------------------------------


def _format_of(path, fmt):
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".")
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise InvalidArgumentError(f"unknown point-cloud format {fmt!r}; expected one of {FORMATS}")
    return fmt


def _parse_floats(tokens, path, lineno, count=None):
    if count is not None and len(tokens) < count:
        raise ParseError(f"expected {count} values, found {len(tokens)}", path, lineno)
    try:
        return [float(t) for t in (tokens if count is None else tokens[:count])]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", path, lineno) from None


def _read_xyz(lines, path):
    pts = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) != 3:
            raise ParseError(f"expected 'x y z', found {len(tokens)} fields", path, lineno)
        pts.append(_parse_floats(tokens, path, lineno))
    return pts


def _content_lines(lines):
    """(line number, tokens) for non-blank, non-comment lines."""
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if tokens and not tokens[0].startswith("#"):
            yield lineno, tokens


def _read_off(lines, path):
    rows = _content_lines(lines)
    try:
        lineno, tokens = next(rows)
    except StopIteration:
        raise ParseError("empty file, expected OFF header", path, 1) from None
    head = tokens[0]
    if not head.startswith("OFF"):
        raise ParseError(f"expected 'OFF' header, found {head!r}", path, lineno)
    # Some corpora glue the counts onto the keyword ("OFF490 518 0").
    counts = ([head[3:]] if len(head) > 3 else []) + tokens[1:]
    if not counts:
        try:
            lineno, counts = next(rows)
        except StopIteration:
            raise ParseError("missing vertex/face counts", path, lineno + 1) from None
    try:
        n_vertices = int(counts[0])
    except ValueError:
        raise ParseError(f"bad vertex count {counts[0]!r}", path, lineno) from None
    pts = []
    for _ in range(n_vertices):
        try:
            lineno, tokens = next(rows)
        except StopIteration:
            raise ParseError(f"file ends after {len(pts)} of {n_vertices} vertices",
                             path, lineno + 1) from None
        pts.append(_parse_floats(tokens, path, lineno, 3))
    return pts


def _read_ply(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("expected 'ply' magic line", path, 1)
    elements = []  # [name, count, [property names]]
    fmt = None
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            fmt = tokens[1] if len(tokens) > 1 else None
            if fmt != "ascii":
                raise ParseError(f"only ASCII PLY is supported, found format {fmt!r}", path, lineno)
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", path, lineno)
            try:
                elements.append([tokens[1], int(tokens[2]), []])
            except ValueError:
                raise ParseError(f"bad element count {tokens[2]!r}", path, lineno) from None
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[-1]))
            else:
                elements[-1][2].append(("scalar", tokens[-1]))
        elif key == "end_header":
            body_start = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {key!r}", path, lineno)
    if body_start is None:
        raise ParseError("missing end_header", path, len(lines))
    if fmt is None:
        raise ParseError("missing format line", path, body_start)
    if not elements or elements[0][0] != "vertex":
        raise ParseError("first element must be 'vertex'", path, body_start)
    _, n_vertices, props = elements[0]
    names = [name for kind, name in props]
    if any(kind == "list" for kind, _ in props):
        raise ParseError("list properties on vertices are not supported", path, body_start)
    try:
        cols = [names.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x, y, z properties", path, body_start) from None
    pts = []
    lineno = body_start
    for lineno, line in enumerate(lines[body_start:body_start + n_vertices], start=body_start + 1):
        tokens = line.split()
        if len(tokens) != len(names):
            raise ParseError(f"expected {len(names)} vertex values, found {len(tokens)}", path, lineno)
        vals = _parse_floats(tokens, path, lineno)
        pts.append([vals[c] for c in cols])
    if len(pts) < n_vertices:
        raise ParseError(f"file ends after {len(pts)} of {n_vertices} vertices", path, lineno + 1)
    return pts


def read_cloud(path, fmt=None):
    """Read an XYZ, OFF or ASCII PLY file into an (N, 3) float64 array."""
    fmt = _format_of(path, fmt)
    with open(path) as fh:
        lines = fh.read().splitlines()
    reader = {"xyz": _read_xyz, "off": _read_off, "ply": _read_ply}[fmt]
    pts = reader(lines, path)
    if not pts:
        raise InvalidDataError(f"{path}: point cloud is empty")
    arr = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidDataError(f"{path}: non-finite coordinates")
    return arr


def write_cloud(cloud, path, fmt=None):
    """Write coordinates using shortest round-trip decimal text."""
    if not str(path):
        raise InvalidArgumentError("output path is empty")
    fmt = _format_of(path, fmt)
    pts = as_cloud(cloud)
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist())
    if fmt == "off":
        header = f"OFF\n{len(pts)} 0 0\n"
    elif fmt == "ply":
        header = ("ply\nformat ascii 1.0\n"
                  f"element vertex {len(pts)}\n"
                  "property double x\nproperty double y\nproperty double z\nend_header\n")
    else:
        header = ""
    with open(path, "w") as fh:
        fh.write(header + body)


# -- synthetic shapes ---------------------------------------------------------------


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(n, rng):
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        pts[m, a] = sign[m]
        pts[np.ix_(m, others)] = uv[m]
    return pts


def _cylinder_parts(n, rng):
    r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
    side_area = 2 * np.pi * r * h
    cap_area = np.pi * r * r
    total = side_area + 2 * cap_area
    kind = rng.choice(3, size=n, p=[side_area / total, cap_area / total, cap_area / total])
    pts = np.empty((n, 3))
    side = kind == 0
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-h / 2, h / 2, size=side.sum())
    cap = ~side
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    pts[cap, 0] = rad[cap] * np.cos(theta[cap])
    pts[cap, 1] = rad[cap] * np.sin(theta[cap])
    pts[cap, 2] = np.where(kind[cap] == 1, h / 2, -h / 2)
    return pts, (kind != 0).astype(np.int64)


def _plane(n, rng):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
    return pts


def _torus(n, rng):
    big, small = TORUS_MAJOR, TORUS_MINOR
    out = np.empty((0, 3))
    # Area element is proportional to (R + r cos v); rejection-sample v.
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0.0, 2 * np.pi, size=m)
        v = rng.uniform(0.0, 2 * np.pi, size=m)
        keep = rng.uniform(0.0, big + small, size=m) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


def sample_shape(name, n, rng):
    """Raw uniform surface samples of a named shape (before normalization or noise)."""
    if name == "sphere":
        return _sphere(n, rng)
    if name == "cube":
        return _cube(n, rng)
    if name == "cylinder":
        return _cylinder_parts(n, rng)[0]
    if name == "plane":
        return _plane(n, rng)
    if name == "torus":
        return _torus(n, rng)
    raise InvalidArgumentError(f"unknown shape {name!r}; expected one of {SHAPES}")


def sample_part_shape(name, n, rng):
    """Raw samples and per-point part labels (0/1) of a composite shape."""
    if name == "hemisphere":
        pts = _sphere(n, rng)
        return pts, (pts[:, 2] > 0).astype(np.int64)
    if name == "capped-cylinder":
        return _cylinder_parts(n, rng)
    raise InvalidArgumentError(f"unknown part shape {name!r}; expected one of {PART_SHAPES}")


def expected_part_fractions(name):
    """Fraction of surface area carrying part label 1."""
    if name == "hemisphere":
        return 0.5
    if name == "capped-cylinder":
        r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
        return 2 * np.pi * r * r / (2 * np.pi * r * h + 2 * np.pi * r * r)
    raise InvalidArgumentError(f"unknown part shape {name!r}")


@dataclass
class LabeledCloudSet:
    points: np.ndarray  # (M, N, 3)
    labels: np.ndarray  # (M,)
    split: np.ndarray  # (M,) of "train" / "test"
    class_names: tuple
    seed: int = 0
    part_labels: Optional[np.ndarray] = None  # (M, N) global part ids
    num_parts: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InvalidDataError("class label out of range")
        if self.part_labels is not None and self.part_labels.shape != self.points.shape[:2]:
            raise InvalidDataError("part label rows must match cloud sizes")

    def __len__(self):
        return len(self.labels)

    def subset(self, split):
        mask = self.split == split
        return replace(
            self,
            points=self.points[mask],
            labels=self.labels[mask],
            split=self.split[mask],
            part_labels=None if self.part_labels is None else self.part_labels[mask],
        )

    @property
    def num_classes(self):
        return len(self.class_names)


def _split(labels, rng, train_fraction=0.8):
    """Per-class seeded shuffle; the first 80% of each class goes to train."""
    split = np.empty(len(labels), dtype="<U5")
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        cut = int(round(train_fraction * len(members)))
        split[members[:cut]] = "train"
        split[members[cut:]] = "test"
    return split


def _finish(raw, noise_sigma, rng):
    pts = normalize_unit_sphere(raw)
    if noise_sigma > 0:
        pts = jitter(pts, noise_sigma, 5.0 * noise_sigma, seed=int(rng.integers(2 ** 63)))
    return pts


def synth_dataset(classes=SHAPES, n_points=256, per_class=125, noise_sigma=0.01, seed=0):
    if n_points < 64:
        raise InvalidArgumentError(f"n_points must be >= 64, got {n_points}")
    classes = tuple(classes)
    for name in classes:
        if name not in SHAPES:
            raise InvalidArgumentError(f"unknown shape {name!r}; expected one of {SHAPES}")
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, name in enumerate(classes):
        for _ in range(per_class):
            clouds.append(_finish(sample_shape(name, n_points, rng), noise_sigma, rng))
            labels.append(label)
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledCloudSet(np.stack(clouds), labels, _split(labels, rng), classes, seed,
                           meta={"kind": "classification", "noise_sigma": noise_sigma})


def synth_parts(categories=PART_SHAPES, n_points=256, per_class=60, noise_sigma=0.01, seed=0):
    """Composite shapes with two parts each; part ids are global (category c owns 2c, 2c+1)."""
    if n_points < 64:
        raise InvalidArgumentError(f"n_points must be >= 64, got {n_points}")
    categories = tuple(categories)
    rng = np.random.default_rng(seed)
    clouds, labels, parts = [], [], []
    for label, name in enumerate(categories):
        for _ in range(per_class):
            raw, part = sample_part_shape(name, n_points, rng)
            clouds.append(_finish(raw, noise_sigma, rng))
            labels.append(label)
            parts.append(2 * label + part)
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledCloudSet(np.stack(clouds), labels, _split(labels, rng), categories, seed,
                           part_labels=np.stack(parts), num_parts=2 * len(categories),
                           meta={"kind": "segmentation", "noise_sigma": noise_sigma})


def category_parts(num_categories):
    """Boolean (categories, parts) mask of which part ids belong to each category."""
    mask = np.zeros((num_categories, 2 * num_categories), dtype=bool)
    for c in range(num_categories):
        mask[c, 2 * c:2 * c + 2] = True
    return mask


def apply_protocol(dataset, protocol, seed=0):
    """Rotate train/test clouds per a rotation-robustness regime.

    One rotation per cloud, drawn from a stream seeded by ``seed``; clouds in
    an unrotated split are returned untouched.
    """
    if protocol not in _PROTOCOL_AXES:
        raise InvalidArgumentError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    train_axes, test_axes = _PROTOCOL_AXES[protocol]
    if train_axes is None and test_axes is None:
        return dataset
    seeds = np.random.SeedSequence(seed).spawn(len(dataset))
    points = dataset.points.copy()
    rotations = np.tile(np.eye(3), (len(dataset), 1, 1))
    for i, split in enumerate(dataset.split):
        axes = train_axes if split == "train" else test_axes
        if axes is None:
            continue
        t = random_rotation(axes, np.random.default_rng(seeds[i]))
        points[i] = apply_transform(points[i], t)
        rotations[i] = t.rotation
    meta = {**dataset.meta, "protocol": protocol, "protocol_seed": seed}
    out = replace(dataset, points=points, meta=meta)
    out.meta["rotations"] = rotations
    return out


# -- dataset files, manifests, descriptor dumps ----------------------------------------


def save_dataset(dataset, path):
    arrays = {
        "points": dataset.points,
        "labels": dataset.labels,
        "split": dataset.split,
        "class_names": np.asarray(dataset.class_names),
        "seed": np.asarray(dataset.seed),
        "num_parts": np.asarray(dataset.num_parts),
    }
    if dataset.part_labels is not None:
        arrays["part_labels"] = dataset.part_labels
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            return LabeledCloudSet(
                data["points"].astype(np.float64),
                data["labels"].astype(np.int64),
                data["split"].astype(str),
                tuple(str(c) for c in data["class_names"]),
                int(data["seed"]),
                data["part_labels"].astype(np.int64) if "part_labels" in data else None,
                int(data["num_parts"]),
            )
    except (KeyError, ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise InvalidDataError(f"{path}: not a dataset archive ({exc})") from None


DEFAULT_DATASET = {
    "kind": "classification",
    "classes": list(SHAPES),
    "n_points": 256,
    "per_class": 125,
    "noise_sigma": 0.01,
    "seed": 0,
}


@dataclass
class ExperimentManifest:
    config: dict
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    protocol: str = "none"
    seeds: dict = field(default_factory=lambda: {"protocol": 0, "init": 0, "train": 0})
    optimizer: dict = field(default_factory=lambda: {"name": "adam", "lr": 1e-3})
    epochs: int = 30
    batch_size: int = 32
    models: Optional[dict] = None  # robustness: name -> config overrides
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InvalidArgumentError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.version != MANIFEST_VERSION:
            raise InvalidDataError(f"unsupported manifest version {self.version}")

    def to_dict(self):
        out = {
            "version": self.version,
            "config": self.config,
            "dataset": self.dataset,
            "protocol": self.protocol,
            "seeds": self.seeds,
            "optimizer": self.optimizer,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }
        if self.models is not None:
            out["models"] = self.models
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        allowed = {"version", "config", "dataset", "protocol", "seeds", "optimizer",
                   "epochs", "batch_size", "models"}
        unknown = set(data) - allowed
        if unknown:
            raise InvalidDataError(f"unknown manifest keys: {sorted(unknown)}")
        if "config" not in data:
            raise InvalidDataError("manifest lacks a 'config' section")
        dataset = {**DEFAULT_DATASET, **data.pop("dataset", {})}
        seeds = {"protocol": 0, "init": 0, "train": 0, **data.pop("seeds", {})}
        optimizer = {"name": "adam", "lr": 1e-3, **data.pop("optimizer", {})}
        return cls(dataset=dataset, seeds=seeds, optimizer=optimizer, **data)


def load_manifest(path):
    with open(path) as fh:
        try:
            return ExperimentManifest.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)


def dataset_from_spec(spec):
    spec = {**DEFAULT_DATASET, **spec}
    kind = spec.get("kind", "classification")
    if kind == "classification":
        return synth_dataset(spec["classes"], spec["n_points"], spec["per_class"],
                             spec["noise_sigma"], spec["seed"])
    if kind == "segmentation":
        cats = spec.get("categories", list(PART_SHAPES))
        return synth_parts(cats, spec["n_points"], spec["per_class"], spec["noise_sigma"], spec["seed"])
    raise InvalidArgumentError(f"unknown dataset kind {kind!r}")


def descriptor_csv(lambdas, eig_idx=None, header=None):
    """CSV text with columns ``index,l1,l2,l3[,n0..]``; ``header`` goes in a '#' line."""
    lines = []
    if header is not None:
        lines.append("# " + json.dumps(header, sort_keys=True))
    cols = ["index", "l1", "l2", "l3"]
    if eig_idx is not None:
        cols += [f"n{j}" for j in range(eig_idx.shape[1])]
    lines.append(",".join(cols))
    for i, lam in enumerate(np.asarray(lambdas).tolist()):
        row = [str(i)] + [repr(v) for v in lam]
        if eig_idx is not None:
            row += [str(int(j)) for j in eig_idx[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def descriptor_jsonl(lambdas, eig_idx=None, header=None):
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    for i, lam in enumerate(np.asarray(lambdas).tolist()):
        rec = {"index": i, "lambda": lam}
        if eig_idx is not None:
            rec["eig_nbrs"] = [int(j) for j in eig_idx[i]]
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def read_descriptor_csv(text):
    """Parse :func:`descriptor_csv` output back into (lambdas, eig_idx or None)."""
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    cols = rows[0].split(",")
    data = [r.split(",") for r in rows[1:]]
    lam = np.array([[float(v) for v in r[1:4]] for r in data])
    idx = None
    if len(cols) > 4:
        idx = np.array([[int(v) for v in r[4:]] for r in data], dtype=np.intp)
    return lam, idx
