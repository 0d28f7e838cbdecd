"""Training and evaluation loops for the classification and segmentation networks."""

import json
import time

import numpy as np

from .autodiff import Tape, grad_check, make_optimizer, train_step
from .data_io import apply_protocol, category_parts, dataset_from_spec
from .errors import InvalidArgumentError
from .geometry import normalize_unit_sphere
from .network import (GscConfig, classify_logits, encode, init_params, prepare_levels,
                      segment_logits, stack_levels)


def prepare_dataset(points, config, interpolation=False):
    """Precompute level geometry for every cloud in ``points`` (M, N, 3)."""
    return [prepare_levels(p, config, interpolation) for p in points]


def _batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _level1_labels(levels, part_labels):
    sel = np.stack([lv[0].selection for lv in levels])
    return np.take_along_axis(part_labels, sel, axis=1)


def fit(config, prepared, labels, *, task="classification", onehot=None, part_labels=None,
        epochs=30, batch_size=32, optimizer="adam", lr=1e-3, momentum=0.9,
        init_seed=0, train_seed=0, store=None, log=None):
    """Train from scratch (or continue ``store``); returns the parameter store.

    ``log`` is an optional callable receiving one dict per optimizer step.
    """
    if store is None:
        store = init_params(config, init_seed, task)
    opt = make_optimizer(optimizer, lr, momentum)
    labels = np.asarray(labels)
    if task == "segmentation":
        targets_all = _level1_labels(prepared, np.asarray(part_labels))
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([train_seed, epoch])
        for idx in _batches(len(prepared), batch_size, rng):
            batch = stack_levels([prepared[i] for i in idx])
            step_seed = (train_seed, step)
            if task == "classification":
                targets = labels[idx]

                def loss_fn(tape, params):
                    feats = encode(tape, params, config, batch)
                    logits = classify_logits(tape, params, config, feats, True, step_seed)
                    correct = np.argmax(logits.value, axis=1) == targets
                    return tape.softmax_cross_entropy(logits, targets), {"accuracy": correct.mean()}
            else:
                targets = targets_all[idx]
                hot = onehot[idx]

                def loss_fn(tape, params):
                    feats = encode(tape, params, config, batch)
                    logits = segment_logits(tape, params, config, batch, feats, hot)
                    correct = np.argmax(logits.value, axis=-1) == targets
                    return tape.softmax_cross_entropy(logits, targets), {"accuracy": correct.mean()}

            result = train_step(loss_fn, store, opt, step)
            if log is not None:
                log({"step": step, "epoch": epoch, "loss": result.loss,
                     "accuracy": float(result.diagnostics["accuracy"]), "lr": opt.lr,
                     "wall_time": time.time()})
            step += 1
    return store


def predict(config, store, prepared, *, task="classification", onehot=None, batch_size=64):
    """Logits for every prepared cloud (dropout disabled)."""
    out = []
    for idx in _batches(len(prepared), batch_size):
        batch = stack_levels([prepared[i] for i in idx])
        tape = Tape()
        feats = encode(tape, store, config, batch)
        if task == "classification":
            out.append(classify_logits(tape, store, config, feats).value)
        else:
            out.append(segment_logits(tape, store, config, batch, feats, onehot[idx]).value)
    return np.concatenate(out, axis=0)


def classification_metrics(logits, labels, num_classes):
    pred = np.argmax(logits, axis=1)
    per_class = {}
    for c in range(num_classes):
        m = labels == c
        per_class[c] = float((pred[m] == c).mean()) if m.any() else None
    return {"accuracy": float((pred == labels).mean()), "per_class_accuracy": per_class,
            "count": int(len(labels))}


def segmentation_metrics(logits, part_labels, categories, num_categories):
    """Point accuracy plus instance- and category-averaged mIoU.

    Predictions are restricted to the parts of each cloud's category; a part
    absent from both prediction and ground truth counts as IoU 1.
    """
    owned = category_parts(num_categories)
    masked = np.where(owned[categories][:, None, :], logits, -np.inf)
    pred = np.argmax(masked, axis=-1)
    inst = []
    for p, g, c in zip(pred, part_labels, categories):
        ious = []
        for part in np.flatnonzero(owned[c]):
            inter = np.sum((p == part) & (g == part))
            union = np.sum((p == part) | (g == part))
            ious.append(1.0 if union == 0 else inter / union)
        inst.append(float(np.mean(ious)))
    inst = np.asarray(inst)
    per_cat = {int(c): float(inst[categories == c].mean()) for c in np.unique(categories)}
    return {
        "accuracy": float((pred == part_labels).mean()),
        "instance_miou": float(inst.mean()),
        "class_miou": float(np.mean(list(per_cat.values()))),
        "per_category_miou": per_cat,
        "count": int(len(categories)),
    }


def onehot_categories(labels, num_categories):
    out = np.zeros((len(labels), num_categories))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def run_experiment(manifest, log=None, config_overrides=None, protocol=None):
    """Generate data, apply the rotation protocol, train, and evaluate on the test split.

    Returns ``(config, store, metrics)``.
    """
    config = GscConfig.from_dict({**manifest.config, **(config_overrides or {})})
    dataset = dataset_from_spec(manifest.dataset)
    protocol = manifest.protocol if protocol is None else protocol
    dataset = apply_protocol(dataset, protocol, manifest.seeds.get("protocol", 0))
    seg = dataset.part_labels is not None
    task = "segmentation" if seg else "classification"
    if not seg and config.num_classes != dataset.num_classes:
        raise InvalidArgumentError(
            f"config num_classes={config.num_classes} but dataset has {dataset.num_classes}")
    train, test = dataset.subset("train"), dataset.subset("test")
    opt = manifest.optimizer
    kwargs = {}
    if seg:
        if config.num_parts != dataset.num_parts or config.num_categories != dataset.num_classes:
            raise InvalidArgumentError("config num_parts/num_categories do not match the dataset")
        kwargs = {"onehot": onehot_categories(train.labels, dataset.num_classes),
                  "part_labels": train.part_labels}
    store = fit(config, prepare_dataset(train.points, config, seg), train.labels, task=task,
                epochs=manifest.epochs, batch_size=manifest.batch_size,
                optimizer=opt.get("name", "adam"), lr=opt.get("lr", 1e-3),
                momentum=opt.get("momentum", 0.9), init_seed=manifest.seeds.get("init", 0),
                train_seed=manifest.seeds.get("train", 0), log=log, **kwargs)
    metrics = evaluate(config, store, test, task)
    return config, store, metrics


def evaluate(config, store, dataset, task="classification"):
    prepared = prepare_dataset(dataset.points, config, task == "segmentation")
    if task == "classification":
        logits = predict(config, store, prepared)
        return classification_metrics(logits, dataset.labels, config.num_classes)
    onehot = onehot_categories(dataset.labels, config.num_categories)
    logits = predict(config, store, prepared, task=task, onehot=onehot)
    targets = _level1_labels(prepared, dataset.part_labels)
    return segmentation_metrics(logits, targets, dataset.labels, config.num_categories)


def jsonl_logger(fh):
    def log(record):
        fh.write(json.dumps(record) + "\n")
    return log


TOY_CONFIG = {
    "k1": 4,
    "k2": 4,
    "level_sizes": [16, 8, 6],
    "level_widths": [4, 4, 6],
    "fc_widths": [8],
    "num_classes": 3,
}


def gradcheck_network(config, tolerance=1e-4, step=1e-5, batch=2, seed=0):
    """Finite-difference check of every classification-network parameter.

    Random unit-sphere clouds sized to the first level, random labels, and a
    fixed dropout mask.
    """
    rng = np.random.default_rng(seed)
    clouds = [normalize_unit_sphere(rng.normal(size=(config.level_sizes[0], 3)))
              for _ in range(batch)]
    levels = stack_levels(prepare_dataset(clouds, config))
    labels = rng.integers(config.num_classes, size=batch)
    store = init_params(config, seed)
    # Nonzero biases keep every bias gradient path exercised.
    for name, arr in list(store.items()):
        if name.endswith(".bias"):
            store.assign(name, rng.normal(0.0, 0.1, size=arr.shape))

    def forward(tape, params):
        feats = encode(tape, params, config, levels)
        logits = classify_logits(tape, params, config, feats, train=True, seed=(seed, 0))
        return tape.softmax_cross_entropy(logits, labels)

    return grad_check(forward, store, tolerance, step)
