"""Command-line entry point: ``gsnet <subcommand> ...``.

Exit codes: 0 success, 2 argument error, 3 data error, 4 numeric failure.
"""

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import __version__
from .data_io import (PROTOCOLS, SHAPES, PART_SHAPES, ExperimentManifest, LabeledCloudSet,
                      apply_protocol, dataset_from_spec, descriptor_csv, descriptor_jsonl,
                      load_dataset, load_manifest, read_cloud, save_dataset, save_manifest)
from .eigen_graph import build_graph, eigen_descriptors, knn_eigen
from .errors import (ContractViolationError, InvalidArgumentError, InvalidDataError, ParseError,
                     TrainingDivergenceError)
from .network import DEFAULT_RECIPE, EIGEN_RECIPE, GscConfig, load_checkpoint, save_checkpoint
from .sampling import fps
from .training import TOY_CONFIG, evaluate, gradcheck_network, jsonl_logger, run_experiment

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "GSNET_THREADS"

DEFAULT_MODELS = {"default": {"recipe": DEFAULT_RECIPE}, "eigen-only": {"recipe": EIGEN_RECIPE}}


class UsageError(Exception):
    pass


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _header(command, **fields):
    return {"command": command, "version": __version__, **fields}


def _dump(obj, fh, pretty=False):
    fh.write(json.dumps(obj, indent=2 if pretty else None, sort_keys=True) + "\n")


def cmd_descriptors(args):
    cloud = read_cloud(args.input, args.input_format)
    k2 = args.k2
    desc = eigen_descriptors(cloud, args.k1)
    eig_idx = knn_eigen(desc, k2) if k2 is not None else None
    header = _header("descriptors", input=args.input, k1=args.k1, k2=k2, n_points=len(cloud))
    render = descriptor_csv if args.format == "csv" else descriptor_jsonl
    with _output(args.out) as fh:
        fh.write(render(desc.lambdas, eig_idx, header))
    return EXIT_OK


def cmd_knn(args):
    cloud = read_cloud(args.input, args.input_format)
    graph, desc = build_graph(cloud, args.k1, args.k2)
    with _output(args.out) as fh:
        _dump({"header": _header("knn", input=args.input, k1=args.k1, k2=args.k2,
                                 n_points=len(cloud))}, fh)
        for i in range(len(cloud)):
            _dump({"index": i, "lambda": desc.lambdas[i].tolist(),
                   "euclid": graph.euclid_idx[i].tolist(),
                   "eigen": graph.eigen_idx[i].tolist()}, fh)
    return EXIT_OK


def cmd_fps(args):
    cloud = read_cloud(args.input, args.input_format)
    sel = fps(cloud, args.m, args.seed_index, random_start=args.random_start)
    with _output(args.out) as fh:
        _dump({"header": _header("fps", input=args.input, m=args.m, seed_index=sel.seed_index,
                                 random_start=args.random_start),
               "indices": sel.indices.tolist()}, fh, args.pretty)
    return EXIT_OK


def cmd_synth(args):
    spec = {"kind": args.kind, "n_points": args.n_points, "per_class": args.per_class,
            "noise_sigma": args.noise, "seed": args.seed}
    if args.kind == "classification":
        spec["classes"] = args.classes.split(",") if args.classes else list(SHAPES)
    else:
        spec["categories"] = args.classes.split(",") if args.classes else list(PART_SHAPES)
    dataset = apply_protocol(dataset_from_spec(spec), args.protocol, args.protocol_seed)
    save_dataset(dataset, args.out)
    _dump({"header": _header("synth", dataset=spec, protocol=args.protocol,
                             protocol_seed=args.protocol_seed),
           "clouds": len(dataset), "train": int(np.sum(dataset.split == "train")),
           "test": int(np.sum(dataset.split == "test")), "out": args.out}, sys.stdout, args.pretty)
    return EXIT_OK


def _task_of(config, manifest):
    return "segmentation" if manifest.dataset.get("kind") == "segmentation" else "classification"


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    config = GscConfig.from_dict(manifest.config)
    header = _header("train", manifest=manifest.to_dict(), resolved_config=config.to_dict())
    with open(os.path.join(args.out_dir, "log.jsonl"), "w") as log_fh:
        log_fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        config, store, metrics = run_experiment(manifest, log=jsonl_logger(log_fh))
    task = _task_of(config, manifest)
    save_checkpoint(os.path.join(args.out_dir, "checkpoint.json"), store, config, task,
                    extra={"manifest": manifest.to_dict()})
    save_manifest(manifest, os.path.join(args.out_dir, "manifest.json"))
    result = {"header": header, "task": task, "test": metrics}
    with open(os.path.join(args.out_dir, "metrics.json"), "w") as fh:
        _dump(result, fh, True)
    _dump(result, sys.stdout, args.pretty)
    return EXIT_OK


def _load_eval_dataset(path):
    if path.endswith(".json"):
        manifest = load_manifest(path)
        data = dataset_from_spec(manifest.dataset)
        return apply_protocol(data, manifest.protocol, manifest.seeds.get("protocol", 0))
    return load_dataset(path)


def cmd_eval(args):
    config, store, task = load_checkpoint(args.checkpoint)
    dataset = _load_eval_dataset(args.dataset)
    if args.split != "all":
        dataset = dataset.subset(args.split)
    if len(dataset) == 0:
        raise InvalidDataError(f"dataset has no clouds in split {args.split!r}")
    metrics = evaluate(config, store, dataset, task)
    _dump({"header": _header("eval", checkpoint=args.checkpoint, dataset=args.dataset,
                             split=args.split, config=config.to_dict()),
           "task": task, "metrics": metrics}, sys.stdout, args.pretty)
    return EXIT_OK


def parse_protocols(text):
    names = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in names if p not in PROTOCOLS or p == "none"]
    if bad or not names:
        raise InvalidArgumentError(
            f"unknown protocol(s) {bad or text!r}; choose from z/z, z/s, s/s, 0/s")
    return names


def robustness_table(manifest, protocols, models=None, progress=None):
    """``{model: {protocol: accuracy}}`` after training each model under each protocol."""
    models = models or manifest.models or DEFAULT_MODELS
    table = {}
    for name, overrides in models.items():
        table[name] = {}
        for proto in protocols:
            _, _, metrics = run_experiment(manifest, config_overrides=overrides, protocol=proto)
            table[name][proto] = metrics["accuracy"]
            if progress:
                progress(name, proto, metrics["accuracy"])
    return table


def _render_table(table, protocols):
    width = max(len(m) for m in table) + 2
    lines = ["model".ljust(width) + "".join(p.rjust(8) for p in protocols)]
    for model, row in table.items():
        lines.append(model.ljust(width) + "".join(f"{100 * row[p]:8.1f}" for p in protocols))
    return "\n".join(lines) + "\n"


def cmd_robustness(args):
    protocols = parse_protocols(args.protocols)
    manifest = load_manifest(args.manifest)
    models = manifest.models or DEFAULT_MODELS
    table = robustness_table(manifest, protocols, models)
    result = {"header": _header("robustness", manifest=manifest.to_dict(), models=models,
                                protocols=protocols), "protocols": protocols, "table": table}
    with _output(args.out) as fh:
        _dump(result, fh)
    if args.pretty:
        sys.stdout.write(_render_table(table, protocols))
    elif args.out not in (None, "-"):
        _dump(result, sys.stdout)
    return EXIT_OK


def cmd_gradcheck(args):
    data = TOY_CONFIG
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    config = GscConfig.from_dict(data)
    report = gradcheck_network(config, args.tolerance, args.step, seed=args.seed)
    _dump({"header": _header("gradcheck", config=config.to_dict(), seed=args.seed),
           **report.to_dict()}, sys.stdout, args.pretty)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(prog="gsnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap numeric worker threads (default: ${THREADS_ENV})")
    parser.add_argument("--pretty", action="store_true", help="human-readable rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    def cloud_input(p):
        p.add_argument("--input", required=True)
        p.add_argument("--input-format", choices=["xyz", "off", "ply"], default=None,
                       help="override format detection by extension")

    p = sub.add_parser("descriptors", help="per-point structure-tensor eigenvalues")
    cloud_input(p)
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=None, help="also emit k2 eigen-space neighbors")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("knn", help="dump the Eigen-Graph (Euclidean and eigen neighbor rows)")
    cloud_input(p)
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("fps", help="farthest-point sampling")
    cloud_input(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed-index", type=int, default=0)
    p.add_argument("--random-start", type=int, default=None, help="seed for a random start index")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fps)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset (.npz)")
    p.add_argument("--kind", choices=["classification", "segmentation"], default="classification")
    p.add_argument("--classes", default=None, help="comma-separated shape names")
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--per-class", type=int, default=125)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", choices=PROTOCOLS, default="none")
    p.add_argument("--protocol-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from an experiment manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help=".npz from 'synth' or a manifest .json")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="rotation-robustness table across protocols")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocols", default="z/z,z/s,s/s,0/s")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    p.add_argument("--config", default=None, help="GscConfig JSON (default: toy shapes)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(args):
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise InvalidArgumentError(f"--threads must be >= 1, got {threads}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args):
            return args.func(args)
    except InvalidArgumentError as exc:
        print(f"gsnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (ParseError, InvalidDataError, OSError) as exc:
        print(f"gsnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergenceError, ContractViolationError, FloatingPointError) as exc:
        print(f"gsnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
