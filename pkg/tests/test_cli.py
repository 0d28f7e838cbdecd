import json

import numpy as np
import pytest

from gsnet.cli import main, parse_protocols
from gsnet.data_io import read_descriptor_csv, write_cloud
from gsnet.eigen_graph import build_graph, eigen_descriptors
from gsnet.errors import InvalidArgumentError
from gsnet.geometry import apply_transform, normalize_unit_sphere, random_rigid_transform
from gsnet.network import init_params
from gsnet.sampling import fps

TINY = {"k1": 6, "k2": 6, "level_sizes": [64, 32, 16], "level_widths": [8, 8, 8],
        "fc_widths": [8]}


@pytest.fixture
def cloud_file(tmp_path):
    pts = normalize_unit_sphere(np.random.default_rng(0).normal(size=(60, 3)))
    path = tmp_path / "c.xyz"
    write_cloud(pts, path)
    return path, pts


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _jsonl(text):
    return [json.loads(line) for line in text.splitlines()]


def test_descriptors_match_library(capsys, cloud_file):
    path, pts = cloud_file
    code, out, _ = _run(capsys, "descriptors", "--input", path, "--k1", 10, "--k2", 4)
    assert code == 0
    header = json.loads(out.splitlines()[0][2:])
    assert header["k1"] == 10 and header["input"] == str(path)
    lam, idx = read_descriptor_csv(out)
    graph, desc = build_graph(pts, 10, 4)
    assert np.array_equal(lam, desc.lambdas) and np.array_equal(idx, graph.eigen_idx)
    code, out, _ = _run(capsys, "descriptors", "--input", path, "--k1", 10, "--format", "jsonl")
    recs = _jsonl(out)
    assert [r["lambda"] for r in recs[1:]] == eigen_descriptors(pts, 10).lambdas.tolist()


def test_descriptors_planar_file(capsys, tmp_path):
    grid = np.stack(np.meshgrid(np.arange(6.0), np.arange(5.0)), -1).reshape(-1, 2)
    path = tmp_path / "plane.off"
    write_cloud(np.column_stack([grid, np.zeros(30)]), path)
    out_path = tmp_path / "d.csv"
    assert _run(capsys, "descriptors", "--input", path, "--k1", 5, "--out", out_path)[0] == 0
    lam, _ = read_descriptor_csv(out_path.read_text())
    assert np.all(lam[:, 2] <= 1e-10)


def test_descriptors_k1_too_large(capsys, cloud_file):
    code, _, err = _run(capsys, "descriptors", "--input", cloud_file[0], "--k1", 60)
    assert code == 2 and "k1=60" in err and "N=60" in err


def test_error_exit_codes(capsys, tmp_path):
    assert _run(capsys, "descriptors", "--input", tmp_path / "missing.xyz")[0] == 3
    bad = tmp_path / "bad.xyz"
    bad.write_text("1 2\n")
    code, _, err = _run(capsys, "knn", "--input", bad)
    assert code == 3 and "bad.xyz:1:" in err
    with pytest.raises(SystemExit) as info:
        main(["fps", "--input", str(bad)])
    assert info.value.code == 2


def test_knn_dump(capsys, cloud_file):
    path, pts = cloud_file
    code, out, _ = _run(capsys, "knn", "--input", path, "--k1", 8, "--k2", 5)
    recs = _jsonl(out)
    graph, _ = build_graph(pts, 8, 5)
    assert recs[0]["header"]["k2"] == 5 and len(recs) == 61
    assert [r["eigen"] for r in recs[1:]] == graph.eigen_idx.tolist()
    assert [r["euclid"] for r in recs[1:]] == graph.euclid_idx.tolist()
    moved = path.parent / "moved.xyz"
    write_cloud(apply_transform(pts, random_rigid_transform(3)), moved)
    _, out2, _ = _run(capsys, "knn", "--input", moved, "--k1", 8, "--k2", 5)
    assert [r["eigen"] for r in _jsonl(out2)[1:]] == graph.eigen_idx.tolist()
    _, out3, _ = _run(capsys, "knn", "--input", path, "--k1", 8, "--k2", 1)
    assert all(len(r["eigen"]) == 1 for r in _jsonl(out3)[1:])


def test_fps_command(capsys, cloud_file):
    path, pts = cloud_file
    code, out, _ = _run(capsys, "fps", "--input", path, "--m", 10, "--seed-index", 4)
    assert code == 0 and json.loads(out)["indices"] == fps(pts, 10, 4).indices.tolist()
    assert _run(capsys, "fps", "--input", path, "--m", 61)[0] == 2


def test_threads_do_not_change_results(capsys, cloud_file, monkeypatch):
    path, _ = cloud_file
    base = _run(capsys, "descriptors", "--input", path, "--k1", 10)[1]
    assert _run(capsys, "--threads", 1, "descriptors", "--input", path, "--k1", 10)[1] == base
    monkeypatch.setenv("GSNET_THREADS", "2")
    assert _run(capsys, "descriptors", "--input", path, "--k1", 10)[1] == base
    assert _run(capsys, "--threads", 0, "descriptors", "--input", path, "--k1", 10)[0] == 2


def test_train_eval_round_trip(capsys, tmp_path):
    manifest = {"config": TINY, "dataset": {"per_class": 4, "n_points": 64}, "epochs": 1,
                "batch_size": 8, "seeds": {"init": 1, "train": 2}}
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps(manifest))
    outs = []
    for name in ("a", "b"):
        code, out, _ = _run(capsys, "train", "--manifest", mpath, "--out-dir", tmp_path / name)
        assert code == 0
        outs.append(json.loads(out))
    assert outs[0] == outs[1]
    assert outs[0]["header"]["resolved_config"]["k1"] == 6
    logs = [_jsonl((tmp_path / n / "log.jsonl").read_text()) for n in ("a", "b")]
    assert logs[0][0]["header"]["manifest"]["seeds"] == {"protocol": 0, "init": 1, "train": 2}
    for a, b in zip(logs[0][1:], logs[1][1:]):
        a.pop("wall_time"), b.pop("wall_time")
        assert a == b
    ckpt = tmp_path / "a" / "checkpoint.json"
    code, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--dataset", mpath)
    res = json.loads(out)
    assert code == 0 and res["metrics"]["accuracy"] == outs[0]["test"]["accuracy"]
    assert set(res["metrics"]["per_class_accuracy"]) == {"0", "1", "2", "3", "4"}
    npz = tmp_path / "d.npz"
    assert _run(capsys, "synth", "--out", npz, "--per-class", 4, "--n-points", 64)[0] == 0
    code, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--dataset", npz)
    assert json.loads(out)["metrics"] == res["metrics"]


def test_eval_zero_lr_matches_initial_model(capsys, tmp_path):
    from gsnet.network import GscConfig, save_checkpoint
    manifest = {"config": TINY, "dataset": {"per_class": 4, "n_points": 64}, "epochs": 1,
                "optimizer": {"name": "adam", "lr": 0.0}}
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps(manifest))
    _run(capsys, "train", "--manifest", mpath, "--out-dir", tmp_path / "t")
    config = GscConfig.from_dict(TINY)
    save_checkpoint(tmp_path / "init.json", init_params(config, 0), config)
    a = json.loads(_run(capsys, "eval", "--checkpoint", tmp_path / "t" / "checkpoint.json",
                        "--dataset", mpath)[1])
    b = json.loads(_run(capsys, "eval", "--checkpoint", tmp_path / "init.json",
                        "--dataset", mpath)[1])
    assert a["metrics"] == b["metrics"]


def test_divergence_exit_code(capsys, tmp_path):
    manifest = {"config": TINY, "dataset": {"per_class": 4, "n_points": 64}, "epochs": 3,
                "optimizer": {"name": "sgd", "lr": 1e300}}
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps(manifest))
    with np.errstate(all="ignore"):
        code, _, err = _run(capsys, "train", "--manifest", mpath, "--out-dir", tmp_path / "o")
    assert code == 4 and "step" in err


def test_robustness_command(capsys, tmp_path):
    manifest = {"config": TINY, "dataset": {"per_class": 4, "n_points": 64}, "epochs": 1}
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps(manifest))
    code, out, _ = _run(capsys, "robustness", "--manifest", mpath, "--protocols", "z/z,0/s")
    res = json.loads(out)
    assert code == 0 and res["protocols"] == ["z/z", "0/s"]
    assert set(res["table"]) == {"default", "eigen-only"}
    assert res["header"]["models"]["eigen-only"] == {"recipe": "dlambda+lambda"}
    code, out, _ = _run(capsys, "--pretty", "robustness", "--manifest", mpath, "--protocols", "z/z",
                        "--out", tmp_path / "r.json")
    assert out.splitlines()[0].split() == ["model", "z/z"]
    assert json.loads((tmp_path / "r.json").read_text())["table"]["default"]["z/z"] == \
        res["table"]["default"]["z/z"]
    assert _run(capsys, "robustness", "--manifest", mpath, "--protocols", "z/q")[0] == 2


def test_parse_protocols():
    assert parse_protocols("z/z, s/s") == ["z/z", "s/s"]
    for bad in ("", "none", "z/z,x"):
        with pytest.raises(InvalidArgumentError):
            parse_protocols(bad)


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = _run(capsys, "gradcheck")
    report = json.loads(out)
    assert code == 0 and report["passed"] and report["max_error"] < 1e-4
    config = report["header"]["config"]
    from gsnet.network import GscConfig
    assert set(report["parameters"]) == set(init_params(GscConfig.from_dict(config)))
    code, out, _ = _run(capsys, "gradcheck", "--tolerance", 0)
    assert code == 4 and not json.loads(out)["passed"]
    cpath = tmp_path / "c.json"
    cpath.write_text(json.dumps({**config, "branches": "EI", "mlp_depth": 2}))
    assert _run(capsys, "gradcheck", "--config", cpath)[0] == 0
