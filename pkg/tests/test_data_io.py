import json

import numpy as np
import pytest

from gsnet.data_io import (PART_SHAPES, SHAPES, ExperimentManifest, apply_protocol,
                           dataset_from_spec, descriptor_csv, descriptor_jsonl,
                           expected_part_fractions, load_dataset, load_manifest, read_cloud,
                           read_descriptor_csv, sample_part_shape, sample_shape, save_dataset,
                           save_manifest, synth_dataset, synth_parts, write_cloud)
from gsnet.eigen_graph import eigen_descriptors
from gsnet.errors import InvalidArgumentError, InvalidDataError, ParseError
from gsnet.geometry import apply_transform, random_rotation


def test_xyz_literal_parse(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 2 3\n")
    assert read_cloud(p).tolist() == [[0, 0, 0], [1, 2, 3]]


def test_off_and_ply_parse(tmp_path):
    off = tmp_path / "a.off"
    off.write_text("OFF\n# comment\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    assert read_cloud(off).shape == (3, 3)
    inline = tmp_path / "b.off"
    inline.write_text("OFF2 0 0\n1 1 1\n2 2 2\n")
    assert read_cloud(inline).tolist() == [[1, 1, 1], [2, 2, 2]]
    ply = tmp_path / "a.ply"
    ply.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float nx\n"
                   "property float z\nproperty float y\nproperty float x\n"
                   "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
                   "9 3 2 1\n9 6 5 4\n")
    assert read_cloud(ply).tolist() == [[1, 2, 3], [4, 5, 6]]


@pytest.mark.parametrize("name, text, line", [
    ("bad.xyz", "0 0 0\n1 x 3\n", 2),
    ("short.xyz", "0 0\n", 1),
    ("bad.off", "COFF\n1 0 0\n0 0 0\n", 1),
    ("trunc.off", "OFF\n3 0 0\n0 0 0\n", 4),
    ("bad.ply", "ply\nformat binary_little_endian 1.0\nend_header\n", 2),
])
def test_parse_errors_carry_line_numbers(tmp_path, name, text, line):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(ParseError) as info:
        read_cloud(p)
    assert info.value.line == line and f":{line}:" in str(info.value)


def test_empty_clouds_are_invalid_data(tmp_path):
    off = tmp_path / "e.off"
    off.write_text("OFF\n0 0 0\n")
    with pytest.raises(InvalidDataError):
        read_cloud(off)
    xyz = tmp_path / "e.xyz"
    xyz.write_text("\n")
    with pytest.raises(InvalidDataError):
        read_cloud(xyz)


@pytest.mark.parametrize("fmt", ["xyz", "off", "ply"])
def test_round_trip_is_exact(tmp_path, fmt):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3)) * 10.0 ** rng.integers(-8, 8, size=(40, 1))
    p = tmp_path / f"c.{fmt}"
    write_cloud(pts, p)
    assert np.array_equal(read_cloud(p), pts)


def test_write_single_point_and_empty_path(tmp_path):
    p = tmp_path / "one.xyz"
    write_cloud([[0.1, 0.2, 0.3]], p)
    assert p.read_text().splitlines() == ["0.1 0.2 0.3"]
    with pytest.raises(InvalidArgumentError):
        write_cloud([[0.0, 0, 0]], "")


def test_shapes_sample_their_surfaces():
    rng = np.random.default_rng(0)
    assert np.allclose(np.linalg.norm(sample_shape("sphere", 500, rng), axis=1), 1.0, atol=1e-9)
    cube = sample_shape("cube", 500, rng)
    assert np.allclose(np.abs(cube).max(axis=1), 1.0)
    with pytest.raises(InvalidArgumentError):
        sample_shape("cone", 10, rng)
    with pytest.raises(InvalidArgumentError):
        synth_dataset(["sphere", "cone"])


def test_noiseless_plane_has_zero_smallest_eigenvalue():
    data = synth_dataset(["plane"], n_points=128, per_class=3, noise_sigma=0.0)
    for cloud in data.points:
        assert np.all(eigen_descriptors(cloud, 10).lambdas[:, 2] <= 1e-10)


def test_synth_dataset_determinism_balance_split():
    a = synth_dataset(per_class=10, n_points=64, seed=3)
    b = synth_dataset(per_class=10, n_points=64, seed=3)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.split, b.split)
    assert np.bincount(a.labels).tolist() == [10] * len(SHAPES)
    for c in range(len(SHAPES)):
        assert np.sum((a.labels == c) & (a.split == "train")) == 8
    assert len(a.subset("train")) + len(a.subset("test")) == len(a)
    assert np.allclose(np.abs(a.points.mean(axis=1)), 0, atol=0.01)
    with pytest.raises(InvalidArgumentError):
        synth_dataset(n_points=32)


def test_part_histograms_match_area_fractions():
    rng = np.random.default_rng(0)
    for name in PART_SHAPES:
        _, part = sample_part_shape(name, 20_000, rng)
        frac = part.mean()
        assert abs(frac - expected_part_fractions(name)) < 4 * np.sqrt(0.25 / 20_000)


def test_hemisphere_labels_follow_z_and_ride_with_rotation():
    pts, part = sample_part_shape("hemisphere", 200, np.random.default_rng(1))
    assert np.array_equal(part, (pts[:, 2] > 0).astype(int))
    data = synth_parts(n_points=64, per_class=5)
    assert data.num_parts == 4 and set(np.unique(data.part_labels[data.labels == 1])) <= {2, 3}
    rotated = apply_protocol(data, "s/s", 0)
    assert np.array_equal(rotated.part_labels, data.part_labels)


def test_protocols():
    data = synth_dataset(per_class=6, n_points=64)
    assert apply_protocol(data, "none") is data
    zz = apply_protocol(data, "z/z", 1)
    assert np.allclose(zz.meta["rotations"][:, :, 2], [0, 0, 1])
    zero = apply_protocol(data, "0/s", 1)
    train = data.split == "train"
    assert np.array_equal(zero.points[train], data.points[train])
    assert not np.allclose(zero.points[~train], data.points[~train])
    zs = apply_protocol(data, "z/s", 1)
    assert np.allclose(zs.meta["rotations"][train][:, :, 2], [0, 0, 1])
    for i in np.flatnonzero(~train):
        rot = zs.meta["rotations"][i]
        assert np.allclose(data.points[i] @ rot.T, zs.points[i])
    assert np.array_equal(apply_protocol(data, "s/s", 5).points, apply_protocol(data, "s/s", 5).points)
    with pytest.raises(InvalidArgumentError):
        apply_protocol(data, "x/y")


def test_dataset_and_manifest_files(tmp_path):
    data = synth_parts(n_points=64, per_class=3)
    save_dataset(data, tmp_path / "d.npz")
    back = load_dataset(tmp_path / "d.npz")
    assert np.array_equal(back.points, data.points) and np.array_equal(back.part_labels, data.part_labels)
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(InvalidDataError):
        load_dataset(tmp_path / "junk.npz")
    m = ExperimentManifest(config={"k1": 8}, protocol="z/s", epochs=2)
    save_manifest(m, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == m
    (tmp_path / "bad.json").write_text("{\n  'x': 1}")
    with pytest.raises(ParseError):
        load_manifest(tmp_path / "bad.json")
    with pytest.raises(InvalidArgumentError):
        ExperimentManifest(config={}, protocol="y/y")
    with pytest.raises(InvalidDataError):
        ExperimentManifest.from_dict({"config": {}, "extra": 1})
    spec = json.loads(json.dumps({"kind": "classification", "per_class": 2, "n_points": 64}))
    assert np.array_equal(dataset_from_spec(spec).points, dataset_from_spec(spec).points)


def test_descriptor_dumps():
    lam = np.array([[3.0, 2.0, 1.0], [0.1, 0.2 / 3, 0.0]])
    idx = np.array([[1], [0]])
    text = descriptor_csv(lam, idx, {"k1": 1})
    assert text.splitlines()[1] == "index,l1,l2,l3,n0"
    back, back_idx = read_descriptor_csv(text)
    assert np.array_equal(back, lam) and np.array_equal(back_idx, idx)
    recs = [json.loads(line) for line in descriptor_jsonl(lam, idx, {"k1": 1}).splitlines()]
    assert recs[0]["header"] == {"k1": 1} and recs[2]["lambda"] == lam[1].tolist()
