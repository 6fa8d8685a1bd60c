import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ribgraph.core import PointCloud
from ribgraph.errors import ParseError
from ribgraph.io import load_point_cloud, save_point_cloud, write_pgm


def test_three_line_csv(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("0,0,0\n1,0,0\n0,1,0\n")
    cloud = load_point_cloud(path)
    assert len(cloud) == 3
    assert cloud.labels is None
    assert np.array_equal(cloud.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_csv_round_trip_bit_exact(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)) * 123.456)
    path = tmp_path / "c.csv"
    save_point_cloud(cloud, path)
    again = load_point_cloud(path)
    assert np.array_equal(again.points, cloud.points)


def test_ply_label_round_trip(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(15, 3)), labels=rng.integers(0, 30, 15))
    path = tmp_path / "c.ply"
    save_point_cloud(cloud, path)
    again = load_point_cloud(path)
    assert np.array_equal(again.points, cloud.points)
    assert np.array_equal(again.labels, cloud.labels)


def test_ply_all_sternum_labels(tmp_path):
    path = tmp_path / "s.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\nproperty int label\n"
        "end_header\n1 2 3 0\n4 5 6 0\n"
    )
    cloud = load_point_cloud(path)
    assert np.all(cloud.labels == 0)


def test_refuses_empty_cloud(tmp_path):
    with pytest.raises(ValueError):
        save_point_cloud(PointCloud(np.empty((0, 3))), tmp_path / "e.csv")


def test_malformed_header_names_problem(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex nope\nend_header\n")
    with pytest.raises(ParseError, match="element"):
        load_point_cloud(path)


def test_non_finite_coordinate_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z\n1,2,3\n4,nan,6\n")
    with pytest.raises(ParseError, match=":3"):
        load_point_cloud(path)


def test_missing_file_errors(tmp_path):
    with pytest.raises(ParseError):
        load_point_cloud(tmp_path / "nothere.ply")


def test_truncated_ply_body(tmp_path):
    path = tmp_path / "short.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"
    )
    with pytest.raises(ParseError, match="3 vertices"):
        load_point_cloud(path)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), fmt=st.sampled_from(["ply", "csv"]),
       with_labels=st.booleans())
def test_round_trip_property(tmp_path_factory, seed, fmt, with_labels):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    labels = rng.integers(0, 256, n) if with_labels else None
    cloud = PointCloud(rng.normal(size=(n, 3)) * 10.0 ** rng.integers(-3, 4), labels=labels)
    path = tmp_path_factory.mktemp("io") / f"cloud.{fmt}"
    save_point_cloud(cloud, path, fmt)
    again = load_point_cloud(path, fmt)
    assert np.array_equal(again.points, cloud.points)
    if with_labels:
        assert np.array_equal(again.labels, cloud.labels)
    else:
        assert again.labels is None


def test_pgm_export(tmp_path):
    bits = np.zeros((2, 3), dtype=bool)
    bits[0, 1] = True
    path = tmp_path / "img.pgm"
    write_pgm(bits, path)
    text = path.read_text().splitlines()
    assert text[0] == "P2"
    assert text[1] == "3 2"
    assert text[3].split() == ["0", "255", "0"]
