#!/usr/bin/env python3
"""
Tests lecture / écriture PLY
"""

import numpy as np
import pytest

from geom_core import PointCloud
from ply_io import PlyFormatError, read_ply, write_ply


def _cloud(rng, n=50, labels=True):
    return PointCloud(rng.normal(size=(n, 3)), rng.integers(-1, 4, n) if labels else None)


@pytest.mark.parametrize('binary', [True, False])
def test_float64_is_exact(tmp_path, rng, binary):
    cloud = _cloud(rng)
    path = tmp_path / 'cloud.ply'
    write_ply(path, cloud, binary=binary, precision='float64')
    back = read_ply(path)
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.labels, cloud.labels)


def test_float32_precision(tmp_path, rng):
    cloud = _cloud(rng, labels=False)
    path = tmp_path / 'cloud.ply'
    write_ply(path, cloud)
    back = read_ply(path)
    assert back.labels is None
    assert np.array_equal(back.points, cloud.points.astype(np.float32).astype(np.float64))


def test_normals_survive(tmp_path, rng):
    normals = rng.normal(size=(10, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(rng.normal(size=(10, 3)), normals=normals)
    write_ply(tmp_path / 'n.ply', cloud, precision='float64')
    assert np.allclose(read_ply(tmp_path / 'n.ply').normals, normals)


def test_empty_cloud(tmp_path):
    write_ply(tmp_path / 'empty.ply', PointCloud(np.zeros((0, 3)), np.zeros(0)))
    back = read_ply(tmp_path / 'empty.ply')
    assert len(back) == 0


def test_comment_and_foreign_elements(tmp_path):
    path = tmp_path / 'mesh.ply'
    path.write_text(
        "ply\nformat ascii 1.0\ncomment exporté\nelement vertex 3\n"
        "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0 255\n1 0 0 255\n0 1 0 255\n3 0 1 2\n"
    )
    cloud = read_ply(path)
    assert len(cloud) == 3
    assert np.array_equal(cloud.points[1], [1.0, 0.0, 0.0])


def test_missing_header(tmp_path):
    path = tmp_path / 'bad.ply'
    path.write_text("not a ply file\n")
    with pytest.raises(PlyFormatError, match='ligne 1'):
        read_ply(path)


def test_truncated_binary(tmp_path, rng):
    path = tmp_path / 'cut.ply'
    write_ply(path, _cloud(rng))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(PlyFormatError, match='tronquées'):
        read_ply(path)


def test_bad_ascii_value_reports_line(tmp_path):
    path = tmp_path / 'bad.ply'
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n0 0 0\n1 abc 0\n"
    )
    with pytest.raises(PlyFormatError, match='ligne 9'):
        read_ply(path)


def test_unsupported_format(tmp_path):
    path = tmp_path / 'be.ply'
    path.write_text("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(PlyFormatError, match='format'):
        read_ply(path)


def test_missing_coordinate(tmp_path):
    path = tmp_path / 'xy.ply'
    path.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n")
    with pytest.raises(PlyFormatError, match="'z'"):
        read_ply(path)
