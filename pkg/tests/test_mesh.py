from collections import Counter

import numpy as np
import pytest

from voxfield.mesh import TRI_COUNT, Mesh, MeshLayer, extract_mesh, read_ply, write_ply
from voxfield.voxel_store import Layer, TsdfVoxel


def _field_layer(fn, lo=-6, hi=6, v=0.1, vps=8):
    layer = Layer(v, vps)
    r = np.arange(lo, hi)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    blocks = np.unique(np.floor_divide(g, vps), axis=0)
    slots = layer.allocate_blocks(blocks)
    idx = layer.voxel_global_indices(slots)
    inside = np.all((idx >= lo) & (idx < hi), axis=-1)
    layer.data["distance"][slots] = fn((idx + 0.5) * v).astype(np.float32)
    layer.data["weight"][slots] = np.where(inside, 1.0, 0.0)
    return layer


def test_table_shape():
    assert TRI_COUNT[0] == 0 and TRI_COUNT[255] == 0
    assert TRI_COUNT.max() <= 5
    assert (TRI_COUNT[1:255] > 0).all()


@pytest.mark.parametrize("seed", range(5))
def test_affine_plane_vertices_exact(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    c = rng.uniform(-0.1, 0.1)
    mesh = extract_mesh(_field_layer(lambda p: p @ n + c))
    assert mesh.n_triangles > 0
    assert np.abs(mesh.vertices @ n + c).max() <= 1e-6
    np.testing.assert_allclose(mesh.normals, np.broadcast_to(n, mesh.normals.shape), atol=1e-5)
    # counter-clockwise seen from the positive side
    tri = mesh.triangles
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert (face_n @ n > 0).all()


def test_sphere_is_closed_and_outward():
    mesh = extract_mesh(_field_layer(lambda p: np.linalg.norm(p, axis=-1) - 0.33))
    keys = np.round(mesh.vertices, 9)
    edges = Counter()
    for t in keys.reshape(-1, 3, 3):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges[(tuple(t[a]), tuple(t[b]))] += 1
    unmatched = [e for e in edges if edges[(e[1], e[0])] != edges[e]]
    assert not unmatched
    tri = mesh.triangles
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert (np.einsum("ij,ij->i", face_n, tri.mean(axis=1)) > 0).all()
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.33).max() < 0.02


def test_unobserved_cubes_are_skipped():
    layer = _field_layer(lambda p: p[..., 2] - 0.01)
    full = extract_mesh(layer).n_triangles
    layer.set_voxel((0, 0, 0), TsdfVoxel(0.0, 0.0))
    assert extract_mesh(layer).n_triangles < full


def test_empty_layer_gives_empty_mesh(tmp_path):
    mesh = extract_mesh(Layer(0.1))
    assert mesh.n_triangles == 0
    write_ply(mesh, tmp_path / "e.ply")
    assert read_ply(tmp_path / "e.ply").n_triangles == 0


def test_mesh_layer_incremental_matches_full():
    layer = Layer(0.1, 8)
    ml = MeshLayer(layer)
    rng = np.random.default_rng(4)
    for step in range(4):
        c = rng.uniform(-0.3, 0.3, size=3)
        for g in rng.integers(-10, 10, size=(300, 3)):
            d = float(np.linalg.norm((g + 0.5) * 0.1 - c) - 0.4)
            layer.set_voxel(tuple(g), TsdfVoxel(d, 1.0))
        ml.update()
        inc = ml.mesh()
        full = extract_mesh(layer)
        assert sorted(map(tuple, np.round(inc.vertices, 9))) == sorted(map(tuple, np.round(full.vertices, 9)))
    assert ml.update() == set()


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip(tmp_path, binary):
    mesh = extract_mesh(_field_layer(lambda p: np.linalg.norm(p, axis=-1) - 0.3))
    mesh = Mesh(mesh.vertices, mesh.normals, np.full(mesh.vertices.shape, 7, np.uint8))
    write_ply(mesh, tmp_path / "m.ply", binary=binary)
    back = read_ply(tmp_path / "m.ply")
    assert back.n_triangles == mesh.n_triangles
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-5)
    np.testing.assert_allclose(back.normals, mesh.normals, atol=1e-5)
    assert (back.colors == 7).all()
