import json

import numpy as np
import pytest

from meshmotion.errors import DegenerateCellError, MeshMotionError
from meshmotion.mesh import Field, TriMesh, deform
from meshmotion.geometry import unit_square_mesh


def single_triangle():
    return TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]],
                   [[0, 1], [1, 2], [2, 0]], ["fixed"] * 3)


def test_negative_area_cell_rejected():
    with pytest.raises(DegenerateCellError) as err:
        TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]],
                [[0, 1], [1, 2], [2, 0]], ["fixed"] * 3)
    assert err.value.cell == 0


def test_boundary_must_match_topology():
    with pytest.raises(MeshMotionError):
        TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]],
                [[0, 1], [1, 2]], ["fixed"] * 2)


def test_tags_partition_boundary(square4):
    tags = square4.tags
    total = sum(len(v) for v in tags.values())
    assert total == len(square4.boundary_edges)
    assert set(tags) == {"moving", "fixed"}


def test_edge_enumeration_sorted(square4):
    e = square4.edges
    assert np.all(e[:, 0] < e[:, 1])
    order = np.lexsort((e[:, 1], e[:, 0]))
    assert np.array_equal(order, np.arange(len(e)))


def test_field_coefficient_length():
    m = single_triangle()
    assert Field.zeros(m, "P1", 2).coefficients.shape == (6,)
    assert Field.zeros(m, "P2", 2).coefficients.shape == (12,)
    assert Field.zeros(m, "DG0", 1).coefficients.shape == (1,)
    with pytest.raises(MeshMotionError):
        Field(m, "P1", 2, np.zeros(5))
    with pytest.raises(MeshMotionError):
        Field(m, "P1", 1, [np.nan, 0.0, 0.0])


def test_mesh_json_roundtrip(tmp_path, square4):
    path = tmp_path / "mesh.json"
    square4.save(path)
    again = TriMesh.load(path)
    assert np.array_equal(again.vertices, square4.vertices)
    assert np.array_equal(again.cells, square4.cells)
    assert again.boundary_tags == square4.boundary_tags
    # byte-stable rewrite
    path2 = tmp_path / "mesh2.json"
    again.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_field_json_roundtrip(tmp_path, square4):
    rng = np.random.Generator(np.random.Philox(0))
    f = Field(square4, "P2", 2, rng.standard_normal(2 * square4.n_nodes("P2")))
    path = tmp_path / "field.json"
    f.save(path)
    g = Field.load(square4, path)
    assert np.array_equal(f.coefficients, g.coefficients)


def test_deform_zero_and_translation(square4):
    u0 = Field.zeros(square4, "P1", 2)
    assert np.array_equal(deform(square4, u0).vertices, square4.vertices)
    shift = Field(square4, "P1", 2,
                  np.tile([0.1, 0.0], square4.n_vertices))
    moved = deform(square4, shift)
    assert np.allclose(moved.vertices, square4.vertices + [0.1, 0.0])
    assert moved.boundary_tags == square4.boundary_tags


def test_deform_fold_raises_with_cell(square4):
    # push one interior vertex far across the mesh
    vals = np.zeros((square4.n_vertices, 2))
    interior = np.setdiff1d(np.arange(square4.n_vertices),
                            square4.boundary_vertex_set())
    vals[interior[0]] = [2.0, 2.0]
    u = Field(square4, "P1", 2, vals.ravel())
    with pytest.raises(DegenerateCellError) as err:
        deform(square4, u)
    assert 0 <= err.value.cell < square4.n_cells


def test_deform_roundtrip_small_displacement(square4):
    rng = np.random.Generator(np.random.Philox(3))
    vals = 0.01 * rng.standard_normal((square4.n_vertices, 2))
    u = Field(square4, "P1", 2, vals.ravel())
    moved = deform(square4, u)
    back = deform(moved, Field(moved, "P1", 2, -vals.ravel()))
    assert np.abs(back.vertices - square4.vertices).max() < 1e-12


def test_fields_immutable(square4):
    f = Field.zeros(square4, "P1", 1)
    with pytest.raises(ValueError):
        f.coefficients[0] = 1.0
    with pytest.raises(ValueError):
        square4.vertices[0, 0] = 9.0
