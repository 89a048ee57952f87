"""Triangle meshes and finite element fields.

A :class:`TriMesh` is a conforming triangulation with tagged boundary
edges.  A :class:`Field` is a P1, P2 or DG0 (cellwise constant) function
over a mesh; coefficients are stored flat, node-major, components
interleaved per node:

    ``coefficients[value_dim * a + d]``  for node ``a``, component ``d``.

P2 nodes are ordered vertices first, then edge midpoints; edges are
enumerated sorted by (min vertex id, max vertex id) so file round-trips
are reproducible.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCellError, MeshMotionError

VALID_SPACES = ("P1", "P2", "DG0")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class TriMesh:
    """Conforming triangle mesh with tagged boundary edges.

    Parameters
    ----------
    vertices : (n_v, 2) float array
    cells : (n_c, 3) int array, counter-clockwise
    boundary_edges : (n_b, 2) int array
        Vertex pairs; orientation is not significant.
    boundary_tags : sequence of str, length n_b
        One tag per boundary edge; the tag sets partition the boundary.

    All arrays are validated and frozen: cells must have strictly positive
    signed area, every boundary edge must belong to exactly one cell, and
    the supplied boundary must coincide with the topological boundary.
    """

    def __init__(self, vertices, cells, boundary_edges, boundary_tags):
        self.vertices = _freeze(np.asarray(vertices, dtype=float).reshape(-1, 2))
        self.cells = _freeze(np.asarray(cells, dtype=np.int64).reshape(-1, 3))
        be = np.asarray(boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.boundary_edges = _freeze(np.sort(be, axis=1))
        self.boundary_tags = tuple(str(t) for t in boundary_tags)
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise MeshMotionError("one tag per boundary edge required")
        self._validate()
        self._edges = None
        self._cell_edges = None

    # -- topology ---------------------------------------------------------

    def _validate(self):
        areas = self.cell_areas()
        bad = np.where(areas <= 0.0)[0]
        if bad.size:
            raise DegenerateCellError(bad[0])
        topo = self._topological_boundary()
        given = {tuple(e) for e in self.boundary_edges}
        if given != topo:
            raise MeshMotionError(
                "boundary edges do not match the topological boundary "
                f"({len(given)} given, {len(topo)} actual)"
            )
        if len(given) != len(self.boundary_edges):
            raise MeshMotionError("duplicate boundary edges")

    def _topological_boundary(self):
        e = np.sort(
            np.concatenate(
                [self.cells[:, [0, 1]], self.cells[:, [1, 2]], self.cells[:, [2, 0]]]
            ),
            axis=1,
        )
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(row) for row in uniq[counts == 1]}

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted by (min id, max id)."""
        self._build_edges()
        return self._edges

    @property
    def cell_edges(self) -> np.ndarray:
        """(n_c, 3) global edge index of local edges (0,1), (1,2), (2,0)."""
        self._build_edges()
        return self._cell_edges

    def _build_edges(self):
        if self._edges is not None:
            return
        local = np.concatenate(
            [self.cells[:, [0, 1]], self.cells[:, [1, 2]], self.cells[:, [2, 0]]]
        )
        local = np.sort(local, axis=1)
        uniq, inv = np.unique(local, axis=0, return_inverse=True)
        self._edges = _freeze(uniq)
        self._cell_edges = _freeze(inv.reshape(3, -1).T)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def cell_areas(self) -> np.ndarray:
        v = self.vertices
        c = self.cells
        d1 = v[c[:, 1]] - v[c[:, 0]]
        d2 = v[c[:, 2]] - v[c[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    # -- boundary ---------------------------------------------------------

    @property
    def tags(self) -> dict[str, np.ndarray]:
        """Map tag name -> indices into ``boundary_edges``."""
        out: dict[str, list[int]] = {}
        for i, t in enumerate(self.boundary_tags):
            out.setdefault(t, []).append(i)
        return {k: np.array(v, dtype=np.int64) for k, v in out.items()}

    def boundary_vertex_set(self, tag_names=None) -> np.ndarray:
        """Sorted vertex ids on the selected boundary tags (default: all)."""
        sel = self._select_edges(tag_names)
        return np.unique(self.boundary_edges[sel])

    def boundary_node_set(self, space: str, tag_names=None) -> np.ndarray:
        """Sorted node ids of ``space`` on the selected boundary tags."""
        sel = self._select_edges(tag_names)
        verts = np.unique(self.boundary_edges[sel])
        if space == "P1":
            return verts
        if space == "P2":
            edge_ids = self._boundary_edge_global_ids()[sel]
            return np.unique(np.concatenate([verts, self.n_vertices + edge_ids]))
        raise MeshMotionError(f"no boundary nodes for space {space}")

    def _select_edges(self, tag_names):
        if tag_names is None:
            return np.arange(len(self.boundary_edges))
        tag_names = (tag_names,) if isinstance(tag_names, str) else tuple(tag_names)
        mask = np.array([t in tag_names for t in self.boundary_tags])
        return np.where(mask)[0]

    def _boundary_edge_global_ids(self) -> np.ndarray:
        # boundary edges are normalized (min, max); mesh edges are unique sorted
        self._build_edges()
        key = self._edges[:, 0] * (self.n_vertices + 1) + self._edges[:, 1]
        bkey = (
            self.boundary_edges[:, 0] * (self.n_vertices + 1)
            + self.boundary_edges[:, 1]
        )
        idx = np.searchsorted(key, bkey)
        if not np.array_equal(key[idx], bkey):
            raise MeshMotionError("boundary edge not found among mesh edges")
        return idx

    # -- nodes ------------------------------------------------------------

    def node_coords(self, space: str) -> np.ndarray:
        """Coordinates of the nodes of ``space`` (P1/P2; DG0 -> centroids)."""
        if space == "P1":
            return self.vertices
        if space == "P2":
            mid = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
            return np.vstack([self.vertices, mid])
        if space == "DG0":
            return self.vertices[self.cells].mean(axis=1)
        raise MeshMotionError(f"unknown space {space}")

    def n_nodes(self, space: str) -> int:
        if space == "P1":
            return self.n_vertices
        if space == "P2":
            return self.n_vertices + self.n_edges
        if space == "DG0":
            return self.n_cells
        raise MeshMotionError(f"unknown space {space}")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "cells": self.cells.tolist(),
            "boundary": [
                {"edge": [int(e[0]), int(e[1])], "tag": t}
                for e, t in zip(self.boundary_edges, self.boundary_tags)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriMesh":
        edges = [rec["edge"] for rec in d["boundary"]]
        tags = [rec["tag"] for rec in d["boundary"]]
        return cls(d["vertices"], d["cells"], edges, tags)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TriMesh":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def from_cells(cls, vertices, cells, tag_of_midpoint) -> "TriMesh":
        """Build a mesh, deriving boundary edges topologically.

        ``tag_of_midpoint`` maps the midpoint coordinates of a boundary
        edge to its tag name.
        """
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        e = np.sort(
            np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]]),
            axis=1,
        )
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        bedges = uniq[counts == 1]
        mids = 0.5 * (vertices[bedges[:, 0]] + vertices[bedges[:, 1]])
        tags = [tag_of_midpoint(m) for m in mids]
        return cls(vertices, cells, bedges, tags)


@dataclass(frozen=True)
class Field:
    """Finite element function over a :class:`TriMesh`.

    ``coefficients`` has length ``value_dim * mesh.n_nodes(space)``, stored
    node-major with components interleaved.
    """

    mesh: TriMesh
    space: str
    value_dim: int
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.space not in VALID_SPACES:
            raise MeshMotionError(f"unknown space {self.space}")
        coeffs = _freeze(np.asarray(self.coefficients, dtype=float).ravel())
        object.__setattr__(self, "coefficients", coeffs)
        expected = self.value_dim * self.mesh.n_nodes(self.space)
        if len(coeffs) != expected:
            raise MeshMotionError(
                f"{self.space} field with value_dim {self.value_dim} needs "
                f"{expected} coefficients, got {len(coeffs)}"
            )
        if not np.all(np.isfinite(coeffs)):
            raise MeshMotionError("non-finite field coefficients")

    @classmethod
    def zeros(cls, mesh: TriMesh, space: str, value_dim: int) -> "Field":
        return cls(mesh, space, value_dim, np.zeros(value_dim * mesh.n_nodes(space)))

    @classmethod
    def from_callable(cls, mesh: TriMesh, space: str, fn, value_dim: int) -> "Field":
        """Interpolate ``fn(points) -> (n, value_dim)`` at the space's nodes."""
        pts = mesh.node_coords(space)
        vals = np.asarray(fn(pts), dtype=float).reshape(len(pts), value_dim)
        return cls(mesh, space, value_dim, vals.ravel())

    def node_values(self) -> np.ndarray:
        """(n_nodes, value_dim) view of the coefficients."""
        return self.coefficients.reshape(-1, self.value_dim)

    def vertex_values(self) -> np.ndarray:
        """Values at mesh vertices ((n_v, value_dim); DG0 not supported)."""
        if self.space == "DG0":
            raise MeshMotionError("DG0 fields have no vertex values")
        return self.node_values()[: self.mesh.n_vertices]

    def with_coefficients(self, coefficients) -> "Field":
        return Field(self.mesh, self.space, self.value_dim, coefficients)

    def __add__(self, other: "Field") -> "Field":
        self._check_compatible(other)
        return self.with_coefficients(self.coefficients + other.coefficients)

    def __sub__(self, other: "Field") -> "Field":
        self._check_compatible(other)
        return self.with_coefficients(self.coefficients - other.coefficients)

    def _check_compatible(self, other: "Field"):
        if self.space != other.space or self.value_dim != other.value_dim:
            raise MeshMotionError("incompatible fields")
        if len(self.coefficients) != len(other.coefficients):
            raise MeshMotionError("coefficient length mismatch")

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "value_dim": self.value_dim,
            "coefficients": self.coefficients.tolist(),
        }

    @classmethod
    def from_dict(cls, mesh: TriMesh, d: dict) -> "Field":
        return cls(mesh, d["space"], int(d["value_dim"]), np.array(d["coefficients"]))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, mesh: TriMesh, path) -> "Field":
        with open(path) as f:
            return cls.from_dict(mesh, json.load(f))


def deform(mesh: TriMesh, displacement: Field) -> TriMesh:
    """Move mesh vertices by the vertex values of ``displacement``.

    Connectivity and boundary tags are preserved.  Raises
    :class:`DegenerateCellError` (with the offending cell index) if any
    moved cell has non-positive area.
    """
    if displacement.value_dim != 2:
        raise MeshMotionError("deform needs a vector displacement")
    moved = mesh.vertices + displacement.vertex_values()
    return TriMesh(moved, mesh.cells, mesh.boundary_edges, mesh.boundary_tags)
