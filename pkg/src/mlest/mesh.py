"""Uniformly refined simplicial meshes of the unit square and unit cube.

Level ``j`` of a hierarchy is the structured grid with ``cells0 * 2**j`` cells
per axis.  Squares are split into two triangles along the (0,0)-(1,1)
diagonal and cubes into the six Kuhn tetrahedra sharing the main diagonal.
Both splittings are closed under dyadic refinement, so regenerating the grid
at the finer resolution gives exactly the refined mesh of the coarser one.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class MeshError(ValueError):
    """Invalid mesh parameters or degenerate geometry."""


def _kuhn_offsets(dim: int) -> np.ndarray:
    """Corner offsets of the simplices splitting one grid cell.

    Returns an integer array of shape ``(n_simplices, dim + 1, dim)``.
    """
    if dim == 2:
        return np.array(
            [[[0, 0], [1, 0], [1, 1]],
             [[0, 0], [1, 1], [0, 1]]],
            dtype=np.int64,
        )
    simplices = []
    for perm in itertools.permutations(range(dim)):
        corner = np.zeros(dim, dtype=np.int64)
        verts = [corner.copy()]
        for axis in perm:
            corner[axis] += 1
            verts.append(corner.copy())
        simplices.append(verts)
    return np.array(simplices, dtype=np.int64)


def _simplex_volumes(coords: np.ndarray) -> np.ndarray:
    """Volumes of simplices given vertex coordinates ``(n, dim+1, dim)``."""
    dim = coords.shape[2]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    return np.abs(np.linalg.det(edges)) / math.factorial(dim)


def _face_measures(coords: np.ndarray) -> np.ndarray:
    """Measures of the ``dim + 1`` facets of each simplex.

    Facet ``i`` is the one opposite to local vertex ``i``.
    """
    n, nv, dim = coords.shape
    out = np.empty((n, nv))
    for i in range(nv):
        face = np.delete(coords, i, axis=1)
        vec = face[:, 1:, :] - face[:, :1, :]
        if dim == 2:
            out[:, i] = np.linalg.norm(vec[:, 0, :], axis=1)
        else:
            out[:, i] = 0.5 * np.linalg.norm(np.cross(vec[:, 0, :], vec[:, 1, :]), axis=1)
    return out


def _diameters(coords: np.ndarray) -> np.ndarray:
    nv = coords.shape[1]
    h = np.zeros(coords.shape[0])
    for a, b in itertools.combinations(range(nv), 2):
        h = np.maximum(h, np.linalg.norm(coords[:, a, :] - coords[:, b, :], axis=1))
    return h


@dataclass(frozen=True, eq=False)
class MeshLevel:
    """One simplicial mesh of ``[0, 1]^dim``.

    Attributes
    ----------
    dim : int
        Spatial dimension, 2 or 3.
    cells : int
        Grid cells per axis.
    nodes : ndarray, shape (n_nodes, dim)
        Node coordinates.  Free (interior) nodes come first.
    elements : ndarray, shape (n_elements, dim + 1)
        Vertex indices of every simplex.
    n_free : int
        Number of free nodes; ``free_nodes == arange(n_free)``.
    grid_index : ndarray, shape (n_nodes, dim)
        Integer grid coordinates of every node, ``nodes == grid_index / cells``.
    """

    dim: int
    cells: int
    nodes: np.ndarray
    elements: np.ndarray
    n_free: int
    grid_index: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def free_nodes(self) -> np.ndarray:
        return np.arange(self.n_free)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.arange(self.n_free, self.n_nodes)

    @cached_property
    def elem_coords(self) -> np.ndarray:
        return self.nodes[self.elements]

    @cached_property
    def elem_volume(self) -> np.ndarray:
        return _simplex_volumes(self.elem_coords)

    @cached_property
    def elem_diameter(self) -> np.ndarray:
        """Euclidean diameter ``h_K`` (longest edge) of every element."""
        return _diameters(self.elem_coords)

    @cached_property
    def elem_face_measure(self) -> np.ndarray:
        return _face_measures(self.elem_coords)

    @cached_property
    def elem_rho(self) -> np.ndarray:
        """Diameter ``rho_K`` of the largest ball inscribed in every element.

        The inradius is ``dim * |K| / sum of facet measures``; this returns
        twice that.
        """
        return 2.0 * self.dim * self.elem_volume / self.elem_face_measure.sum(axis=1)

    @cached_property
    def _faces(self):
        nv = self.dim + 1
        local = np.array([[k for k in range(nv) if k != i] for i in range(nv)])
        faces = np.sort(self.elements[:, local], axis=2).reshape(-1, self.dim)
        owner = np.repeat(np.arange(self.n_elements), nv)
        opposite = np.tile(np.arange(nv), self.n_elements)
        uniq, inverse, counts = np.unique(faces, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if counts.max() > 2:
            raise MeshError("non-matching mesh: a face is shared by more than two elements")
        order = np.argsort(inverse, kind="stable")
        sorted_inv = inverse[order]
        starts = np.searchsorted(sorted_inv, np.arange(uniq.shape[0]))
        first = order[starts]
        interior = counts == 2
        second = np.full(uniq.shape[0], -1)
        second[interior] = order[starts[interior] + 1]
        return uniq, owner, opposite, first, second, interior

    @property
    def interior_faces(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interior faces as ``(face_nodes, left_element, right_element)`` arrays."""
        uniq, owner, _, first, second, interior = self._faces
        return uniq[interior], owner[first[interior]], owner[second[interior]]

    @property
    def interior_face_local(self) -> tuple[np.ndarray, np.ndarray]:
        """Local index (opposite vertex) of each interior face in its left/right element."""
        _, _, opposite, first, second, interior = self._faces
        return opposite[first[interior]], opposite[second[interior]]

    @property
    def boundary_faces(self) -> tuple[np.ndarray, np.ndarray]:
        uniq, owner, _, first, _, interior = self._faces
        return uniq[~interior], owner[first[~interior]]

    def free_vertex_mask(self) -> np.ndarray:
        """Boolean ``(n_elements, dim + 1)`` mask of vertices that are free nodes."""
        return self.elements < self.n_free

    def to_json(self) -> str:
        return json.dumps({
            "dim": self.dim,
            "cells": self.cells,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "free_nodes": self.free_nodes.tolist(),
        })


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """Nested meshes ordered coarse to fine."""

    levels: list[MeshLevel] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.levels[0].dim

    @property
    def cells0(self) -> int:
        return self.levels[0].cells

    @property
    def J(self) -> int:
        """Index of the finest level."""
        return len(self.levels) - 1

    @property
    def h0(self) -> float:
        return float(self.levels[0].elem_diameter.max())

    @property
    def h_omega(self) -> float:
        return math.sqrt(self.dim)

    @cached_property
    def gamma(self) -> float:
        return shape_regularity(self.levels[0])

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, j: int) -> MeshLevel:
        return self.levels[j]


def build_level(dim: int, cells: int) -> MeshLevel:
    """Structured simplicial mesh with ``cells`` grid cells per axis."""
    if dim not in (2, 3):
        raise MeshError(f"dim must be 2 or 3, got {dim}")
    if cells < 1:
        raise MeshError(f"cells must be positive, got {cells}")
    n1 = cells + 1
    # lexicographic (z, y, x) order: x varies fastest
    grid = np.stack(np.meshgrid(*([np.arange(n1)] * dim), indexing="ij"), axis=-1)
    grid = grid.reshape(-1, dim)[:, ::-1]
    interior = np.all((grid > 0) & (grid < cells), axis=1)
    perm = np.concatenate([np.flatnonzero(interior), np.flatnonzero(~interior)])
    grid_index = np.ascontiguousarray(grid[perm])
    node_of_lex = np.empty(grid.shape[0], dtype=np.int64)
    node_of_lex[perm] = np.arange(grid.shape[0])

    strides = n1 ** np.arange(dim)
    cell_grid = np.stack(np.meshgrid(*([np.arange(cells)] * dim), indexing="ij"), axis=-1)
    cell_grid = cell_grid.reshape(-1, dim)[:, ::-1]
    offsets = _kuhn_offsets(dim)
    corners = cell_grid[:, None, None, :] + offsets[None, :, :, :]
    lex = corners @ strides
    elements = node_of_lex[lex].reshape(-1, dim + 1)

    return MeshLevel(
        dim=dim,
        cells=cells,
        nodes=grid_index / cells,
        elements=elements,
        n_free=int(interior.sum()),
        grid_index=grid_index,
    )


def build_hierarchy(dim: int, cells0: int, num_levels: int) -> MeshHierarchy:
    """Build ``num_levels`` nested meshes, level ``j`` having ``cells0 * 2**j`` cells per axis."""
    if cells0 < 2:
        raise MeshError(f"cells0 must be at least 2 to have an interior node, got {cells0}")
    if num_levels < 1:
        raise MeshError(f"num_levels must be at least 1, got {num_levels}")
    return MeshHierarchy([build_level(dim, cells0 * 2**j) for j in range(num_levels)])


def shape_regularity(level: MeshLevel) -> float:
    """Shape-regularity constant ``max_K h_K / rho_K``."""
    rho = level.elem_rho
    if np.any(rho <= 0.0):
        raise MeshError("degenerate element with zero inscribed ball")
    return float(np.max(level.elem_diameter / rho))


def domain_ratio(hierarchy: MeshHierarchy) -> float:
    """``h_Omega**2 / min_K h_K**2`` over the coarsest mesh."""
    level = hierarchy.levels[0]
    # exact in integer grid units: h_K**2 = (longest integer edge)**2 / cells**2
    gi = level.grid_index[level.elements]
    sq = np.zeros(level.n_elements, dtype=np.int64)
    for a, b in itertools.combinations(range(level.dim + 1), 2):
        sq = np.maximum(sq, ((gi[:, a] - gi[:, b]) ** 2).sum(axis=1))
    return level.dim * level.cells**2 / int(sq.min())
