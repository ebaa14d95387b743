"""P1 finite-element operators on the free nodes of one mesh level."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, MeshLevel
from .quadrature import quadrature_points

SourceFunction = Callable[[np.ndarray], np.ndarray]

DEFAULT_QUAD_ORDER = 4


def p1_gradients(level: MeshLevel) -> np.ndarray:
    """Constant gradients of the barycentric coordinates, shape ``(n_el, dim+1, dim)``."""
    coords = level.elem_coords
    B = coords[:, 1:, :] - coords[:, :1, :]
    det = np.linalg.det(B)
    if np.any(np.abs(det) <= 1e-300):
        raise MeshError("degenerate element in P1 gradient computation")
    Binv = np.linalg.inv(B)
    grads = np.empty((level.n_elements, level.dim + 1, level.dim))
    grads[:, 1:, :] = np.transpose(Binv, (0, 2, 1))
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return grads


def local_stiffness(level: MeshLevel) -> np.ndarray:
    g = p1_gradients(level)
    return level.elem_volume[:, None, None] * np.einsum("eid,ejd->eij", g, g)


def local_mass(level: MeshLevel) -> np.ndarray:
    """Exact P1 element mass matrices ``|K| (1 + delta_ij) / ((d+1)(d+2))``."""
    d = level.dim
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    vol = level.elem_volume
    if np.any(vol <= 0.0):
        raise MeshError("degenerate element with zero volume")
    return vol[:, None, None] * ref[None, :, :]


def _scatter(level: MeshLevel, local: np.ndarray, drop_tol: float = 0.0) -> sp.csr_matrix:
    """Sum element matrices into a CSR matrix over the free nodes."""
    el = level.elements
    nv = el.shape[1]
    rows = np.repeat(el, nv, axis=1).ravel()
    cols = np.tile(el, (1, nv)).ravel()
    vals = local.ravel()
    keep = (rows < level.n_free) & (cols < level.n_free)
    n = level.n_free
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    if drop_tol > 0.0 and mat.nnz:
        # entries that cancel analytically (e.g. diagonal edges of the 2D split)
        scale = np.abs(mat.diagonal()).max()
        mat.data[np.abs(mat.data) <= drop_tol * scale] = 0.0
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def assemble_stiffness(level: MeshLevel) -> sp.csr_matrix:
    """Stiffness matrix ``[A]_mn = int grad phi_n . grad phi_m`` over the free nodes."""
    return _scatter(level, local_stiffness(level), drop_tol=1e-13)


def assemble_mass(level: MeshLevel) -> sp.csr_matrix:
    return _scatter(level, local_mass(level))


def local_scaled_mass(level: MeshLevel) -> tuple[np.ndarray, np.ndarray]:
    """Element matrices weighted by ``h_K**-2`` and free-node element counts.

    Returns
    -------
    local : ndarray, shape (n_elements, dim + 1, dim + 1)
        Full local scaled mass matrices (all vertices, free or not).
    multiplicity : ndarray, shape (n_free,)
        Number of elements having each free node as a vertex.
    """
    local = local_mass(level) / level.elem_diameter[:, None, None] ** 2
    counts = np.bincount(level.elements.ravel(), minlength=level.n_nodes)
    return local, counts[: level.n_free]


def assemble_scaled_mass(level: MeshLevel) -> sp.csr_matrix:
    """Mass matrix with the elementwise weight ``h_K**-2``."""
    return _scatter(level, local_scaled_mass(level)[0])


def assemble_load(level: MeshLevel, f: SourceFunction, quad_order: int = DEFAULT_QUAD_ORDER) -> np.ndarray:
    """Load vector ``[f]_m = int f phi_m`` by simplex quadrature."""
    if quad_order < 1:
        raise ValueError(f"quad_order must be at least 1, got {quad_order}")
    points, bary, w = quadrature_points(level.elem_coords, quad_order)
    fv = np.asarray(f(points.reshape(-1, level.dim)), dtype=float).reshape(points.shape[:2])
    local = level.elem_volume[:, None] * np.einsum("eq,q,qv->ev", fv, w, bary)
    full = np.bincount(level.elements.ravel(), weights=local.ravel(), minlength=level.n_nodes)
    return full[: level.n_free]


@dataclass(frozen=True, eq=False)
class LevelOperators:
    """Assembled operators of one level, all restricted to the free nodes."""

    A: sp.csr_matrix
    M: sp.csr_matrix
    Ms: sp.csr_matrix
    D: np.ndarray
    local_scaled_mass: np.ndarray
    node_multiplicity: np.ndarray
    free_vertex_mask: np.ndarray
    elements: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]


def assemble_level(level: MeshLevel) -> LevelOperators:
    A = assemble_stiffness(level)
    M = assemble_mass(level)
    local, mult = local_scaled_mass(level)
    Ms = _scatter(level, local)
    D = A.diagonal().copy()
    if np.any(D <= 0.0):
        raise MeshError("stiffness matrix has a nonpositive diagonal entry")
    return LevelOperators(
        A=A, M=M, Ms=Ms, D=D,
        local_scaled_mass=local,
        node_multiplicity=mult,
        free_vertex_mask=level.free_vertex_mask(),
        elements=level.elements,
    )


def local_mass_min_eigenvalue(level: MeshLevel) -> float:
    """Smallest eigenvalue over all (unscaled) local mass matrices of ``level``."""
    return float(np.linalg.eigvalsh(local_mass(level)).min())
