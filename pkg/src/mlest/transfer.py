"""Prolongation between nested P1 spaces and restriction of residual vectors."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import MeshHierarchy


@dataclass(frozen=True, eq=False)
class Prolongation:
    """Interpolation of level ``level_from`` coefficients onto level ``level_to``."""

    P: sp.csr_matrix
    level_from: int
    level_to: int


def build_prolongation(hierarchy: MeshHierarchy, j: int) -> Prolongation:
    """P1 interpolation matrix from level ``j`` to level ``j + 1`` (free nodes only).

    Every fine node is either a coarse node (weight 1) or the midpoint of a
    coarse mesh edge joining ``base`` and ``base + s`` with ``s`` a 0/1 grid
    offset (weight 1/2 each).  Both splittings used here contain every such
    edge, so this is exact interpolation of the coarse hat functions.
    """
    if not 0 <= j < hierarchy.J:
        raise IndexError(f"prolongation level {j} out of range for J={hierarchy.J}")
    coarse, fine = hierarchy[j], hierarchy[j + 1]
    cells = coarse.cells
    strides = (cells + 1) ** np.arange(coarse.dim)
    coarse_of_lex = np.full((cells + 1) ** coarse.dim, -1, dtype=np.int64)
    coarse_of_lex[coarse.grid_index @ strides] = np.arange(coarse.n_nodes)

    fg = fine.grid_index[: fine.n_free]
    base, odd = np.divmod(fg, 2)
    first = coarse_of_lex[base @ strides]
    second = coarse_of_lex[(base + odd) @ strides]
    coincident = ~odd.any(axis=1)

    rows = np.concatenate([np.flatnonzero(coincident), np.flatnonzero(~coincident), np.flatnonzero(~coincident)])
    cols = np.concatenate([first[coincident], first[~coincident], second[~coincident]])
    vals = np.concatenate([np.ones(coincident.sum()), np.full(2 * (~coincident).sum(), 0.5)])
    keep = cols < coarse.n_free
    P = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(fine.n_free, coarse.n_free)).tocsr()
    P.sort_indices()
    return Prolongation(P=P, level_from=j, level_to=j + 1)


def build_prolongations(hierarchy: MeshHierarchy) -> list[Prolongation]:
    return [build_prolongation(hierarchy, j) for j in range(hierarchy.J)]


def _matrix(p) -> sp.csr_matrix:
    return p.P if isinstance(p, Prolongation) else p


def restrict_residuals(r_J: np.ndarray, prolongations: Sequence) -> list[np.ndarray]:
    """Residual vectors ``r_j = (P_j^J)^T r_J`` for ``j = 0..J`` (coarse first).

    ``prolongations[j]`` maps level ``j`` to ``j + 1``; either
    :class:`Prolongation` objects or bare sparse matrices are accepted.
    """
    r = np.asarray(r_J, dtype=float)
    mats = [_matrix(p) for p in prolongations]
    if mats and r.shape[0] != mats[-1].shape[0]:
        raise ValueError(
            f"residual length {r.shape[0]} does not match finest level size {mats[-1].shape[0]}"
        )
    out = [r]
    for P in reversed(mats):
        if P.shape[0] != out[-1].shape[0]:
            raise ValueError("prolongation chain has inconsistent dimensions")
        out.append(P.T @ out[-1])
    return out[::-1]


def accumulated_prolongation(prolongations: Sequence, j: int) -> sp.csr_matrix:
    """Product ``P_j^J`` mapping level ``j`` straight to the finest level (identity for ``j = J``)."""
    mats = [_matrix(p) for p in prolongations]
    if not mats or not 0 <= j <= len(mats):
        raise IndexError(f"level {j} out of range for {len(mats)} prolongations")
    n = mats[j].shape[1] if j < len(mats) else mats[-1].shape[0]
    acc = sp.identity(n, format="csr")
    for P in mats[j:]:
        acc = P @ acc
    return acc.tocsr()
