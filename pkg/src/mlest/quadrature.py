"""Grundmann-Moeller quadrature on simplices."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


def _compositions(total: int, parts: int):
    """All tuples of ``parts`` nonnegative integers summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def grundmann_moller(dim: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Grundmann-Moeller rule exact for polynomials of degree ``order``.

    The rule with parameter ``s`` has degree ``2s + 1``; the smallest ``s``
    reaching ``order`` is used.

    Returns
    -------
    bary : ndarray, shape (n_points, dim + 1)
        Barycentric coordinates of the points.
    weights : ndarray, shape (n_points,)
        Weights relative to the simplex volume (they sum to one).  Some are
        negative.
    """
    if order < 0:
        raise ValueError(f"quadrature order must be nonnegative, got {order}")
    s = max(0, math.ceil((order - 1) / 2))
    d = 2 * s + 1
    n = dim
    points, weights = [], []
    for i in range(s + 1):
        denom = d + n - 2 * i
        coef = (-1) ** i * 2.0 ** (-2 * s) * denom**d / (math.factorial(i) * math.factorial(d + n - i))
        for beta in _compositions(s - i, n + 1):
            points.append([(2 * b + 1) / denom for b in beta])
            weights.append(coef)
    bary = np.array(points)
    w = np.array(weights) * math.factorial(n)
    bary.setflags(write=False)
    w.setflags(write=False)
    return bary, w


def quadrature_points(elem_coords: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical quadrature points for every element.

    Returns ``(points, bary, weights)`` with ``points`` of shape
    ``(n_elements, n_points, dim)``.
    """
    dim = elem_coords.shape[2]
    bary, w = grundmann_moller(dim, order)
    points = np.einsum("qv,evd->eqd", bary, elem_coords)
    return points, bary, w
