"""Manufactured Poisson problem with a Gaussian bump solution.

``u(x) = prod_k q(x_k)`` with ``q(t) = t (t - 1) exp(-100 (t - 1/2)**2)``,
which vanishes on the boundary of the unit square/cube.
"""

from __future__ import annotations

import numpy as np

WIDTH = 100.0


def _q(t):
    return t * (t - 1.0) * np.exp(-WIDTH * (t - 0.5) ** 2)


def _dq(t):
    e = np.exp(-WIDTH * (t - 0.5) ** 2)
    return ((2.0 * t - 1.0) - 2.0 * WIDTH * (t - 0.5) * t * (t - 1.0)) * e


def _d2q(t):
    s = t - 0.5
    e = np.exp(-WIDTH * s**2)
    return (2.0 - 4.0 * WIDTH * s * (2.0 * t - 1.0) + t * (t - 1.0) * (4.0 * WIDTH**2 * s**2 - 2.0 * WIDTH)) * e


def exact_solution(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.prod(_q(x), axis=1)


def exact_gradient(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    q = _q(x)
    dq = _dq(x)
    dim = x.shape[1]
    out = np.empty_like(x)
    for k in range(dim):
        others = np.prod(np.delete(q, k, axis=1), axis=1)
        out[:, k] = dq[:, k] * others
    return out


def source(x: np.ndarray) -> np.ndarray:
    """Right-hand side ``f = -Laplace(u)``."""
    x = np.atleast_2d(x)
    q = _q(x)
    d2q = _d2q(x)
    lap = np.zeros(x.shape[0])
    for k in range(x.shape[1]):
        lap += d2q[:, k] * np.prod(np.delete(q, k, axis=1), axis=1)
    return -lap


def zero_source(x: np.ndarray) -> np.ndarray:
    return np.zeros(np.atleast_2d(x).shape[0])
