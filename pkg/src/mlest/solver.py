"""Smoothers, conjugate gradients with error bounds, and the multigrid V-cycle."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .assembly import local_mass_min_eigenvalue
from .mesh import MeshHierarchy

log = logging.getLogger(__name__)

DIRECT_SOLVE_CUTOFF = 20000


class SolverError(RuntimeError):
    """Numerical failure inside an iterative or direct solver."""


# ---------------------------------------------------------------------------
# Gauss-Seidel


@numba.njit(cache=True)
def _gs_sweeps(indptr, indices, data, x, b, sweeps, backward):
    n = x.shape[0]
    for _ in range(sweeps):
        for k in range(n):
            i = n - 1 - k if backward else k
            diag = 0.0
            s = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                col = indices[p]
                if col == i:
                    diag += data[p]
                else:
                    s -= data[p] * x[col]
            x[i] = s / diag


def _csr(A) -> sp.csr_matrix:
    A = A if sp.isspmatrix_csr(A) else sp.csr_matrix(A)
    if not A.has_sorted_indices:
        A.sort_indices()
    return A


def gauss_seidel(A, b: np.ndarray, x: np.ndarray, sweeps: int = 1, order: str = "forward") -> np.ndarray:
    """Lexicographic Gauss-Seidel sweeps; returns the updated copy of ``x``."""
    if order not in ("forward", "backward"):
        raise ValueError(f"order must be 'forward' or 'backward', got {order!r}")
    A = _csr(A)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0] or b.shape != x.shape:
        raise ValueError("dimension mismatch in gauss_seidel")
    if np.any(A.diagonal() == 0.0):
        raise SolverError("zero diagonal entry in Gauss-Seidel")
    out = np.array(x, dtype=float, copy=True)
    _gs_sweeps(A.indptr, A.indices, A.data, out, np.asarray(b, dtype=float), int(sweeps), order == "backward")
    return out


# ---------------------------------------------------------------------------
# Conjugate gradients


def cg(A, b: np.ndarray, x0: np.ndarray | None = None, rel_res_tol: float = 1e-10,
       max_iter: int = 1000) -> tuple[np.ndarray, int]:
    """Plain CG stopped on ``||b - A x|| <= rel_res_tol * ||b||`` or ``max_iter``.

    The residual is the recursively updated one.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise SolverError("non-finite right-hand side in CG")
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float, copy=True)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    r = b - A @ x
    rr = r @ r
    p = r.copy()
    it = 0
    while it < max_iter and math.sqrt(rr) > rel_res_tol * bnorm:
        Ap = A @ p
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise SolverError("non-finite values in CG")
        if pAp <= 0.0:
            raise SolverError("nonpositive curvature in CG; matrix is not SPD")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return x, it


@dataclass
class CgTrace:
    """Per-iteration record of a (P)CG run from a zero initial guess.

    Index ``i`` of ``mu_sq_cumulative``, ``zeta_sq`` and ``residual_norms``
    refers to the state after ``i`` iterations (index 0 is the initial state).
    """

    mu_sq_increments: list[float] = field(default_factory=list)
    mu_sq_cumulative: list[float] = field(default_factory=lambda: [0.0])
    zeta_sq: list[float] = field(default_factory=list)
    residual_norms: list[float] = field(default_factory=list)
    iterates: list[np.ndarray] | None = None
    x: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.mu_sq_increments)


class PcgBoundIterator:
    """(P)CG on ``A x = b`` tracking ``mu_i**2`` and the Gauss-Radau bound ``zeta_i**2``.

    ``mu_i**2 = sum_m ||x_{m+1} - x_m||_A**2`` is accumulated from the CG
    coefficients, and ``zeta_i**2 >= ||x - x_i||_A**2`` follows from the
    updating formula for the Gauss-Radau coefficient with prescribed node
    ``lambda_lb <= lambda_min`` of the (preconditioned) matrix::

        g_0 = 1 / lambda_lb
        g_{k+1} = (g_k - gamma_k) / (lambda_lb (g_k - gamma_k) + delta_{k+1})
        zeta_{k+1}**2 = g_{k+1} * (r_{k+1}, z_{k+1})
    """

    def __init__(self, A, b: np.ndarray, lambda_lb: float, preconditioner: str = "none",
                 store_iterates: bool = False):
        if not lambda_lb > 0.0:
            raise ValueError(f"lambda_min lower bound must be positive, got {lambda_lb}")
        if preconditioner not in ("none", "jacobi"):
            raise ValueError(f"unknown preconditioner {preconditioner!r}")
        self.A = A
        b = np.asarray(b, dtype=float)
        if preconditioner == "jacobi":
            dinv = 1.0 / A.diagonal()
            self._apply_prec = lambda v: dinv * v
            # lambda_min(D^-1 A) >= lambda_min(A) / max(D)
            lambda_lb = lambda_lb / A.diagonal().max()
        else:
            self._apply_prec = lambda v: v
        self.lambda_lb = lambda_lb
        self.x = np.zeros_like(b)
        self.r = b.copy()
        self.z = self._apply_prec(self.r)
        self.rz = float(self.r @ self.z)
        self.p = self.z.copy()
        self.g = 1.0 / lambda_lb
        self.trace = CgTrace(iterates=[self.x.copy()] if store_iterates else None)
        self.trace.zeta_sq.append(self.g * self.rz)
        self.trace.residual_norms.append(float(np.linalg.norm(self.r)))
        self.trace.x = self.x

    @property
    def converged(self) -> bool:
        return self.rz == 0.0

    @property
    def mu_sq(self) -> float:
        return self.trace.mu_sq_cumulative[-1]

    @property
    def zeta_sq(self) -> float:
        return self.trace.zeta_sq[-1]

    def step(self) -> None:
        Ap = self.A @ self.p
        pAp = float(self.p @ Ap)
        if not np.isfinite(pAp):
            raise SolverError("non-finite values in PCG")
        if pAp <= 0.0:
            raise SolverError("nonpositive curvature in PCG; matrix is not SPD")
        gamma = self.rz / pAp
        self.x += gamma * self.p
        self.r -= gamma * Ap
        self.z = self._apply_prec(self.r)
        rz_new = float(self.r @ self.z)
        delta = rz_new / self.rz
        # ||x_{k+1} - x_k||_A^2 = gamma^2 p^T A p = gamma (r_k, z_k)
        incr = gamma * self.rz
        diff = self.g - gamma
        denom = self.lambda_lb * diff + delta
        self.g = diff / denom if denom != 0.0 else 0.0
        self.p = self.z + delta * self.p
        self.rz = rz_new

        t = self.trace
        t.mu_sq_increments.append(incr)
        t.mu_sq_cumulative.append(t.mu_sq_cumulative[-1] + incr)
        t.zeta_sq.append(self.g * rz_new)
        t.residual_norms.append(float(np.linalg.norm(self.r)))
        if t.iterates is not None:
            t.iterates.append(self.x.copy())


def pcg_with_error_bounds(A, b: np.ndarray, lambda_min_lb: float, max_iter: int = 1000,
                          preconditioner: str = "none", rel_res_tol: float = 0.0,
                          store_iterates: bool = False) -> CgTrace:
    """Run (P)CG from zero recording ``mu_i**2`` and ``zeta_i**2`` at every iteration.

    Stops after ``max_iter`` iterations, on an exactly zero residual, or when
    ``||r_i|| <= rel_res_tol * ||b||``.
    """
    it = PcgBoundIterator(A, b, lambda_min_lb, preconditioner, store_iterates)
    bnorm = it.trace.residual_norms[0]
    while it.trace.iterations < max_iter and not it.converged:
        if it.trace.residual_norms[-1] <= rel_res_tol * bnorm:
            break
        it.step()
    return it.trace


def lambda_min_lower_bound(hierarchy: MeshHierarchy) -> float:
    """Lower bound on the smallest eigenvalue of the coarsest stiffness matrix.

    Uses the sharp Friedrichs constant of the unit square/cube,
    ``lambda_1 = dim * pi**2``, times the smallest eigenvalue of the local
    mass matrices of the coarsest mesh.
    """
    return hierarchy.dim * math.pi**2 * local_mass_min_eigenvalue(hierarchy[0])


# ---------------------------------------------------------------------------
# Direct solves


class DirectSolver:
    """Sparse LU factorization reused across right-hand sides."""

    def __init__(self, A, cutoff: int = DIRECT_SOLVE_CUTOFF):
        n = A.shape[0]
        if n > cutoff:
            raise SolverError(f"matrix of size {n} exceeds the direct-solve cutoff {cutoff}")
        self.n = n
        try:
            self._lu = sla.splu(sp.csc_matrix(A))
        except RuntimeError as exc:
            raise SolverError(f"direct factorization failed: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))


# ---------------------------------------------------------------------------
# Multigrid


def vcycle(A_levels: Sequence, prolongations: Sequence, f: np.ndarray, v: np.ndarray,
           pre_smooth: int = 3, post_smooth: int = 3, coarse_tol: float = 0.1,
           coarse_max_iter: int = 10000) -> np.ndarray:
    """One V-cycle for ``A_J v = f`` over levels ``0..J`` (``A_levels`` coarse first).

    Forward Gauss-Seidel before, backward after the coarse correction; the
    coarsest problem is solved by CG from zero to relative residual
    ``coarse_tol``.
    """
    A_levels = [_csr(A) for A in A_levels]
    mats = [p.P if hasattr(p, "P") else p for p in prolongations]
    if len(mats) != len(A_levels) - 1:
        raise ValueError("need exactly one prolongation per consecutive pair of levels")
    for j, P in enumerate(mats):
        if P.shape != (A_levels[j + 1].shape[0], A_levels[j].shape[0]):
            raise ValueError(f"prolongation {j} has shape {P.shape}, inconsistent with the operators")
    if f.shape[0] != A_levels[-1].shape[0] or v.shape != f.shape:
        raise ValueError("right-hand side or iterate does not match the finest operator")
    return _vcycle(A_levels, mats, len(A_levels) - 1, np.asarray(f, dtype=float), np.array(v, dtype=float),
                   pre_smooth, post_smooth, coarse_tol, coarse_max_iter)


def _vcycle(A_levels, mats, j, f, v, pre, post, coarse_tol, coarse_max_iter):
    A = A_levels[j]
    if j == 0:
        x, _ = cg(A, f, None, rel_res_tol=coarse_tol, max_iter=coarse_max_iter)
        return x
    if pre:
        _gs_sweeps(A.indptr, A.indices, A.data, v, f, pre, False)
    r = f - A @ v
    P = mats[j - 1]
    e = _vcycle(A_levels, mats, j - 1, P.T @ r, np.zeros(P.shape[1]), pre, post, coarse_tol, coarse_max_iter)
    v += P @ e
    if post:
        _gs_sweeps(A.indptr, A.indices, A.data, v, f, post, True)
    return v


@dataclass
class Snapshot:
    vcycle: int
    v: np.ndarray
    residual: np.ndarray
    energy_error: float


@dataclass
class SolveTrace:
    snapshots: list[Snapshot] = field(default_factory=list)
    vcycles: int = 0
    converged: bool = False
    reference_energy: float = 0.0

    @property
    def relative_errors(self) -> list[float]:
        if self.reference_energy == 0.0:
            return [0.0 for _ in self.snapshots]
        return [s.energy_error / self.reference_energy for s in self.snapshots]


def _energy(A, e: np.ndarray) -> float:
    return math.sqrt(max(float(e @ (A @ e)), 0.0))


def solve_multigrid(A_levels: Sequence, prolongations: Sequence, f: np.ndarray, reference: np.ndarray,
                    rel_energy_tol: float = 1e-11, max_vcycles: int = 50, pre_smooth: int = 3,
                    post_smooth: int = 3, coarse_tol: float = 0.1,
                    initial_snapshot: bool = False) -> SolveTrace:
    """Repeat V-cycles from zero until ``||u - v||_A <= rel_energy_tol ||u||_A``.

    A snapshot is recorded after every V-cycle.  With ``initial_snapshot``
    the zero approximation is recorded as cycle 0 as well.
    """
    A_J = _csr(A_levels[-1])
    f = np.asarray(f, dtype=float)
    u = np.asarray(reference, dtype=float)
    unorm = _energy(A_J, u)
    trace = SolveTrace(reference_energy=unorm)
    v = np.zeros_like(f)

    def snap(k):
        err = _energy(A_J, u - v)
        trace.snapshots.append(Snapshot(k, v.copy(), f - A_J @ v, err))
        return err

    err = _energy(A_J, u)
    if initial_snapshot or unorm == 0.0:
        snap(0)
    if err <= rel_energy_tol * unorm:
        trace.converged = True
        return trace
    for k in range(1, max_vcycles + 1):
        v = vcycle(A_levels, prolongations, f, v, pre_smooth, post_smooth, coarse_tol)
        err = snap(k)
        trace.vcycles = k
        if err <= rel_energy_tol * unorm:
            trace.converged = True
            break
    if not trace.converged:
        log.warning("multigrid did not reach relative energy error %.1e in %d V-cycles", rel_energy_tol,
                    max_vcycles)
    return trace


def reference_solution(A_levels: Sequence, prolongations: Sequence, f: np.ndarray, mode: str = "auto",
                       cutoff: int = DIRECT_SOLVE_CUTOFF, vcycles: int = 30, **vcycle_kw) -> np.ndarray:
    """Discrete solution ``u_J`` used to measure algebraic errors.

    ``mode='direct'`` factorizes ``A_J``; ``'excessive_vcycles'`` applies
    ``vcycles`` V-cycles from zero; ``'auto'`` picks direct up to ``cutoff``
    unknowns.
    """
    A_J = A_levels[-1]
    f = np.asarray(f, dtype=float)
    if mode == "auto":
        mode = "direct" if A_J.shape[0] <= cutoff else "excessive_vcycles"
    if not np.any(f):
        return np.zeros_like(f)
    if mode == "direct":
        u = DirectSolver(A_J, cutoff=max(cutoff, A_J.shape[0])).solve(f)
    elif mode == "excessive_vcycles":
        u = np.zeros_like(f)
        for _ in range(vcycles):
            u = vcycle(A_levels, prolongations, f, u, **vcycle_kw)
    else:
        raise ValueError(f"unknown reference mode {mode!r}")
    if not np.all(np.isfinite(u)):
        raise SolverError("reference solve produced non-finite values")
    return u
