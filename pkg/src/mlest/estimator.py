"""Multilevel residual-based estimates of algebraic and total errors.

Fine levels ``j >= 1`` contribute ``||h_j^-1 r_j||^2 = r_j^T (M^S_j)^-1 r_j``
or one of its computable surrogates; the coarsest level contributes
``||grad r_0||^2 = r_0^T A_0^-1 r_0`` or an approximation of it.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np
import scipy.linalg as sl

from .assembly import DEFAULT_QUAD_ORDER, p1_gradients
from .mesh import MeshLevel
from .quadrature import quadrature_points
from .solver import CgTrace, DirectSolver, PcgBoundIterator, SolverError, cg
from .transfer import restrict_residuals

COARSE_VARIANTS = ("direct", "fixed_cg", "diag_bound", "adaptive")


class EstimatorError(ValueError):
    """Missing inputs or constants for an estimate."""


# ---------------------------------------------------------------------------
# Fine-level terms


def fine_term_diag(r: np.ndarray, D: np.ndarray) -> float:
    """``r^T D^-1 r``; equals the sum of ``<r, phi_i>^2 / ||grad phi_i||^2``."""
    D = np.asarray(D, dtype=float)
    if r.shape != D.shape:
        raise ValueError(f"residual of length {r.shape[0]} does not match diagonal of length {D.shape[0]}")
    if np.any(D == 0.0):
        raise EstimatorError("zero diagonal entry")
    return float(np.sum(r * r / D))


def fine_term_exact(r: np.ndarray, Ms, tol: float = 1e-12, max_iter: int = 10000) -> float:
    """``r^T Ms^-1 r`` with ``Ms c = r`` solved by CG to relative residual ``tol``."""
    if not np.any(r):
        return 0.0
    c, it = cg(Ms, r, rel_res_tol=tol, max_iter=max_iter)
    if np.linalg.norm(r - Ms @ c) > 10 * tol * np.linalg.norm(r):
        raise SolverError(f"scaled-mass CG did not converge in {it} iterations")
    return float(r @ c)


def fine_term_local(r: np.ndarray, local_scaled_mass: np.ndarray, node_multiplicity: np.ndarray,
                    elements: np.ndarray, free_vertex_mask: np.ndarray | None = None) -> float:
    """Fully computable upper bound on ``r^T Ms^-1 r`` from element-local solves.

    Every entry ``r_m`` is split evenly among the elements sharing node ``m``
    and each element contributes ``r_K^T (M^S_K)^-1 r_K`` on its free vertices.
    """
    n_free = node_multiplicity.shape[0]
    if free_vertex_mask is None:
        free_vertex_mask = elements < n_free
    share = np.zeros(elements.shape, dtype=float)
    share[free_vertex_mask] = (r / node_multiplicity)[elements[free_vertex_mask]]
    total = 0.0
    # group by the pattern of free vertices so the dense solves are batched
    patterns, inverse = np.unique(free_vertex_mask, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for k, pat in enumerate(patterns):
        if not pat.any():
            continue
        sel = inverse == k
        idx = np.flatnonzero(pat)
        Mk = local_scaled_mass[sel][:, idx[:, None], idx[None, :]]
        rk = share[sel][:, idx]
        try:
            ck = np.linalg.solve(Mk, rk[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise EstimatorError("singular local scaled mass matrix (degenerate element)") from exc
        total += float(np.sum(rk * ck))
    return total


# ---------------------------------------------------------------------------
# Coarsest-level terms


def coarse_term_direct(A0, r0: np.ndarray, solver: DirectSolver | None = None) -> float:
    """``r_0^T A_0^-1 r_0`` by sparse factorization."""
    if not np.any(r0):
        return 0.0
    solver = solver or DirectSolver(A0)
    return float(r0 @ solver.solve(r0))


def coarse_term_fixed_cg(A0, r0: np.ndarray, k: int = 4) -> float:
    """``r_0^T c~`` after exactly ``k`` CG iterations from zero."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not np.any(r0):
        return 0.0
    c, _ = cg(A0, r0, rel_res_tol=0.0, max_iter=k)
    return float(r0 @ c)


def coarse_term_diag(r0: np.ndarray, D0: np.ndarray, ratio_coef: float) -> float:
    """``ratio_coef * r_0^T D_0^-1 r_0`` (Friedrichs plus mass/diagonal equivalence)."""
    if not ratio_coef > 0.0:
        raise ValueError(f"ratio_coef must be positive, got {ratio_coef}")
    return ratio_coef * fine_term_diag(r0, D0)


@dataclass
class AdaptiveResult:
    value: float
    iterations: int
    mu_sq: float
    zeta_sq: float
    satisfied: bool
    trace: CgTrace | None = None


def coarse_term_adaptive(A0, r0: np.ndarray, fine_sum: float, theta: float, lambda_min_lb: float,
                         max_iter: int = 10000, preconditioner: str = "none") -> AdaptiveResult:
    """Run PCG on ``A_0 c = r_0`` until ``zeta_i^2 <= theta (fine_sum + mu_i^2)``.

    Returns ``mu_i^2 + zeta_i^2``, an upper bound on ``r_0^T A_0^-1 r_0``.  The
    criterion is tested from the first iteration on.  If ``max_iter`` is
    reached first the last bound is returned with ``satisfied=False``.
    """
    if not theta > 0.0:
        raise ValueError(f"theta must be positive, got {theta}")
    if not np.any(r0):
        return AdaptiveResult(0.0, 0, 0.0, 0.0, True)
    it = PcgBoundIterator(A0, r0, lambda_min_lb, preconditioner)
    satisfied = False
    while it.trace.iterations < max_iter:
        it.step()
        if it.zeta_sq <= theta * (fine_sum + it.mu_sq):
            satisfied = True
            break
    return AdaptiveResult(it.mu_sq + it.zeta_sq, it.trace.iterations, it.mu_sq, it.zeta_sq, satisfied, it.trace)


# ---------------------------------------------------------------------------
# Breakdown of all terms for one approximation


@dataclass
class TermBreakdown:
    """Per-level terms for one approximation ``v_J``.

    ``fine_terms_*`` are indexed by level ``j = 1..J`` (position ``j - 1``).
    """

    fine_terms_diag: list[float]
    coarse_term: float
    coarse_variant: str
    fine_terms_exact: list[float] | None = None
    fine_terms_local: list[float] | None = None
    adaptive_iters: int = 0
    mu_sq: float | None = None
    zeta_sq: float | None = None

    @property
    def fine_sum(self) -> float:
        return float(sum(self.fine_terms_diag))

    def fine_terms(self, kind: str = "diag") -> list[float]:
        terms = {"diag": self.fine_terms_diag, "exact": self.fine_terms_exact,
                 "local": self.fine_terms_local}.get(kind, "unknown")
        if terms == "unknown":
            raise EstimatorError(f"unknown fine-term kind {kind!r}")
        if terms is None:
            raise EstimatorError(f"fine terms of kind {kind!r} were not computed")
        return terms


@dataclass
class CoarseContext:
    """Everything the coarse-term variants need besides ``r_0``."""

    A0: object
    D0: np.ndarray
    ratio_coef: float | None = None
    lambda_min_lb: float | None = None
    theta: float = 0.1
    fixed_cg_k: int = 4
    direct: DirectSolver | None = None
    max_iter: int = 10000
    preconditioner: str = "none"

    def direct_solver(self) -> DirectSolver:
        if self.direct is None:
            self.direct = DirectSolver(self.A0)
        return self.direct


def coarse_term(variant: str, r0: np.ndarray, ctx: CoarseContext, fine_sum: float = 0.0) -> tuple[float, dict]:
    """Evaluate one coarse-term variant; returns the value and adaptive details."""
    if variant == "direct":
        return coarse_term_direct(ctx.A0, r0, ctx.direct_solver()), {}
    if variant == "fixed_cg":
        return coarse_term_fixed_cg(ctx.A0, r0, ctx.fixed_cg_k), {}
    if variant == "diag_bound":
        if ctx.ratio_coef is None:
            raise EstimatorError("diag_bound variant needs ratio_coef")
        return coarse_term_diag(r0, ctx.D0, ctx.ratio_coef), {}
    if variant == "adaptive":
        if ctx.lambda_min_lb is None:
            raise EstimatorError("adaptive variant needs a lower bound on lambda_min(A_0)")
        res = coarse_term_adaptive(ctx.A0, r0, fine_sum, ctx.theta, ctx.lambda_min_lb, ctx.max_iter,
                                   ctx.preconditioner)
        return res.value, {"adaptive_iters": res.iterations, "mu_sq": res.mu_sq, "zeta_sq": res.zeta_sq}
    raise EstimatorError(f"unknown coarse variant {variant!r}; expected one of {COARSE_VARIANTS}")


def compute_breakdown(residuals: Sequence[np.ndarray], operators: Sequence, variant: str, ctx: CoarseContext,
                      exact: bool = False, local: bool = False) -> TermBreakdown:
    """All terms for residual vectors ``r_0..r_J`` (coarse first).

    ``operators[j]`` must provide ``D`` (and ``Ms`` / local data when
    ``exact`` / ``local`` are requested).
    """
    fine = residuals[1:]
    ops = operators[1:]
    diag = [fine_term_diag(r, op.D) for r, op in zip(fine, ops)]
    ex = [fine_term_exact(r, op.Ms) for r, op in zip(fine, ops)] if exact else None
    loc = None
    if local:
        loc = [fine_term_local(r, op.local_scaled_mass, op.node_multiplicity, op.elements, op.free_vertex_mask)
               for r, op in zip(fine, ops)]
    value, extra = coarse_term(variant, residuals[0], ctx, float(sum(diag)))
    return TermBreakdown(
        fine_terms_diag=diag, coarse_term=value, coarse_variant=variant,
        fine_terms_exact=ex, fine_terms_local=loc,
        adaptive_iters=extra.get("adaptive_iters", 0),
        mu_sq=extra.get("mu_sq"), zeta_sq=extra.get("zeta_sq"),
    )


def breakdown_for_residual(r_J: np.ndarray, prolongations: Sequence, operators: Sequence, variant: str,
                           ctx: CoarseContext, **kw) -> TermBreakdown:
    return compute_breakdown(restrict_residuals(r_J, prolongations), operators, variant, ctx, **kw)


# ---------------------------------------------------------------------------
# Classical single-level estimator


@dataclass
class ClassicalEstimator:
    eta_rhs: float
    eta_jump: float
    osc: float

    @property
    def eta_total(self) -> float:
        return math.sqrt(self.eta_rhs**2 + self.eta_jump**2 + self.osc**2)


def _full_vector(level: MeshLevel, v: np.ndarray) -> np.ndarray:
    full = np.zeros(level.n_nodes)
    full[: level.n_free] = v
    return full


def classical_estimator(level: MeshLevel, v: np.ndarray, f: Callable[[np.ndarray], np.ndarray],
                        quad_order: int = DEFAULT_QUAD_ORDER) -> ClassicalEstimator:
    """Residual estimator with elementwise-mean data, normal-gradient jumps and oscillation."""
    h = level.elem_diameter
    vol = level.elem_volume
    points, _, w = quadrature_points(level.elem_coords, quad_order)
    fv = np.asarray(f(points.reshape(-1, level.dim)), dtype=float).reshape(points.shape[:2])
    f_mean = fv @ w
    eta_rhs_sq = float(np.sum(h**2 * vol * f_mean**2))
    osc_sq = float(np.sum(h**2 * vol * (((fv - f_mean[:, None]) ** 2) @ w)))

    grads = p1_gradients(level)
    vfull = _full_vector(level, v)
    gv = np.einsum("ev,evd->ed", vfull[level.elements], grads)
    _, left, right = level.interior_faces
    loc_left, _ = level.interior_face_local
    # outward normal of the left element on its face opposite to vertex loc_left
    n = -grads[left, loc_left, :]
    n /= np.linalg.norm(n, axis=1)[:, None]
    jump = np.einsum("ed,ed->e", gv[left] - gv[right], n)
    face_meas = level.elem_face_measure[left, loc_left]
    eta_jump_sq = 0.5 * float(np.sum((h[left] + h[right]) * face_meas * jump**2))
    return ClassicalEstimator(math.sqrt(eta_rhs_sq), math.sqrt(eta_jump_sq), math.sqrt(max(osc_sq, 0.0)))


# ---------------------------------------------------------------------------
# Composite estimates


@dataclass
class EstimatorConstants:
    """Constants of the estimate families.

    Everything defaults to one; ``C_numexp`` carries the calibration of the
    prototype algebraic estimate.  Set a slot to ``None`` to mark it unknown.
    """

    C_numexp: float | None = 1.0
    theta: float = 0.1
    C_cls: float | None = 1.0
    C_I2lvl: float | None = 1.0
    C_IV0: float | None = 1.0
    C_SIV: float | None = 1.0
    C_IVJ: float | None = 1.0
    C_S: float | None = 1.0
    C_B_bar: float | None = 1.0
    C_HS: float | None = 1.0
    C_theta: float | None = 1.0
    ratio_coef: float | None = None

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if val is not None and not val > 0:
                raise EstimatorError(f"constant {f.name} must be positive, got {val}")

    def require(self, *names: str) -> list[float]:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise EstimatorError(f"unset constants: {', '.join(missing)}")
        return [getattr(self, n) for n in names]


ALGEBRAIC_FORMS = ("sqrt_sum", "sum_of_norms")
TOTAL_FAMILIES = ("bjr_sum", "bjr_sqrt", "rude_huber", "harbrecht", "stable_split")


def algebraic_estimate(form: str, breakdown: TermBreakdown, constants: EstimatorConstants,
                       fine: str = "diag") -> float:
    """Calibrated algebraic-error estimate ``C (sum + coarse)^1/2`` or ``C (sum of square roots)``."""
    (C,) = constants.require("C_numexp")
    terms = breakdown.fine_terms(fine)
    if breakdown.coarse_term is None:
        raise EstimatorError("coarse term missing from breakdown")
    if form == "sqrt_sum":
        return C * math.sqrt(sum(terms) + breakdown.coarse_term)
    if form == "sum_of_norms":
        return C * (sum(math.sqrt(t) for t in terms) + math.sqrt(breakdown.coarse_term))
    raise EstimatorError(f"unknown algebraic form {form!r}; expected one of {ALGEBRAIC_FORMS}")


def total_estimate(family: str, eta: ClassicalEstimator | float, breakdown: TermBreakdown,
                   constants: EstimatorConstants, fine: str = "exact") -> float:
    """Total-error estimate of the given family.

    ``fine`` selects how ``||h_j^-1 r_j||^2`` is realized (``exact``,
    ``local`` or ``diag``); the Harbrecht-Schneider family always uses the
    diagonal frame sum.
    """
    e = eta.eta_total if isinstance(eta, ClassicalEstimator) else float(eta)
    coarse = breakdown.coarse_term
    if family == "harbrecht":
        C_S, C_B, C_HS = constants.require("C_S", "C_B_bar", "C_HS")
        return math.sqrt(C_S * C_B) * math.sqrt(C_HS * e**2 + breakdown.fine_sum + coarse)
    terms = breakdown.fine_terms(fine)
    if family == "bjr_sum":
        C_cls, C_I, C_0 = constants.require("C_cls", "C_I2lvl", "C_IV0")
        return C_cls * e + C_I * sum(math.sqrt(t) for t in terms) + C_0 * math.sqrt(coarse)
    if family == "bjr_sqrt":
        C_cls, C_SIV = constants.require("C_cls", "C_SIV")
        return math.sqrt(2.0) * math.sqrt(C_cls**2 * e**2 + C_SIV * (sum(terms) + coarse))
    if family == "rude_huber":
        C_cls, C_IVJ, C_S = constants.require("C_cls", "C_IVJ", "C_S")
        return math.sqrt(2.0) * math.sqrt(C_cls**2 * e**2 + C_IVJ**2 * C_S * (sum(terms) + coarse))
    if family == "stable_split":
        C_S, C_th = constants.require("C_S", "C_theta")
        return math.sqrt(C_S) * math.sqrt(C_th * e**2 + sum(terms) + coarse)
    raise EstimatorError(f"unknown estimate family {family!r}; expected one of {TOTAL_FAMILIES}")


# ---------------------------------------------------------------------------
# Errors and efficiency


def energy_error(A, u_ref: np.ndarray, v: np.ndarray) -> float:
    """``((u - v)^T A (u - v))^1/2``."""
    e = np.asarray(u_ref, dtype=float) - np.asarray(v, dtype=float)
    return math.sqrt(max(float(e @ (A @ e)), 0.0))


def efficiency_index(estimate: float, error: float) -> float:
    if not error > 0.0:
        raise EstimatorError("efficiency index undefined for zero error")
    return estimate / error


def calibrate_constant(raw_estimates: Iterable[float], errors: Iterable[float]) -> float:
    """Smallest ``C`` with ``C * raw >= error`` on every snapshot with positive error."""
    pairs = [(float(r), float(e)) for r, e in zip(raw_estimates, errors) if e > 0.0]
    if not pairs:
        raise EstimatorError("calibration needs at least one snapshot with positive error")
    ratios = []
    for raw, err in pairs:
        if raw <= 0.0:
            raise EstimatorError("raw estimate vanishes on a snapshot with nonzero error")
        ratios.append(err / raw)
    return max(ratios)


def diag_mass_equivalence(Ms, D: np.ndarray) -> tuple[float, float]:
    """Dense generalized-eigen extremes ``(c_B, C_B)`` of the pair ``(D, Ms)``."""
    Msd = Ms.toarray() if hasattr(Ms, "toarray") else np.asarray(Ms)
    s = 1.0 / np.sqrt(D)
    ev = sl.eigvalsh(s[:, None] * Msd * s[None, :])
    return float(1.0 / ev.max()), float(1.0 / ev.min())
