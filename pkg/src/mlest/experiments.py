"""Desk-scale robustness experiments and their reports.

``run_levels_experiment`` fixes the coarsest mesh and varies the number of
levels; ``run_coarse_size_experiment`` fixes two levels and varies the size of
the coarsest problem.  Both record one row per (V-cycle snapshot, variant).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import problems
from .assembly import DEFAULT_QUAD_ORDER, LevelOperators, assemble_level, assemble_load
from .estimator import (
    COARSE_VARIANTS,
    CoarseContext,
    calibrate_constant,
    coarse_term,
    fine_term_diag,
)
from .mesh import MeshHierarchy, build_hierarchy, domain_ratio
from .solver import DIRECT_SOLVE_CUTOFF, SolveTrace, lambda_min_lower_bound, reference_solution, solve_multigrid
from .transfer import Prolongation, build_prolongations, restrict_residuals

log = logging.getLogger(__name__)

LEVEL_VARIANTS = ("I1", "I2")


class ExperimentError(RuntimeError):
    def __init__(self, experiment: str, cause: Exception):
        super().__init__(f"[{experiment}] {cause}")
        self.experiment = experiment
        self.cause = cause


@dataclass
class ExperimentConfig:
    dim: int = 3
    cells0: int = 6
    levels: list[int] = field(default_factory=lambda: [1, 2, 3])
    cells0_sweep: list[int] = field(default_factory=lambda: [6, 12, 24])
    manufactured: bool = True
    quad_order: int = DEFAULT_QUAD_ORDER
    pre_smooth: int = 3
    post_smooth: int = 3
    coarse_tol: float = 0.1
    mg_tol: float = 1e-11
    max_vcycles: int = 50
    theta: float = 0.1
    fixed_cg_k: int = 4
    variants: list[str] | None = None
    c_numexp: float | None = None
    reference_mode: str = "auto"
    direct_cutoff: int = DIRECT_SOLVE_CUTOFF
    max_fine_dofs: int = 150000
    out: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        for name in ("cells0", "quad_order", "max_vcycles", "fixed_cg_k", "max_fine_dofs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("coarse_tol", "mg_tol", "theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.pre_smooth < 0 or self.post_smooth < 0:
            raise ValueError("smoothing counts must be nonnegative")
        if any(J < 1 for J in self.levels):
            raise ValueError("levels experiment needs J >= 1")
        if any(c < 2 for c in self.cells0_sweep):
            raise ValueError("cells0 sweep values must be at least 2")
        if self.variants is not None:
            unknown = set(self.variants) - set(COARSE_VARIANTS) - set(LEVEL_VARIANTS)
            if unknown:
                raise ValueError(f"unknown variants: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(eq=False)
class Problem:
    """Assembled multilevel Poisson problem."""

    hierarchy: MeshHierarchy
    operators: list[LevelOperators]
    prolongations: list[Prolongation]
    f: np.ndarray

    @property
    def A_levels(self):
        return [op.A for op in self.operators]

    @property
    def coarse_dofs(self) -> int:
        return self.operators[0].n

    @property
    def fine_dofs(self) -> int:
        return self.operators[-1].n


def build_problem(dim: int, cells0: int, J: int, quad_order: int = DEFAULT_QUAD_ORDER,
                  manufactured: bool = True) -> Problem:
    hierarchy = build_hierarchy(dim, cells0, J + 1)
    operators = [assemble_level(level) for level in hierarchy.levels]
    prolongations = build_prolongations(hierarchy)
    f = problems.source if manufactured else problems.zero_source
    return Problem(hierarchy, operators, prolongations, assemble_load(hierarchy[-1], f, quad_order))


def fine_dofs(dim: int, cells0: int, J: int) -> int:
    return (cells0 * 2**J - 1) ** dim


def solve_with_snapshots(problem: Problem, config: ExperimentConfig) -> tuple[np.ndarray, SolveTrace]:
    vkw = dict(pre_smooth=config.pre_smooth, post_smooth=config.post_smooth, coarse_tol=config.coarse_tol)
    u = reference_solution(problem.A_levels, problem.prolongations, problem.f, mode=config.reference_mode,
                           cutoff=config.direct_cutoff, **vkw)
    trace = solve_multigrid(problem.A_levels, problem.prolongations, problem.f, u,
                            rel_energy_tol=config.mg_tol, max_vcycles=config.max_vcycles, **vkw)
    return u, trace


# ---------------------------------------------------------------------------
# Reports


ROW_FIELDS = ("experiment", "J", "cells0", "coarse_dofs", "fine_dofs", "ratio", "vcycle", "error",
              "variant", "fine_sum", "coarse_term", "raw", "estimate", "index", "adaptive_iters")


@dataclass
class ReportRow:
    experiment: str
    J: int
    cells0: int
    coarse_dofs: int
    fine_dofs: int
    ratio: float
    vcycle: int
    error: float
    variant: str
    fine_sum: float
    coarse_term: float
    raw: float
    estimate: float = math.nan
    index: float = math.nan
    adaptive_iters: int = 0


@dataclass
class EstimateReport:
    experiment: str
    rows: list[ReportRow] = field(default_factory=list)
    calibration: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    variants: list[str] = field(default_factory=list)

    def select(self, **criteria) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def apply_calibration(self, c_numexp: float, corpus: str) -> None:
        self.calibration = {"C_numexp": c_numexp, "corpus": corpus}
        for r in self.rows:
            r.estimate = c_numexp * r.raw
            r.index = r.estimate / r.error

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "variants": list(self.variants),
            "calibration": self.calibration,
            "metadata": self.metadata,
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EstimateReport:
        data = json.loads(text)
        return cls(
            experiment=data["experiment"],
            rows=[ReportRow(**r) for r in data["rows"]],
            calibration=data["calibration"],
            metadata=data["metadata"],
            variants=data["variants"],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ROW_FIELDS)
        for r in self.rows:
            writer.writerow([_fmt(getattr(r, k)) for k in ROW_FIELDS])
        return buf.getvalue()

    def to_gnuplot(self) -> str:
        """Whitespace-separated long format, one block per variant."""
        lines = ["# " + " ".join(ROW_FIELDS)]
        for variant in self.variants:
            for r in self.select(variant=variant):
                lines.append(" ".join(_fmt(getattr(r, k)) for k in ROW_FIELDS))
            lines.extend(["", ""])
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: EstimateReport, out_dir: str | Path, formats=("csv", "json")) -> list[Path]:
    """Write the report as ``<experiment>.csv`` / ``.json`` / ``.dat`` plus a calibration sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path, text = out / f"{report.experiment}.csv", report.to_csv()
        elif fmt == "json":
            path, text = out / f"{report.experiment}.json", report.to_json()
        elif fmt == "dat":
            path, text = out / f"{report.experiment}.dat", report.to_gnuplot()
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        path.write_text(text)
        written.append(path)
    side = out / f"{report.experiment}_calibration.json"
    side.write_text(json.dumps({"calibration": report.calibration, "metadata": report.metadata},
                               indent=1, sort_keys=True))
    written.append(side)
    return written


# ---------------------------------------------------------------------------
# Experiments


def _snapshot_rows(experiment: str, problem: Problem, trace: SolveTrace, variants, ctx: CoarseContext,
                   ratio: float) -> list[ReportRow]:
    J = problem.hierarchy.J
    rows = []
    for snap in trace.snapshots:
        if not snap.energy_error > 0.0:
            continue
        res = restrict_residuals(snap.residual, problem.prolongations)
        fine = [fine_term_diag(r, op.D) for r, op in zip(res[1:], problem.operators[1:])]
        fine_sum = float(sum(fine))
        base = dict(experiment=experiment, J=J, cells0=problem.hierarchy.cells0,
                    coarse_dofs=problem.coarse_dofs, fine_dofs=problem.fine_dofs, ratio=ratio,
                    vcycle=snap.vcycle, error=snap.energy_error, fine_sum=fine_sum)
        direct = None
        for variant in variants:
            if variant in ("I1", "I2"):
                if direct is None:
                    direct, _ = coarse_term("direct", res[0], ctx)
                if variant == "I1":
                    raw = math.sqrt(fine_sum + direct)
                else:
                    raw = sum(math.sqrt(t) for t in fine) + math.sqrt(direct)
                rows.append(ReportRow(variant=variant, coarse_term=direct, raw=raw, **base))
            else:
                value, extra = coarse_term(variant, res[0], ctx, fine_sum)
                rows.append(ReportRow(variant=variant, coarse_term=value, raw=math.sqrt(fine_sum + value),
                                      adaptive_iters=extra.get("adaptive_iters", 0), **base))
    return rows


def _run_case(experiment: str, config: ExperimentConfig, cells0: int, J: int, variants,
              metadata: dict | None = None) -> list[ReportRow]:
    """Solve one configuration and evaluate every variant at every snapshot.

    Solver summaries and notes are appended to ``metadata['runs']`` and
    ``metadata['notes']`` when given.
    """
    metadata = {} if metadata is None else metadata
    problem = build_problem(config.dim, cells0, J, config.quad_order, config.manufactured)
    log.info("%s: dim=%d cells0=%d J=%d dofs %d -> %d", experiment, config.dim, cells0, J,
             problem.coarse_dofs, problem.fine_dofs)
    _, trace = solve_with_snapshots(problem, config)
    if not trace.converged:
        log.warning("%s: J=%d cells0=%d did not converge in %d V-cycles", experiment, J, cells0,
                    config.max_vcycles)
    metadata.setdefault("runs", []).append({
        "J": J, "cells0": cells0, "coarse_dofs": problem.coarse_dofs, "fine_dofs": problem.fine_dofs,
        "vcycles": trace.vcycles, "converged": trace.converged, "reference_energy": trace.reference_energy,
        "final_relative_error": trace.relative_errors[-1] if trace.snapshots else 0.0,
    })
    ratio = domain_ratio(problem.hierarchy)
    needs_direct = any(v in ("I1", "I2", "direct") for v in variants)
    if needs_direct and problem.coarse_dofs > config.direct_cutoff:
        msg = f"cells0={cells0} J={J}: coarse size {problem.coarse_dofs} above the direct cutoff, direct variants skipped"
        log.warning("%s: %s", experiment, msg)
        metadata.setdefault("notes", []).append(msg)
        variants = [v for v in variants if v not in ("I1", "I2", "direct")]
    ctx = CoarseContext(
        A0=problem.operators[0].A,
        D0=problem.operators[0].D,
        ratio_coef=ratio,
        lambda_min_lb=lambda_min_lower_bound(problem.hierarchy),
        theta=config.theta,
        fixed_cg_k=config.fixed_cg_k,
    )
    return _snapshot_rows(experiment, problem, trace, variants, ctx, ratio)


def _calibrate(report: EstimateReport, corpus_variant: str, c_numexp: float | None) -> None:
    corpus = report.select(variant=corpus_variant)
    if c_numexp is None:
        if not corpus:
            raise ExperimentError(report.experiment, ValueError(f"no {corpus_variant} rows to calibrate on"))
        c_numexp = calibrate_constant([r.raw for r in corpus], [r.error for r in corpus])
        source = f"{report.experiment}:{corpus_variant}"
    else:
        source = "config"
    report.apply_calibration(c_numexp, source)


def run_levels_experiment(config: ExperimentConfig) -> EstimateReport:
    """Fixed coarsest mesh, ``J`` over ``config.levels``; indices I1 and I2 per snapshot."""
    chosen = LEVEL_VARIANTS if config.variants is None else config.variants
    variants = [v for v in chosen if v in LEVEL_VARIANTS]
    report = EstimateReport("levels", variants=variants,
                            metadata={"config": config.to_dict(), "runs": [], "notes": []})
    for J in config.levels:
        if fine_dofs(config.dim, config.cells0, J) > config.max_fine_dofs:
            log.warning("levels: J=%d exceeds max_fine_dofs, skipped", J)
            continue
        try:
            report.rows.extend(_run_case("levels", config, config.cells0, J, variants, report.metadata))
        except Exception as exc:
            raise ExperimentError(f"levels J={J}", exc) from exc
    corpus = next((v for v in ["I1", *variants] if report.select(variant=v)), "I1")
    if report.rows or config.c_numexp is not None:
        _calibrate(report, corpus, config.c_numexp)
    return report


def run_coarse_size_experiment(config: ExperimentConfig) -> EstimateReport:
    """Two levels (``J = 1``), coarsest mesh over ``config.cells0_sweep``; index I3 per variant."""
    chosen = COARSE_VARIANTS if config.variants is None else config.variants
    variants = [v for v in chosen if v in COARSE_VARIANTS]
    report = EstimateReport("coarse", variants=variants,
                            metadata={"config": config.to_dict(), "runs": [], "notes": []})
    for cells0 in config.cells0_sweep:
        if fine_dofs(config.dim, cells0, 1) > config.max_fine_dofs:
            log.warning("coarse: cells0=%d exceeds max_fine_dofs, skipped", cells0)
            continue
        try:
            report.rows.extend(_run_case("coarse", config, cells0, 1, variants, report.metadata))
        except Exception as exc:
            raise ExperimentError(f"coarse cells0={cells0}", exc) from exc
    # calibrate on the exact coarse term, else on its guaranteed adaptive bound
    corpus = next((v for v in ["direct", "adaptive", *variants] if report.select(variant=v)), "direct")
    if report.rows or config.c_numexp is not None:
        _calibrate(report, corpus, config.c_numexp)
    return report
