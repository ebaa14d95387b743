"""Command-line interface.

Subcommands
-----------
levels-exp   fixed coarsest mesh, varying number of levels
coarse-exp   two levels, varying coarsest mesh
export       write a built-in hierarchy as Matrix Market files
solve        multigrid solve with per-cycle snapshots
estimate     algebraic error estimate on an exported or external hierarchy

Exit status is 0 on success, 1 on usage or input errors and 2 on numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__, mmio
from .estimator import COARSE_VARIANTS, CoarseContext, EstimatorError, coarse_term, fine_term_diag
from .experiments import (
    ExperimentConfig,
    ExperimentError,
    build_problem,
    emit_report,
    run_coarse_size_experiment,
    run_levels_experiment,
)
from .mesh import MeshError, domain_ratio
from .solver import SolverError, lambda_min_lower_bound, reference_solution, solve_multigrid, vcycle
from .transfer import restrict_residuals

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
SYMMETRY_TOL = 1e-12


class UsageError(Exception):
    """Bad arguments, configuration or input files."""


class HierarchyError(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# External algebraic hierarchies


@dataclass
class AlgebraicHierarchy:
    """Matrices of a multilevel problem without mesh data.

    ``P[j]`` maps level ``j`` to ``j + 1``; ``D[j]`` defaults to ``diag(A[j])``.
    """

    A: list[sp.csr_matrix]
    P: list[sp.csr_matrix]
    f: np.ndarray
    D: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.D:
            self.D = [A.diagonal().copy() for A in self.A]

    @property
    def J(self) -> int:
        return len(self.A) - 1

    @property
    def ratio(self) -> float | None:
        return self.meta.get("ratio")

    @property
    def lambda_min_lb(self) -> float | None:
        return self.meta.get("lambda_min_lb")


def export_hierarchy(out_dir, dim: int, cells0: int, J: int, quad_order: int = 4, manufactured: bool = True,
                     mesh_json: bool = False, extra_meta: dict | None = None) -> Path:
    """Assemble a built-in problem and write it as Matrix Market files plus ``meta.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(dim, cells0, J, quad_order, manufactured)
    for j, op in enumerate(problem.operators):
        mmio.write_matrix(out / f"A_{j}.mtx", op.A)
        mmio.write_matrix(out / f"M_{j}.mtx", op.M)
        mmio.write_matrix(out / f"Ms_{j}.mtx", op.Ms)
        mmio.write_vector(out / f"D_{j}.mtx", op.D)
    for j, p in enumerate(problem.prolongations):
        mmio.write_matrix(out / f"P_{j}.mtx", p.P, symmetric=False)
    mmio.write_vector(out / "f.mtx", problem.f)
    meta = {
        "dim": dim, "cells0": cells0, "J": J, "quad_order": quad_order, "manufactured": manufactured,
        "ratio": domain_ratio(problem.hierarchy),
        "lambda_min_lb": lambda_min_lower_bound(problem.hierarchy),
        "dofs": [op.n for op in problem.operators],
    }
    meta.update(extra_meta or {})
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    if mesh_json:
        for j, level in enumerate(problem.hierarchy.levels):
            (out / f"mesh_{j}.json").write_text(level.to_json())
    return out


def import_hierarchy(path) -> AlgebraicHierarchy:
    """Read ``A_j.mtx``, ``P_j.mtx``, ``f.mtx``, optional ``D_j.mtx`` and ``meta.json`` from a directory."""
    root = Path(path)
    if not root.is_dir():
        raise HierarchyError(f"{root}: not a directory")
    A = []
    while (root / f"A_{len(A)}.mtx").exists():
        A.append(mmio.read_matrix(root / f"A_{len(A)}.mtx"))
    if not A:
        raise HierarchyError(f"{root}: no A_0.mtx found")
    for j, Aj in enumerate(A):
        if Aj.shape[0] != Aj.shape[1]:
            raise HierarchyError(f"A_{j} is not square: shape {Aj.shape}")
        if not mmio.is_symmetric(Aj, SYMMETRY_TOL):
            raise HierarchyError(f"A_{j} is not symmetric within {SYMMETRY_TOL:g}")
    P = []
    for j in range(len(A) - 1):
        pj = root / f"P_{j}.mtx"
        if not pj.exists():
            raise HierarchyError(f"{root}: missing {pj.name} between levels {j} and {j + 1}")
        Pj = mmio.read_matrix(pj)
        want = (A[j + 1].shape[0], A[j].shape[0])
        if Pj.shape != want:
            raise HierarchyError(
                f"P_{j} has shape {Pj.shape} but level {j + 1} has {want[0]} and level {j} has {want[1]} unknowns")
        P.append(Pj)
    if (root / f"P_{len(A) - 1}.mtx").exists():
        raise HierarchyError(f"P_{len(A) - 1}.mtx present but A_{len(A)}.mtx is missing")
    if not (root / "f.mtx").exists():
        raise HierarchyError(f"{root}: missing f.mtx")
    f = mmio.read_vector(root / "f.mtx")
    if f.size != A[-1].shape[0]:
        raise HierarchyError(f"f has {f.size} entries but level {len(A) - 1} has {A[-1].shape[0]} unknowns")
    D = []
    for j, Aj in enumerate(A):
        dj = root / f"D_{j}.mtx"
        if dj.exists():
            d = mmio.read_vector(dj)
            if d.size != Aj.shape[0]:
                raise HierarchyError(f"D_{j} has {d.size} entries but level {j} has {Aj.shape[0]} unknowns")
            if np.any(d <= 0.0):
                raise HierarchyError(f"D_{j} has nonpositive entries")
        else:
            d = Aj.diagonal().copy()
        D.append(d)
    meta = {}
    if (root / "meta.json").exists():
        try:
            meta = json.loads((root / "meta.json").read_text())
        except json.JSONDecodeError as exc:
            raise HierarchyError(f"{root / 'meta.json'}:{exc.lineno}: {exc.msg}") from None
    ratio = meta.get("ratio")
    if ratio is not None and not ratio > 0:
        raise HierarchyError(f"meta.json: ratio must be positive, got {ratio}")
    return AlgebraicHierarchy(A=A, P=P, f=f, D=D, meta=meta)


# ---------------------------------------------------------------------------
# Configuration


_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}

# flag destination -> ExperimentConfig field
_FLAG_MAP = {
    "dim": "dim", "cells0": "cells0", "theta": "theta", "seed": "seed", "quad_order": "quad_order",
    "variants": "variants", "out": "out", "cells0_sweep": "cells0_sweep", "c_numexp": "c_numexp",
    "max_vcycles": "max_vcycles", "mg_tol": "mg_tol", "fixed_cg_k": "fixed_cg_k",
}


def load_config(path) -> dict:
    """Read a TOML file; keys may sit at top level or under ``[experiment]``."""
    try:
        data = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    data = dict(data.get("experiment", data))
    if "max_levels" in data:
        data["levels"] = list(range(1, int(data.pop("max_levels")) + 1))
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {sorted(unknown)}")
    return data


def make_config(args, **defaults) -> ExperimentConfig:
    values = dict(defaults)
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for dest, name in _FLAG_MAP.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    if getattr(args, "max_levels", None) is not None:
        values["levels"] = list(range(1, args.max_levels + 1))
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# Subcommands


def _write_or_print(report, out, formats):
    if out:
        for p in emit_report(report, out, formats):
            log.info("wrote %s", p)
    else:
        sys.stdout.write(report.to_csv())


def _cmd_levels(args) -> int:
    config = make_config(args)
    report = run_levels_experiment(config)
    report.metadata["version"] = __version__
    _write_or_print(report, config.out, args.formats)
    return EXIT_OK


def _cmd_coarse(args) -> int:
    config = make_config(args, levels=[1])
    report = run_coarse_size_experiment(config)
    report.metadata["version"] = __version__
    _write_or_print(report, config.out, args.formats)
    return EXIT_OK


def _cmd_export(args) -> int:
    config = make_config(args, levels=[1])
    if config.out is None:
        raise UsageError("export needs --out")
    J = max(config.levels)
    export_hierarchy(config.out, config.dim, config.cells0, J, config.quad_order, config.manufactured,
                     mesh_json=args.mesh_json, extra_meta={"config": config.to_dict(), "version": __version__})
    return EXIT_OK


def _load_levels(args, config):
    """Operators, prolongations, right-hand side and metadata from --hierarchy or a built-in problem."""
    if args.hierarchy:
        h = import_hierarchy(args.hierarchy)
        return h.A, h.P, h.f, h.D, h.meta
    J = max(config.levels)
    problem = build_problem(config.dim, config.cells0, J, config.quad_order, config.manufactured)
    meta = {"ratio": domain_ratio(problem.hierarchy),
            "lambda_min_lb": lambda_min_lower_bound(problem.hierarchy)}
    return (problem.A_levels, [p.P for p in problem.prolongations], problem.f,
            [op.D for op in problem.operators], meta)


def _vkw(config):
    return dict(pre_smooth=config.pre_smooth, post_smooth=config.post_smooth, coarse_tol=config.coarse_tol)


def _cmd_solve(args) -> int:
    config = make_config(args, levels=[1])
    A, P, f, _, meta = _load_levels(args, config)
    u = reference_solution(A, P, f, mode=config.reference_mode, cutoff=config.direct_cutoff, **_vkw(config))
    trace = solve_multigrid(A, P, f, u, rel_energy_tol=config.mg_tol, max_vcycles=config.max_vcycles,
                            **_vkw(config))
    result = {
        "metadata": {"config": config.to_dict(), "hierarchy": args.hierarchy, "source": meta,
                     "version": __version__},
        "dofs": [a.shape[0] for a in A],
        "vcycles": trace.vcycles,
        "converged": trace.converged,
        "energy_errors": [s.energy_error for s in trace.snapshots],
        "relative_errors": trace.relative_errors,
    }
    _emit_json(result, config.out, "solve.json")
    if config.out and trace.snapshots:
        mmio.write_vector(Path(config.out) / "v.mtx", trace.snapshots[-1].v)
    if not trace.converged:
        print(f"multigrid did not converge within {config.max_vcycles} V-cycles", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def estimate_terms(A, P, D, f, v, variants, ctx_kw) -> dict:
    """Fine diagonal terms and the requested coarse terms for the approximation ``v``."""
    r = f - A[-1] @ v
    res = restrict_residuals(r, P)
    fine = [fine_term_diag(rj, dj) for rj, dj in zip(res[1:], D[1:])]
    fine_sum = float(sum(fine))
    ctx = CoarseContext(A0=A[0], D0=D[0], **ctx_kw)
    out = {"fine_terms": fine, "fine_sum": fine_sum, "coarse": {}}
    for variant in variants:
        value, extra = coarse_term(variant, res[0], ctx, fine_sum)
        out["coarse"][variant] = {"coarse_term": value, "raw": math.sqrt(fine_sum + value), **extra}
    return out


def _cmd_estimate(args) -> int:
    config = make_config(args, levels=[1])
    A, P, f, D, meta = _load_levels(args, config)
    variants = args.variant or config.variants or ["adaptive"]
    bad = [v for v in variants if v not in COARSE_VARIANTS]
    if bad:
        raise UsageError(f"unknown coarse variants {bad}; expected some of {list(COARSE_VARIANTS)}")
    if args.approx is not None:
        if args.approx == "random":
            v = np.random.default_rng(config.seed).standard_normal(f.size)
        else:
            v = mmio.read_vector(args.approx)
            if v.size != f.size:
                raise UsageError(f"approximation has {v.size} entries, expected {f.size}")
    else:
        v = np.zeros_like(f)
        for _ in range(args.vcycles):
            v = vcycle(A, P, f, v, **_vkw(config))
    if "diag_bound" in variants and not meta.get("ratio"):
        raise UsageError("diag_bound needs a positive 'ratio' in meta.json")
    ctx_kw = dict(ratio_coef=meta.get("ratio"), lambda_min_lb=meta.get("lambda_min_lb"),
                  theta=config.theta, fixed_cg_k=config.fixed_cg_k)
    terms = estimate_terms(A, P, D, f, v, variants, ctx_kw)
    if config.c_numexp is not None:
        for entry in terms["coarse"].values():
            entry["estimate"] = config.c_numexp * entry["raw"]
    terms["metadata"] = {"config": config.to_dict(), "hierarchy": args.hierarchy, "source": meta,
                         "approx": args.approx,
                         "vcycles": None if args.approx is not None else args.vcycles,
                         "ratio": meta.get("ratio"), "lambda_min_lb": meta.get("lambda_min_lb"),
                         "version": __version__}
    _emit_json(terms, config.out, "estimate.json")
    return EXIT_OK


def _emit_json(obj, out, name):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    else:
        print(text)


# ---------------------------------------------------------------------------
# Argument parsing


def _common(p, experiment=True):
    p.add_argument("--config", help="TOML file with configuration values (flags override it)")
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.add_argument("--cells0", type=int, help="cells per axis of the coarsest mesh")
    p.add_argument("--max-levels", type=int, dest="max_levels", help="largest J (levels 1..J)")
    p.add_argument("--theta", type=float, help="adaptive coarse criterion parameter")
    p.add_argument("--quad-order", type=int, dest="quad_order")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--max-vcycles", type=int, dest="max_vcycles")
    p.add_argument("--mg-tol", type=float, dest="mg_tol")
    p.add_argument("--fixed-cg-k", type=int, dest="fixed_cg_k")
    p.add_argument("--c-numexp", type=float, dest="c_numexp", help="fixed calibration constant")
    if experiment:
        p.add_argument("--variants", type=lambda s: [t for t in s.split(",") if t],
                       help="comma separated variant list")
        p.add_argument("--format", dest="formats", action="append", choices=("csv", "json", "dat"),
                       help="report formats written to --out (default csv and json)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlest", description="Multilevel algebraic error estimates for P1 Poisson problems.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("levels-exp", help="fixed coarsest mesh, J = 1..max-levels")
    _common(p)
    p.set_defaults(func=_cmd_levels)

    p = sub.add_parser("coarse-exp", help="J = 1, coarsest mesh over a sweep")
    _common(p)
    p.add_argument("--cells0-sweep", dest="cells0_sweep", type=lambda s: [int(t) for t in s.split(",")])
    p.set_defaults(func=_cmd_coarse)

    p = sub.add_parser("export", help="write a built-in hierarchy as Matrix Market files")
    _common(p, experiment=False)
    p.add_argument("--mesh-json", action="store_true", help="also write mesh_<j>.json")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("solve", help="multigrid solve with per-cycle snapshots")
    _common(p, experiment=False)
    p.add_argument("--hierarchy", help="directory of an exported hierarchy")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("estimate", help="estimate the algebraic error of an approximation")
    _common(p, experiment=False)
    p.add_argument("--hierarchy", help="directory of an exported hierarchy")
    p.add_argument("--variant", action="append", choices=COARSE_VARIANTS,
                   help="coarse variant (repeatable, default adaptive)")
    p.add_argument("--variants", type=lambda s: [t for t in s.split(",") if t])
    p.add_argument("--vcycles", type=int, default=1, help="V-cycles from zero giving the approximation")
    p.add_argument("--approx", help="Matrix Market vector with the approximation, or 'random'")
    p.set_defaults(func=_cmd_estimate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "formats") and args.formats is None:
        args.formats = ["csv", "json"]
    try:
        return args.func(args)
    except (UsageError, mmio.MatrixMarketError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, EstimatorError, ExperimentError, FloatingPointError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
