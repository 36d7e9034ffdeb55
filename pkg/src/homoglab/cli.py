"""Command-line entry point ``homoglab``.

Exit codes: 0 success, 1 usage or input error, 2 solver failure,
3 a check of ``ops-check`` failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from homoglab import cell as cellmod
from homoglab import checks, experiments
from homoglab.mesh_fem import CoefficientError, ConvergenceError, SolverConfig

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="homoglab", description="Periodic homogenization with rough Dirichlet data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("cell", help="solve the cell problems and write the homogenized tensor")
    c.add_argument("--coeff", required=True, choices=cellmod.FAMILIES)
    c.add_argument("--raster")
    c.add_argument("--cell-grid", type=int, default=cellmod.DEFAULT_CELL_GRID)
    c.add_argument("--out", required=True)

    s = sub.add_parser("solve", help="one eps-problem against its homogenized limit")
    s.add_argument("--coeff", required=True, choices=cellmod.FAMILIES)
    s.add_argument("--raster")
    s.add_argument("--eps", required=True, type=str)
    s.add_argument("--m", type=int, default=16)
    s.add_argument("--cell-grid", type=int, default=cellmod.DEFAULT_CELL_GRID)
    s.add_argument("--f", default="zero", choices=experiments.F_SELECTORS)
    s.add_argument("--g", default="smooth", choices=experiments.G_SELECTORS)
    s.add_argument("--config", help="optional config file for the remaining fields")
    s.add_argument("--out", required=True)

    st = sub.add_parser("study", help="run a convergence study")
    st.add_argument("kind", choices=sorted(experiments.STUDIES))
    st.add_argument("--config", required=True)
    st.add_argument("--out", required=True)

    o = sub.add_parser("ops-check", help="exact operator identities")
    o.add_argument("--suite", required=True, choices=sorted(checks.SUITES))
    o.add_argument("--tol", type=float, default=1e-12)
    return p


def _eps(text: str) -> float:
    from fractions import Fraction
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"bad eps {text!r}") from exc


def cmd_cell(args) -> int:
    A = cellmod.from_tag(args.coeff, args.raster)
    if args.cell_grid < 2:
        raise UsageError("cell grid must be at least 2")
    mesh = cellmod.cell_mesh(args.cell_grid)
    A.certify(mesh.gauss_points())
    tensor, _ = cellmod.compute_tensor(A, args.cell_grid, SolverConfig(tol=1e-12))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(tensor.to_json() + "\n")
    print(tensor.to_json())
    return EXIT_OK


def cmd_solve(args) -> int:
    eps = _eps(args.eps)
    fields = dict(coeff=args.coeff, raster=args.raster, m=args.m, cell_grid=args.cell_grid,
                  f=args.f, g=args.g, eps_list=(eps,))
    if args.config:
        config = experiments.load_config(args.config, **fields)
    else:
        config = experiments.ExperimentConfig(**fields)
    runner = experiments.run_oscillating_single if args.g == "oscillating" else experiments.run_single
    row = runner(config, eps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(experiments.report_csv([row]))
    print(experiments.report_csv([row]), end="")
    return EXIT_OK


def cmd_study(args) -> int:
    config = experiments.load_config(args.config, out_dir=args.out)
    report = experiments.STUDIES[args.kind](config)
    csv_path, json_path = experiments.emit_report(report, args.out)
    for name, fit in report.slopes.items():
        if isinstance(fit, experiments.RateFit):
            shown = "floor" if fit.status == "floor" else f"{fit.slope:.3f} (residual {fit.residual:.2e})"
            print(f"slope {name}: {shown}")
        else:
            print(f"{name}: {fit}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_ops_check(args) -> int:
    if not args.tol > 0:
        raise UsageError("tolerance must be positive")
    results = checks.run_suite(args.suite, args.tol)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMANDS = {"cell": cmd_cell, "solve": cmd_solve, "study": cmd_study, "ops-check": cmd_ops_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConvergenceError, experiments.SolverFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (UsageError, experiments.ConfigError, CoefficientError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
