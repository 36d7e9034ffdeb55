"""Convergence studies: configuration, single runs, rate fits and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from homoglab import cell as cellmod
from homoglab import norms
from homoglab.geometry import DomainSpec
from homoglab.mesh_fem import (ConvergenceError, GridFunction, Mesh, SolverConfig, apply_dirichlet,
                               assemble_load, assemble_stiffness, build_mesh, solve)
from homoglab.unfolding import AlignmentError, corrector_expansion

log = logging.getLogger(__name__)

CSV_COLUMNS = ("eps", "h", "l2_err", "h1rho_err", "h12_g", "hm12_proxy", "iters_eps", "iters_hom", "seconds")
F_SELECTORS = ("zero", "one", "manufactured")
G_SELECTORS = ("zero", "smooth", "affine", "rough-fourier", "oscillating")
SAMPLINGS = ("mesh", "cell")


class ConfigError(ValueError):
    """Bad configuration value or unknown key."""


class StudyError(RuntimeError):
    """A study could not produce enough rows."""


class SolverFailure(RuntimeError):
    """A subproblem solve failed; the message names it."""


@dataclass(frozen=True)
class ExperimentConfig:
    coeff: str = "isotropic-sin"
    raster: str | None = None
    extents: tuple[float, float] = (1.0, 1.0)
    eps_list: tuple[float, ...] = (1 / 8, 1 / 16, 1 / 32, 1 / 64)
    m: int = 16
    cell_grid: int = 128
    f: str = "zero"
    g: str = "smooth"
    alpha: float = 1.1
    k_max: int = 64
    beta: float = 0.25
    osc_amplitude: float = 1.0
    affine_b: tuple[float, float] = (0.0, 1.0)
    corrector_sampling: str = "mesh"
    proxy_grid: int = 256
    tol: float = 1e-10
    maxiter: int = 50000
    floor: float = 1e-9
    out_dir: str = "out"
    workers: int = 1
    record_seconds: bool = False

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(v) for v in self.extents))
        object.__setattr__(self, "eps_list", tuple(float(v) for v in self.eps_list))
        object.__setattr__(self, "affine_b", tuple(float(v) for v in self.affine_b))
        if self.coeff not in cellmod.FAMILIES:
            raise ConfigError(f"unknown coefficient family {self.coeff!r}")
        if self.coeff == "raster" and not self.raster:
            raise ConfigError("coeff = raster needs a raster file")
        if len(self.extents) != 2:
            raise ConfigError("extents must have two entries")
        DomainSpec(self.extents)
        if self.m < 8:
            raise ConfigError(f"m must be at least 8, got {self.m}")
        if self.cell_grid < 64:
            raise ConfigError(f"cell_grid must be at least 64, got {self.cell_grid}")
        if self.f not in F_SELECTORS:
            raise ConfigError(f"f must be one of {F_SELECTORS}")
        if self.g not in G_SELECTORS:
            raise ConfigError(f"g must be one of {G_SELECTORS}")
        if self.corrector_sampling not in SAMPLINGS:
            raise ConfigError(f"corrector_sampling must be one of {SAMPLINGS}")
        if len(self.affine_b) != 2:
            raise ConfigError("affine_b must have two entries")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        base = min(self.extents)
        for eps in self.eps_list:
            ratio = base / eps
            k = round(math.log2(ratio)) if ratio > 0 else -1
            if k < 1 or abs(ratio - 2 ** k) > 1e-9 * ratio:
                raise ConfigError(f"eps = {eps} is not a dyadic fraction of {base}")
        SolverConfig(self.tol, self.maxiter)

    @property
    def domain(self) -> DomainSpec:
        return DomainSpec(self.extents)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.tol, self.maxiter)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}


# ---------------------------------------------------------------- config files


def _parse_value(name: str, raw: str, kind: str):
    raw = raw.strip()
    try:
        if "tuple" in kind:
            items = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
            return tuple(float(Fraction(p)) for p in items)
        if kind.startswith("bool"):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(Fraction(raw))
        if "None" in kind and raw.lower() in ("", "none"):
            return None
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: str(f.type) for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    values.update(overrides)
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)


# ---------------------------------------------------------------- data selectors


def source_term(selector: str) -> Callable | None:
    if selector == "zero":
        return None
    if selector == "one":
        return lambda x: np.ones(x.shape[:-1])
    if selector == "manufactured":
        return lambda x: 2 * np.pi ** 2 * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    raise ConfigError(f"unknown source selector {selector!r}")


def boundary_point(domain: DomainSpec, s) -> np.ndarray:
    """Point at arclength ``s`` on the boundary, counter-clockwise from the origin."""
    L1, L2 = domain.extents
    P = domain.perimeter
    s = np.mod(np.asarray(s, dtype=float), P)
    x = np.empty(s.shape + (2,))
    bottom = s < L1
    right = (s >= L1) & (s < L1 + L2)
    top = (s >= L1 + L2) & (s < 2 * L1 + L2)
    left = s >= 2 * L1 + L2
    x[bottom] = np.stack([s[bottom], np.zeros(bottom.sum())], -1)
    x[right] = np.stack([np.full(right.sum(), L1), s[right] - L1], -1)
    x[top] = np.stack([L1 - (s[top] - L1 - L2), np.full(top.sum(), L2)], -1)
    x[left] = np.stack([np.zeros(left.sum()), L2 - (s[left] - 2 * L1 - L2)], -1)
    return x


@dataclass(frozen=True)
class BoundaryDataFamily:
    """Boundary data as a function of arclength, possibly depending on eps."""

    kind: str
    domain: DomainSpec
    alpha: float = 1.1
    k_max: int = 64
    beta: float = 0.25
    amplitude: float = 1.0
    affine_b: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in G_SELECTORS:
            raise ConfigError(f"unknown boundary data {self.kind!r}")

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> BoundaryDataFamily:
        return cls(config.g, config.domain, config.alpha, config.k_max, config.beta,
                   config.osc_amplitude, config.affine_b)

    @property
    def perimeter(self) -> float:
        return self.domain.perimeter

    @property
    def depends_on_eps(self) -> bool:
        return self.kind == "oscillating" and self.amplitude != 0.0

    def base(self, s) -> np.ndarray:
        """The eps-independent part ``g``."""
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(s)
        if self.kind == "rough-fourier":
            k = np.arange(1, self.k_max + 1)
            return np.sin(2 * np.pi * np.multiply.outer(s, k) / self.perimeter) @ (k ** -self.alpha)
        x = boundary_point(self.domain, s)
        if self.kind == "affine":
            return x @ np.asarray(self.affine_b)
        return x[..., 0] ** 2 - x[..., 1] ** 2  # smooth, also the base of the oscillating family

    def oscillation_count(self, eps: float) -> int:
        """Whole periods along the perimeter: ``round(1/eps)``."""
        return max(1, round(1.0 / eps))

    def __call__(self, s, eps: float | None = None) -> np.ndarray:
        g = self.base(s)
        if self.kind == "oscillating" and self.amplitude != 0.0:
            if eps is None:
                raise ValueError("oscillating data needs eps")
            n = self.oscillation_count(eps)
            g = g + eps ** self.beta * self.amplitude * np.sin(2 * np.pi * n * np.asarray(s) / self.perimeter)
        return g

    def on_mesh(self, mesh: Mesh, eps: float | None = None) -> np.ndarray:
        return self(mesh.boundary_arclength(), eps)


# ---------------------------------------------------------------- rate fits


@dataclass(frozen=True)
class RateFit:
    slope: float | None
    intercept: float | None
    residual: float | None
    n_used: int
    excluded: tuple[int, ...]
    status: str  # ok | floor

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"excluded": list(self.excluded)}


def fit_rate(eps_list, error_list, floor: float = 0.0) -> RateFit:
    """Least-squares slope of ``log err`` against ``log eps``.

    Errors at or below ``floor`` (or non-finite) are excluded; with fewer than
    three usable points the fit is flagged ``floor`` and no slope is given.
    """
    eps = np.asarray(eps_list, dtype=float)
    err = np.asarray(error_list, dtype=float)
    if eps.shape != err.shape:
        raise ValueError("eps and error lists differ in length")
    if np.any(eps <= 0):
        raise ValueError("eps values must be positive")
    good = np.isfinite(err) & (err > floor)
    excluded = tuple(int(i) for i in np.flatnonzero(~good))
    if good.sum() < 3:
        return RateFit(None, None, None, int(good.sum()), excluded, "floor")
    x, y = np.log(eps[good]), np.log(err[good])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.max(np.abs(y - (slope * x + intercept))))
    return RateFit(float(slope), float(intercept), resid, int(good.sum()), excluded, "ok")


# ---------------------------------------------------------------- single runs


@dataclass
class ReportRow:
    eps: float
    h: float
    l2_err: float
    h1rho_err: float
    h12_g: float
    hm12_proxy: float
    iters_eps: int
    iters_hom: int
    seconds: float = float("nan")
    extras: dict = field(default_factory=dict)

    def csv_values(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class ConvergenceReport:
    study: str
    config: ExperimentConfig
    rows: list[ReportRow] = field(default_factory=list)
    slopes: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        if name in CSV_COLUMNS:
            return np.array([getattr(r, name) for r in self.rows], dtype=float)
        return np.array([r.extras[name] for r in self.rows], dtype=float)


class Problem:
    """Everything a study needs that does not depend on eps: coefficient, tensor, correctors."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.coefficient = cellmod.from_tag(config.coeff, config.raster)
        self.coefficient.certify(cellmod.cell_mesh(config.cell_grid).gauss_points())
        cfg = SolverConfig(min(config.tol, 1e-12), config.maxiter)
        try:
            self.tensor, self.correctors = cellmod.compute_tensor(self.coefficient, config.cell_grid, cfg)
        except ConvergenceError as exc:
            raise SolverFailure(f"cell problem: {exc}") from exc
        self.data = BoundaryDataFamily.from_config(config)
        self.source = source_term(config.f)
        self._sampled: dict[int, list] = {}

    def mesh_for(self, eps: float) -> Mesh:
        m = self.config.m
        counts = []
        for L in self.config.extents:
            r = L * m / eps
            if abs(r - round(r)) > 1e-9 * r:
                raise AlignmentError(f"extent {L} is not a multiple of eps/m = {eps / m}")
            counts.append(int(round(r)))
        return build_mesh(self.config.domain, tuple(counts))

    def sampled_correctors(self):
        """Correctors as used on the domain mesh.

        With ``corrector_sampling = mesh`` each corrector is resampled on the
        ``m x m`` sub-grid of one eps-cell, i.e. at the domain-mesh nodes, so
        that its gradient lives in the same bilinear space as the
        eps-problem solution.  With ``cell`` the cell-mesh interpolant is used.
        """
        if self.config.corrector_sampling == "cell":
            return self.correctors
        m = self.config.m
        if m not in self._sampled:
            sub = cellmod.cell_mesh(m)
            y = sub.node_coords()
            self._sampled[m] = [cellmod.CellFunction(sub, chi(y), dict(chi.meta)) for chi in self.correctors]
        return self._sampled[m]

    def _solve(self, name: str, mesh: Mesh, coeff, trace) -> GridFunction:
        system = assemble_stiffness(mesh, coeff)
        if self.source is not None:
            system.rhs = assemble_load(mesh, self.source)
        try:
            return solve(apply_dirichlet(system, trace), self.config.solver)
        except ConvergenceError as exc:
            raise SolverFailure(f"{name} problem: {exc}") from exc

    def solve_eps(self, mesh: Mesh, eps: float, trace) -> GridFunction:
        coeff = cellmod.oscillating_coefficient_at_gauss(self.coefficient, mesh, eps)
        return self._solve("eps", mesh, coeff, trace)

    def solve_hom(self, mesh: Mesh, trace, *, with_source: bool = True) -> GridFunction:
        if with_source:
            return self._solve("homogenized", mesh, self.tensor.entries, trace)
        try:
            return norms.lift_boundary(trace, self.tensor, mesh, self.config.solver)
        except ConvergenceError as exc:
            raise SolverFailure(f"lifting problem: {exc}") from exc

    def proxy(self, eps: float | None) -> float:
        """``H^{-1/2}`` proxy of the boundary data on a mesh of at most ``proxy_grid`` per axis."""
        L = self.config.extents
        n = self.config.proxy_grid
        if eps is not None:
            n = min(n, int(round(max(L) * self.config.m / eps)))
        scale = n / max(L)
        mesh = build_mesh(self.config.domain, tuple(max(2, int(round(v * scale))) for v in L))
        try:
            return norms.hminus12_proxy(self.data.on_mesh(mesh, eps), self.tensor, mesh, self.config.solver)
        except ConvergenceError as exc:
            raise SolverFailure(f"lifting problem: {exc}") from exc


def _finish_row(problem: Problem, eps: float, mesh: Mesh, trace, phi_eps: GridFunction,
                Phi: GridFunction, reference: GridFunction, started: float, extras: dict) -> ReportRow:
    exp = corrector_expansion(Phi, problem.sampled_correctors(), eps)
    l2 = norms.l2_error(phi_eps, reference)
    h1rho = norms.rho_weighted_h1_error(phi_eps, exp.gradient, mesh)
    h12 = norms.gagliardo_h12(trace, mesh)
    proxy = problem.proxy(eps if problem.data.depends_on_eps else None)
    extras = dict(extras)
    extras["rho_norm_eps"] = norms.rho_norm(phi_eps)
    extras["hypothesis"] = math.sqrt(eps) * h12
    extras["estphi2_ratio"] = extras["rho_norm_eps"] / (math.sqrt(eps) * h12 + proxy) if h12 + proxy > 0 else 0.0
    extras["l2_over_h12"] = l2 / h12 if h12 > 0 else 0.0
    extras["residual_eps"] = phi_eps.meta.get("residual", 0.0)
    elapsed = time.perf_counter() - started
    extras["elapsed"] = elapsed
    seconds = elapsed if problem.config.record_seconds else float("nan")
    return ReportRow(float(eps), max(mesh.h), l2, h1rho, h12, proxy,
                     int(phi_eps.meta.get("iterations", 0)), int(Phi.meta.get("iterations", 0)),
                     seconds, extras)


def run_single(config: ExperimentConfig, eps: float, problem: Problem | None = None) -> ReportRow:
    """Solve the eps-problem and the homogenized problem on one mesh and measure the errors."""
    problem = problem or Problem(config)
    started = time.perf_counter()
    mesh = problem.mesh_for(eps)
    trace = problem.data.on_mesh(mesh, eps)
    phi_eps = problem.solve_eps(mesh, eps, trace)
    Phi = problem.solve_hom(mesh, trace)
    return _finish_row(problem, eps, mesh, trace, phi_eps, Phi, Phi, started, {})


def run_oscillating_single(config: ExperimentConfig, eps: float, problem: Problem | None = None) -> ReportRow:
    """One row of the oscillating-data study.

    ``l2_err`` is ``||phi_eps - phi_g||`` against the lift of the limit data
    ``g``; ``h1rho_err`` compares with the expansion of the homogenized
    solution for ``g_eps``.
    """
    problem = problem or Problem(config)
    if config.f != "zero":
        raise ConfigError("the oscillating study runs with f = zero")
    started = time.perf_counter()
    mesh = problem.mesh_for(eps)
    trace = problem.data.on_mesh(mesh, eps)
    phi_eps = problem.solve_eps(mesh, eps, trace)
    Phi_eps = problem.solve_hom(mesh, trace)
    limit_trace = problem.data.base(mesh.boundary_arclength())
    if np.array_equal(limit_trace, trace):
        phi_g = Phi_eps
    else:
        phi_g = problem.solve_hom(mesh, limit_trace, with_source=False)
    extras = {"l2_err_g_eps": norms.l2_error(phi_eps, Phi_eps), "iters_limit": int(phi_g.meta.get("iterations", 0))}
    return _finish_row(problem, eps, mesh, trace, phi_eps, Phi_eps, phi_g, started, extras)


# ---------------------------------------------------------------- studies


def _worker(args):
    kind, config, eps = args
    runner = run_oscillating_single if kind == "th65" else run_single
    return runner(config, eps)


def _collect(kind: str, config: ExperimentConfig) -> list[ReportRow]:
    eps_sorted = sorted(config.eps_list, reverse=True)
    if len(eps_sorted) < 3:
        raise StudyError("a study needs at least three eps values")
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            rows = list(pool.map(_worker, [(kind, config, e) for e in eps_sorted]))
    else:
        problem = Problem(config)
        runner = run_oscillating_single if kind == "th65" else run_single
        rows = []
        for eps in eps_sorted:
            log.info("%s: eps = %g", kind, eps)
            rows.append(runner(config, eps, problem))
    return rows


def _fit_columns(report: ConvergenceReport, columns) -> None:
    eps = report.column("eps")
    for name in columns:
        report.slopes[name] = fit_rate(eps, report.column(name), report.config.floor)


def run_study(config: ExperimentConfig) -> ConvergenceReport:
    """Homogenization error study: slopes of the L2 and rho-weighted corrector errors."""
    report = ConvergenceReport("th3", config, _collect("th3", config))
    _fit_columns(report, ("l2_err", "h1rho_err"))
    return report


def run_th1_study(config: ExperimentConfig) -> ConvergenceReport:
    """Study with ``f = 0``; the L2 error is also reported relative to ``||g||_{H^1/2}``."""
    config = config.replace(f="zero")
    report = ConvergenceReport("th1", config, _collect("th1", config))
    _fit_columns(report, ("l2_err", "h1rho_err", "l2_over_h12"))
    ratio = report.column("estphi2_ratio")
    report.slopes["estphi2_ratio_max"] = float(ratio.max()) if ratio.size else None
    return report


def run_oscillating_study(config: ExperimentConfig) -> ConvergenceReport:
    if config.g != "oscillating":
        config = config.replace(g="oscillating")
    if config.beta <= 0:
        log.warning("beta <= 0 is exploratory: the hypothesis quantity need not vanish")
    report = ConvergenceReport("th65", config.replace(f="zero"), [])
    report.rows = _collect("th65", report.config)
    _fit_columns(report, ("l2_err", "h1rho_err", "hypothesis"))
    hyp = report.column("hypothesis")
    report.slopes["hypothesis_strictly_decreasing"] = bool(np.all(np.diff(hyp) < 0))
    return report


STUDIES = {"th3": run_study, "th1": run_th1_study, "th65": run_oscillating_study}


# ---------------------------------------------------------------- reports


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(v) for v in row.csv_values()])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, RateFit):
        return v.to_dict()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def emit_report(report: ConvergenceReport, path) -> tuple[Path, Path]:
    """Write the CSV and a companion JSON; ``path`` is a ``.csv`` file or a directory."""
    path = Path(path)
    if path.suffix == ".csv":
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path = path
    else:
        path.mkdir(parents=True, exist_ok=True)
        csv_path = path / f"{report.study}.csv"
    json_path = csv_path.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        fh.write(report_csv(report.rows))
    meta = {
        "study": report.study,
        "slopes": {k: _jsonable(v) for k, v in report.slopes.items()},
        "config": report.config.echo(),
        "rows": [{k: _jsonable(v) for k, v in row.extras.items()} | {"eps": row.eps} for row in report.rows],
    }
    with open(json_path, "w", newline="") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return csv_path, json_path
