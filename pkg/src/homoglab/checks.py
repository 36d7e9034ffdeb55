"""Exact-identity check suites behind ``homoglab ops-check``.

Each check returns the size of a defect that vanishes in exact arithmetic;
a suite passes when every defect is at most the tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from homoglab import geometry as geo
from homoglab import norms
from homoglab import unfolding as unf
from homoglab.mesh_fem import GridFunction, SolverConfig, build_mesh, interpolate


@dataclass(frozen=True)
class CheckResult:
    name: str
    defect: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.defect) and self.defect <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<40s} defect={self.defect:.3e}  tol={self.tol:.1e}"


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def unfolding_suite(tol: float, eps: float = 1 / 8, m: int = 8, seed: int = 0) -> list[CheckResult]:
    domain = geo.UNIT_SQUARE
    mesh = build_mesh(domain, int(round(m / eps)))
    lattice = geo.classify_cells(domain, eps)
    rng = np.random.default_rng(seed)
    x = mesh.node_coords()
    out = []
    integral, iso = 0.0, 0.0
    for _ in range(10):
        phi = GridFunction(mesh, rng.standard_normal(mesh.n_nodes))
        U = unf.unfold(phi, lattice)
        integral = max(integral, _rel(U.integral(), unf.trapezoid_integral(phi)))
        iso = max(iso, _rel(U.l2_norm(), unf.covered_l2(phi, lattice)))
    out.append(CheckResult("integration formula (unfold)", integral, tol))
    out.append(CheckResult("unfolding isometry on covered region", iso, tol))
    avg = unf.local_average(phi, lattice)
    again = unf.local_average(unf.cellwise_constant(avg, lattice, m))
    out.append(CheckResult("local average idempotence", _rel(again, avg), tol))
    c = 2.75
    Qc = unf.scale_split(GridFunction(mesh, np.full(mesh.n_nodes, c)), eps)
    out.append(CheckResult("scale split reproduces constants", _rel(Qc.values, c), tol))
    Qx = unf.scale_split(lambda p: p[..., 0], eps, mesh)
    out.append(CheckResult("scale split of x1 is x1 + eps/2", _rel(Qx.values, x[:, 0] + eps / 2), tol))
    b = np.array([0.7, -1.3])
    affine = interpolate(mesh, lambda p: p @ b)
    defect = unf.periodicity_defect(affine, lattice)
    K1, K2 = lattice.counts
    expect = [eps * abs(b[0]) * math.sqrt((K1 - 1) * K2 * eps ** 2),
              eps * abs(b[1]) * math.sqrt(K1 * (K2 - 1) * eps ** 2)]
    out.append(CheckResult("affine face jump equals eps * slope", _rel(defect, expect), tol))
    z = rng.uniform(-5, 5, size=(1000, 2))
    base = np.floor(z).astype(int)
    total = np.zeros(len(z))
    for d1 in (-1, 0, 1, 2):
        for d2 in (-1, 0, 1, 2):
            total += unf.H(z - (base + (d1, d2)))
    out.append(CheckResult("tent kernel partition of unity", _rel(total, 1.0), tol))
    return out


def norms_suite(tol: float, n: int = 32, seed: int = 1) -> list[CheckResult]:
    mesh = build_mesh(geo.UNIT_SQUARE, n)
    rng = np.random.default_rng(seed)
    u = GridFunction(mesh, rng.standard_normal(mesh.n_nodes))
    out = []
    hom = max(_rel(norms.weighted_norm(GridFunction(mesh, -3.5 * u.values), p, k), 3.5 * norms.weighted_norm(u, p, k))
              for p in (0, 1) for k in ("value", "gradient"))
    out.append(CheckResult("norm homogeneity", hom, tol))
    one = GridFunction(mesh, np.ones(mesh.n_nodes))
    out.append(CheckResult("L2 norm of 1 is sqrt(area)", _rel(norms.l2_norm(one), 1.0), tol))
    out.append(CheckResult("boundary L2 norm of 1 is sqrt(perimeter)", _rel(norms.boundary_trace_l2(one), 2.0), tol))
    g = norms.boundary_values(u)
    semi = norms.gagliardo_seminorm(g, mesh)
    out.append(CheckResult("Gagliardo seminorm translation invariance",
                           _rel(norms.gagliardo_seminorm(g + 4.0, mesh), semi), tol))
    out.append(CheckResult("Gagliardo norm of a constant", _rel(norms.gagliardo_h12(np.full(g.size, 3.0), mesh), 3.0 * 2.0), tol))
    T = np.array([[2.0, 0.3], [0.3, 1.5]])
    b = np.array([0.4, -1.1])
    affine = mesh.node_coords() @ b
    tight = SolverConfig(tol=1e-15, maxiter=5000)
    lift = norms.lift_boundary(affine[mesh.boundary_nodes()], T, mesh, tight)
    out.append(CheckResult("lift of affine data is the affine field", _rel(lift.values, affine), tol))
    lift1 = norms.lift_boundary(np.ones(g.size), T, mesh, tight)
    out.append(CheckResult("lift of constant data is constant", _rel(lift1.values, 1.0), tol))
    return out


def geometry_suite(tol: float) -> list[CheckResult]:
    dom = geo.DomainSpec((2.0, 1.0))
    out = []
    pts = np.array([[0.5, 0.25], [1.0, 0.5], [1.9, 0.95], [0.0, 0.3]])
    out.append(CheckResult("distance to boundary", _rel(geo.distance_to_boundary(dom, pts), [0.25, 0.5, 0.05, 0.0]), tol))
    lat = geo.classify_cells(geo.UNIT_SQUARE, 0.1)
    out.append(CheckResult("1/eps = 10 leaves no remainder", float(lat.counts != (10, 10) or not lat.remainder_empty), tol))
    lat = geo.classify_cells(geo.UNIT_SQUARE, 0.3)
    out.append(CheckResult("eps = 0.3 gives 3 x 3 interior cells", float(lat.counts != (3, 3) or lat.remainder_empty), tol))
    mesh = build_mesh(geo.UNIT_SQUARE, 8)
    layer = geo.boundary_layer_mask(geo.UNIT_SQUARE, 0.25, mesh)
    out.append(CheckResult("layer gamma = 1/4 on 8 x 8 has 48 elements", float(abs(layer.n_elements - 48)), tol))
    mesh = build_mesh(geo.UNIT_SQUARE, 64)
    phi = interpolate(mesh, lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))
    phi.values[mesh.boundary_nodes()] = 0.0
    cut = geo.cutoff_multiplier(phi, 1 / 32)
    rho = geo.distance_to_boundary(geo.UNIT_SQUARE, mesh.node_coords())
    near = rho <= 6 * math.sqrt(2) / 32
    out.append(CheckResult("cutoff vanishes within 6 sqrt(n) eps", float(np.abs(cut.values[near]).max()), tol))
    return out


SUITES = {"unfolding": unfolding_suite, "norms": norms_suite, "geometry": geometry_suite}


def run_suite(name: str, tol: float) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](tol)
