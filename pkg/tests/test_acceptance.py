"""Acceptance criteria, each run at its stated tolerance.

The four convergence studies run at full size from the shipped configs, so
this module takes roughly ten minutes on one core.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from homoglab import cell as C
from homoglab import checks
from homoglab import experiments as E
from homoglab import norms as N
from homoglab import unfolding as U
from homoglab.geometry import UNIT_SQUARE, classify_cells, distance_to_boundary
from homoglab.mesh_fem import SolverConfig, build_mesh, interpolate, solve_dirichlet

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
pytestmark = pytest.mark.slow


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def run_config(kind, name):
    return timed(E.STUDIES[kind], E.load_config(CONFIGS / f"{name}.cfg"))


def slope_text(fit):
    return "floor" if fit.slope is None else f"{fit.slope:.3f}"


def test_identity_coefficient(criterion):
    (tensor, chis), secs = timed(C.compute_tensor, C.identity(), 64)
    chi_max = max(float(np.abs(c.values).max()) for c in chis)
    dev = float(np.abs(tensor.entries - np.eye(2)).max())
    criterion(1, "identity coefficient", chi_max <= 1e-10 and dev <= 1e-10 and secs < 5,
              f"max|chi| = {chi_max:.1e}, max|A_hom - I| = {dev:.1e}, {secs:.2f} s")


def test_layered_oracle(criterion):
    a = lambda t: 2 + np.cos(2 * np.pi * t)
    (tensor, _), secs = timed(C.compute_tensor, C.layered(), 128)
    oracle = C.corrector_1d_closed_form(a).harmonic_mean
    assert oracle == pytest.approx(math.sqrt(3), rel=1e-10)
    rel = abs(tensor.entries[0, 0] - oracle) / oracle
    dev22 = abs(tensor.entries[1, 1] - 2.0)
    criterion(2, "layered oracle", rel <= 2e-3 and dev22 <= 1e-6 and secs < 30,
              f"rel err A11 = {rel:.1e}, |A22 - 2| = {dev22:.1e}, {secs:.2f} s")


def test_transpose_duality(criterion):
    A = C.skew_perturbed()
    cfg = SolverConfig(tol=1e-12)
    direct, _ = C.compute_tensor(A, 128, cfg)
    adjoint, _ = C.compute_tensor(A.transpose(), 128, cfg)
    defect = float(np.abs(adjoint.entries - direct.entries.T).max())
    criterion(3, "transpose duality", defect <= 1e-8, f"defect = {defect:.1e}")


def test_fem_order(criterion):
    exact = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    f = lambda x: 2 * np.pi ** 2 * exact(x)
    start = time.perf_counter()
    ns = np.array([16, 32, 64, 128])
    errs = []
    for n in ns:
        mesh = build_mesh(UNIT_SQUARE, int(n))
        u = solve_dirichlet(mesh, np.eye(2), np.zeros(4 * n), f, config=SolverConfig(tol=1e-12))
        errs.append(N.l2_error(u, exact))
    secs = time.perf_counter() - start
    slope = E.fit_rate(1.0 / ns, errs).slope
    criterion(4, "FEM order", abs(slope - 2.0) <= 0.1 and secs < 60, f"L2 slope = {slope:.3f}, {secs:.1f} s")


def test_operator_identities(criterion):
    start = time.perf_counter()
    results = [r for suite in ("unfolding", "norms", "geometry") for r in checks.run_suite(suite, 1e-12)]
    secs = time.perf_counter() - start
    worst = max(r.defect for r in results)
    criterion(5, "exact operator identities", all(r.passed for r in results) and secs < 10,
              f"{len(results)} checks, worst defect = {worst:.1e}, {secs:.2f} s")


def test_th3_smooth(criterion):
    rep, secs = run_config("th3", "th3_smooth")
    l2, rho = rep.slopes["l2_err"], rep.slopes["h1rho_err"]
    ok = l2.slope is not None and rho.slope is not None and l2.slope >= 0.85 and rho.slope >= 0.85
    criterion(6, "homogenization error, smooth data", ok and secs <= 900,
              f"L2 slope = {slope_text(l2)}, rho slope = {slope_text(rho)}, {secs:.0f} s")


def test_th3_rough(criterion):
    rep, secs = run_config("th3", "th3_rough")
    l2, rho = rep.slopes["l2_err"], rep.slopes["h1rho_err"]
    ok = l2.slope is not None and rho.slope is not None and l2.slope >= 0.45 and rho.slope >= 0.45
    criterion(7, "homogenization error, rough data", ok and secs <= 900,
              f"L2 slope = {slope_text(l2)}, rho slope = {slope_text(rho)}, {secs:.0f} s")


def test_th1(criterion):
    rep, secs = run_config("th1", "th1")
    fit = rep.slopes["l2_over_h12"]
    ratio = rep.column("estphi2_ratio")
    ok = fit.slope is not None and fit.slope >= 0.45 and ratio.max() <= 10
    criterion(8, "relative L2 error, zero source", ok,
              f"slope = {slope_text(fit)}, rho-norm ratio in [{ratio.min():.3f}, {ratio.max():.3f}], {secs:.0f} s")


def test_th65(criterion):
    rep, secs = run_config("th65", "th65")
    hyp = rep.column("hypothesis")
    fit = rep.slopes["l2_err"]
    ok = bool(np.all(np.diff(hyp) < 0)) and fit.slope is not None and fit.slope >= 0.2
    criterion(9, "oscillating boundary data", ok,
              f"sqrt(eps)*|g_eps|_H1/2 = {', '.join(f'{v:.3f}' for v in hyp)}; L2 slope = {slope_text(fit)}, {secs:.0f} s")


def _drift(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_inequality_audits(criterion):
    psi = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    rho2 = lambda x: distance_to_boundary(UNIT_SQUARE, x) ** 2
    r1 = [N.hardy_check(interpolate(build_mesh(UNIT_SQUARE, n), psi))[0] for n in (64, 128)]
    r2 = [N.hardy_check(interpolate(build_mesh(UNIT_SQUARE, n), rho2))[1] for n in (64, 128)]
    hardy_ok = max(r1 + r2) <= 10 and _drift(*r1) < 0.10 and _drift(*r2) < 0.10

    fields = [lambda x: np.sin(np.pi * x[..., 0]) * np.sin(2 * np.pi * x[..., 1]),
              lambda x: np.cos(np.pi * x[..., 0]) * np.cos(2 * np.pi * x[..., 1])]
    layer_ok, worst_const, worst_drift = True, 0.0, 0.0
    for f in fields:
        for gamma in (1 / 8, 1 / 16, 1 / 32):
            a, b = (N.layer_trace_audit(interpolate(build_mesh(UNIT_SQUARE, n), f), gamma) for n in (64, 128))
            worst_const = max(worst_const, a.trace_constant, b.trace_constant, a.layer_constant, b.layer_constant)
            drifts = [_drift(a.layer_constant, b.layer_constant)]
            if b.trace > 1e-8:
                drifts.append(_drift(a.trace_constant, b.trace_constant))
            worst_drift = max(worst_drift, *drifts)
    layer_ok = worst_const <= 10 and worst_drift < 0.10

    ratios = []
    for eps in (1 / 8, 1 / 16, 1 / 32, 1 / 64):
        mesh = build_mesh(UNIT_SQUARE, int(8 / eps))
        phi = interpolate(mesh, psi)
        ratios.append(float(np.max(U.periodicity_defect(phi, classify_cells(UNIT_SQUARE, eps)))) / eps)
    spread = max(ratios) / min(ratios)
    criterion(10, "inequality audits", hardy_ok and layer_ok and spread <= 1.3,
              f"Hardy r1 = {r1[0]:.3f}/{r1[1]:.3f}, r2 = {r2[0]:.3f}/{r2[1]:.3f}; layer-trace max C = {worst_const:.3f}, "
              f"drift {worst_drift:.1e}; defect/eps spread = {spread:.3f}")


def test_determinism(criterion, tmp_path):
    cfg = E.load_config(CONFIGS / "quick.cfg")
    paths = []
    for k in range(2):
        csv_path, _ = E.emit_report(E.run_study(cfg), tmp_path / f"run{k}")
        paths.append(csv_path)
    same = paths[0].read_bytes() == paths[1].read_bytes()
    criterion(11, "determinism", same, f"{len(paths[0].read_bytes())} bytes, identical = {same}")
