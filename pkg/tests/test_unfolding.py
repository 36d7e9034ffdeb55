import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from homoglab import cell as C
from homoglab import unfolding as U
from homoglab.geometry import UNIT_SQUARE, DomainSpec, classify_cells
from homoglab.mesh_fem import GridFunction, build_mesh, interpolate
from homoglab.norms import h1_seminorm, l2_norm, weighted_norm


def setup(eps=1 / 4, m=8, domain=UNIT_SQUARE):
    mesh = build_mesh(domain, tuple(int(round(L * m / eps)) for L in domain.extents))
    return mesh, classify_cells(domain, eps)


def test_alignment_required():
    mesh = build_mesh(UNIT_SQUARE, 30)
    with pytest.raises(U.AlignmentError):
        U.unfold(GridFunction(mesh, np.zeros(mesh.n_nodes)), classify_cells(UNIT_SQUARE, 1 / 4))


def test_unfold_constant_and_affine():
    mesh, lat = setup()
    one = U.unfold(GridFunction(mesh, np.ones(mesh.n_nodes)), lat)
    assert one.blocks.shape == (4, 4, 9, 9) and np.all(one.blocks == 1)
    x1 = U.unfold(interpolate(mesh, lambda x: x[..., 0]), lat)
    y = np.arange(9) / 8
    assert np.allclose(x1.blocks[0, 0], 0.25 * y[:, None], atol=1e-15)
    assert np.allclose(x1.blocks[2, 1], 0.25 * (2 + y[:, None]), atol=1e-15)


def test_remainder_cells_are_zero():
    dom = DomainSpec((1.0, 0.875))
    mesh, lat = setup(eps=0.25, m=8, domain=dom)
    uf = U.unfold(GridFunction(mesh, np.ones(mesh.n_nodes)), lat)
    full = uf.full_blocks()
    assert full.shape[:2] == (4, 4) and not np.any(full[:, 3])
    assert np.all(full[:, :3] == 1)


@given(st.integers(0, 2**32 - 1))
def test_integration_formula(seed):
    mesh, lat = setup(eps=1 / 4, m=8)
    phi = GridFunction(mesh, np.random.default_rng(seed).standard_normal(mesh.n_nodes))
    assert U.unfold(phi, lat).integral() == pytest.approx(U.trapezoid_integral(phi), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_unfolding_isometry(seed):
    dom = DomainSpec((1.0, 0.875))
    mesh, lat = setup(eps=0.25, m=8, domain=dom)
    phi = GridFunction(mesh, np.random.default_rng(seed).standard_normal(mesh.n_nodes))
    assert U.unfold(phi, lat).l2_norm() == pytest.approx(U.covered_l2(phi, lat), rel=1e-12)


def test_local_average_examples():
    mesh, lat = setup()
    assert np.allclose(U.local_average(GridFunction(mesh, np.full(mesh.n_nodes, 3.0)), lat), 3.0)
    avg = U.local_average(interpolate(mesh, lambda x: x[..., 0]), lat)
    xi1 = np.arange(4)[:, None]
    assert np.allclose(avg, 0.25 * xi1 + 0.125, atol=1e-15)
    again = U.local_average(U.cellwise_constant(avg, lat, 8))
    assert np.abs(again - avg).max() <= 1e-15


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.floats(-5, 5))
def test_kernel_partition_of_unity(z, shift):
    z = np.asarray(z) + shift
    base = np.floor(z).astype(int)
    total = sum(U.H(z - (base + (a, b))) for a in (-1, 0, 1, 2) for b in (-1, 0, 1, 2))
    assert abs(total - 1) <= 1e-12
    assert U.H(z) >= 0


def test_scale_split_constants_and_affine():
    eps = 1 / 8
    mesh, _ = setup(eps=eps, m=8)
    assert np.allclose(U.scale_split(GridFunction(mesh, np.full(mesh.n_nodes, -2.0)), eps).values, -2.0, atol=1e-15)
    Q = U.scale_split(lambda x: x[..., 0], eps, mesh)
    assert np.abs(Q.values - (mesh.node_coords()[:, 0] + eps / 2)).max() <= 1e-12


def test_scale_split_direct_summation(rng):
    eps = 1 / 8
    mesh, _ = setup(eps=eps, m=8)
    phi = interpolate(mesh, lambda x: np.sin(3 * x[..., 0]) * np.exp(x[..., 1]))
    avg = U.cell_averages(phi, eps)
    pts = rng.uniform(0, 1, size=(100, 2))
    assert np.abs(avg.at_points(pts) - U.scale_split_direct(avg, pts)).max() <= 1e-12
    assert np.abs(avg.at_gauss(mesh) - avg.at_points(mesh.gauss_points())).max() <= 1e-12
    nodes = avg.at_nodes(mesh).values[::37]
    assert np.abs(nodes - U.scale_split_direct(avg, mesh.node_coords()[::37])).max() <= 1e-12


def test_scale_split_mirror_extension():
    eps = 1 / 4
    mesh, _ = setup(eps=eps, m=8)
    phi = interpolate(mesh, lambda x: x[..., 0])
    avg = U.cell_averages(phi, eps)
    # the stencil cell beyond x1 = 1 reflects the last interior cell
    assert avg.values[4, 0] == pytest.approx(avg.values[3, 0])


def _ratio_q_stability(eps, seed=0):
    mesh, _ = setup(eps=eps, m=8)
    phi = GridFunction(mesh, np.random.default_rng(seed).standard_normal(mesh.n_nodes))
    Q = U.scale_split(phi, eps)
    return h1_seminorm(Q) * eps / l2_norm(phi)


def test_scale_split_gradient_bound():
    ratios = [_ratio_q_stability(e) for e in (1 / 4, 1 / 8, 1 / 16)]
    assert max(ratios) < 10
    assert max(ratios) / min(ratios) < 2


def test_scale_split_approximation_smooth():
    f = lambda x: np.sin(np.pi * x[..., 0]) * np.cos(2 * x[..., 1])
    ratios, rho_ratios = [], []
    for eps in (1 / 8, 1 / 16, 1 / 32):
        mesh, _ = setup(eps=eps, m=8)
        phi = interpolate(mesh, f)
        diff = GridFunction(mesh, phi.values - U.scale_split(phi, eps).values)
        ratios.append(l2_norm(diff) / (eps * h1_seminorm(phi)))
        rho_ratios.append(weighted_norm(diff, 1, "value") / (eps * (l2_norm(phi) + weighted_norm(phi, 1, "gradient"))))
    for r in (ratios, rho_ratios):
        assert max(r) < 5 and max(r) / min(r) < 1.5


def test_poincare_wirtinger_echo():
    ratios = []
    for eps in (1 / 8, 1 / 16, 1 / 32):
        mesh, lat = setup(eps=eps, m=8)
        phi = interpolate(mesh, lambda x: np.exp(x[..., 0]) * np.sin(2 * x[..., 1]))
        uf = U.unfold(phi, lat)
        avg = U.local_average(uf)
        dev = U.UnfoldedField(lat, uf.m, uf.blocks - avg[:, :, None, None]).l2_norm()
        ratios.append(dev / (eps * h1_seminorm(phi)))
    assert max(ratios) / min(ratios) < 1.2


def test_corrector_expansion_trivial_cases():
    eps = 1 / 8
    mesh, _ = setup(eps=eps, m=8)
    zero = [C.solve_corrector(C.identity(), i, C.cell_mesh(16)) for i in range(2)]
    Phi = interpolate(mesh, lambda x: np.sin(x[..., 0]) + x[..., 1] ** 2)
    ex = U.corrector_expansion(Phi, zero, eps)
    assert np.array_equal(ex.value.values, Phi.values)
    chis = C.solve_correctors(C.layered(), C.cell_mesh(32))
    const = GridFunction(mesh, np.full(mesh.n_nodes, 1.5))
    ex = U.corrector_expansion(const, chis, eps)
    assert np.allclose(ex.value.values, 1.5) and np.allclose(ex.gradient, 0.0)


def test_corrector_expansion_layered_direct(rng):
    eps = 1 / 8
    mesh, _ = setup(eps=eps, m=8)
    chis = C.solve_correctors(C.layered(), C.cell_mesh(128))
    Phi = interpolate(mesh, lambda x: x[..., 0])
    ex = U.corrector_expansion(Phi, chis, eps)
    assert np.allclose(ex.macro_gradient[0], 1.0) and np.allclose(ex.macro_gradient[1], 0.0)
    pick = rng.choice(mesh.n_elements * 4, size=100, replace=False)
    gp = mesh.gauss_points().reshape(-1, 2)[pick]
    s = gp / eps
    y = s - np.floor(s)
    direct = np.array([1.0, 0.0]) + chis[0].gradient(y)
    assert np.abs(ex.gradient.reshape(-1, 2)[pick] - direct).max() <= 1e-10


def test_corrector_expansion_rejects_mixed_cells():
    eps = 1 / 8
    mesh, _ = setup(eps=eps, m=8)
    a = C.solve_corrector(C.layered(), 0, C.cell_mesh(16))
    b = C.solve_corrector(C.layered(), 1, C.cell_mesh(32))
    with pytest.raises(ValueError):
        U.corrector_expansion(interpolate(mesh, lambda x: x[..., 0]), [a, b], eps)


def test_periodicity_defect_examples():
    eps = 1 / 8
    mesh, lat = setup(eps=eps, m=8)
    per = interpolate(mesh, lambda x: np.sin(2 * np.pi * x[..., 0] / eps))
    assert U.periodicity_defect(per, lat)[0] <= 1e-12
    b = np.array([1.5, -0.25])
    d = U.periodicity_defect(interpolate(mesh, lambda x: x @ b), lat)
    measure = (8 - 1) * 8 * eps ** 2
    assert np.allclose(d, eps * np.abs(b) * math.sqrt(measure), rtol=1e-12)


def test_periodicity_defect_scales_with_eps():
    vals = []
    for eps in (1 / 8, 1 / 16, 1 / 32):
        mesh, lat = setup(eps=eps, m=8)
        phi = interpolate(mesh, lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))
        vals.append(U.periodicity_defect(phi, lat)[0] / eps)
    assert max(vals) / min(vals) <= 1.3
