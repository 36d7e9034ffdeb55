import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from homoglab import geometry as geo
from homoglab.mesh_fem import GridFunction, build_mesh, interpolate
from homoglab.norms import h1_seminorm, l2_norm


def test_domain_validation():
    with pytest.raises(ValueError):
        geo.DomainSpec((1.0, -1.0))
    with pytest.raises(ValueError):
        geo.DomainSpec((1.0, 1.0, 1.0))
    d = geo.DomainSpec((2.0, 1.0))
    assert d.dimension == 2 and d.volume == 2.0 and d.perimeter == 6.0
    assert geo.DomainSpec(3.0).dimension == 1


@pytest.mark.parametrize("ext,x,expected", [
    ((1.0, 1.0), (0.5, 0.5), 0.5),
    ((1.0, 1.0), (0.0, 0.3), 0.0),
    ((2.0, 1.0), (0.4, 0.45), 0.4),
])
def test_distance_examples(ext, x, expected):
    assert geo.distance_to_boundary(geo.DomainSpec(ext), x) == pytest.approx(expected, abs=1e-15)


def test_distance_outside_raises():
    with pytest.raises(geo.DomainError):
        geo.distance_to_boundary(geo.UNIT_SQUARE, (1.2, 0.5))


def test_distance_one_dimensional():
    d = geo.DomainSpec((3.0,))
    assert np.allclose(geo.distance_to_boundary(d, np.array([0.0, 1.0, 2.5])), [0.0, 1.0, 0.5])


points = st.tuples(st.floats(0, 2), st.floats(0, 1))


@given(points, points)
def test_distance_is_1_lipschitz(x, y):
    d = geo.DomainSpec((2.0, 1.0))
    rx, ry = geo.distance_to_boundary(d, x), geo.distance_to_boundary(d, y)
    assert abs(rx - ry) <= math.dist(x, y) + 1e-12


def test_clipped_distance():
    eps = 0.1
    assert geo.clipped_distance(geo.UNIT_SQUARE, (0.0, 0.5), eps) == 0.0
    assert geo.clipped_distance(geo.UNIT_SQUARE, (0.2, 0.5), eps) == 1.0
    assert geo.clipped_distance(geo.UNIT_SQUARE, (0.025, 0.5), eps) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        geo.clipped_distance(geo.UNIT_SQUARE, (0.5, 0.5), 0.0)


@pytest.mark.parametrize("eps,count,empty", [(0.25, 16, True), (0.3, 9, False), (0.6, 1, False)])
def test_classify_cells_examples(eps, count, empty):
    lat = geo.classify_cells(geo.UNIT_SQUARE, eps)
    assert lat.n_interior == count
    assert lat.remainder_empty is empty


def test_classify_cells_rejects_large_eps():
    with pytest.raises(ValueError):
        geo.classify_cells(geo.UNIT_SQUARE, 1.0)


@given(st.integers(2, 40), st.integers(2, 40))
def test_integer_ratio_leaves_no_remainder(k1, k2):
    # eps = 1/k1 on a box whose second side is k2 cells long
    eps = 1.0 / k1
    dom = geo.DomainSpec((1.0, k2 * eps))
    lat = geo.classify_cells(dom, eps) if eps < min(dom.extents) else None
    if lat is None:
        return
    assert lat.remainder_empty
    assert lat.counts == (k1, k2)
    assert lat.covered_volume == pytest.approx(dom.volume, rel=1e-12)


@given(st.floats(0.05, 0.95), st.floats(0.3, 2.0), st.floats(0.3, 2.0))
def test_interior_cells_inside_domain(eps_frac, L1, L2):
    dom = geo.DomainSpec((L1, L2))
    eps = eps_frac * min(L1, L2)
    lat = geo.classify_cells(dom, eps)
    xi = lat.interior_cells
    upper = (xi + 1) * eps
    assert np.all(upper <= np.asarray(dom.extents) * (1 + 1e-12))
    # the remainder strip is thinner than one cell
    for k, L in zip(lat.counts, dom.extents):
        assert -1e-12 * L <= L - k * eps < eps * (1 + 1e-12)


def test_layer_mask_examples():
    mesh = build_mesh(geo.UNIT_SQUARE, 8)
    assert geo.boundary_layer_mask(geo.UNIT_SQUARE, 0.5, mesh).n_elements == 64
    # barycenters sit at odd multiples of 1/16; rho >= 1/4 only for the central 4 x 4 block
    assert geo.boundary_layer_mask(geo.UNIT_SQUARE, 0.25, mesh).n_elements == 48
    assert geo.boundary_layer_mask(geo.UNIT_SQUARE, 0.07, mesh).n_elements == 28
    assert geo.boundary_layer_mask(geo.UNIT_SQUARE, 0.01, mesh).n_elements == 0


@given(st.floats(0.001, 0.6), st.floats(0.001, 0.6))
def test_layer_mask_monotone(g1, g2):
    mesh = build_mesh(geo.UNIT_SQUARE, 16)
    lo, hi = sorted((g1, g2))
    a = geo.boundary_layer_mask(geo.UNIT_SQUARE, lo, mesh)
    b = geo.boundary_layer_mask(geo.UNIT_SQUARE, hi, mesh)
    assert np.all(b.elements[a.elements]) and np.all(b.nodes[a.nodes])


def _sine(mesh):
    u = interpolate(mesh, lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))
    u.values[mesh.boundary_nodes()] = 0.0
    return u


def test_cutoff_zero_field_and_precondition():
    mesh = build_mesh(geo.UNIT_SQUARE, 16)
    zero = GridFunction(mesh, np.zeros(mesh.n_nodes))
    assert not np.any(geo.cutoff_multiplier(zero, 0.01).values)
    with pytest.raises(ValueError):
        geo.cutoff_multiplier(GridFunction(mesh, np.ones(mesh.n_nodes)), 0.01)


def test_cutoff_formula_and_support():
    mesh = build_mesh(geo.UNIT_SQUARE, 128)
    eps = 1 / 128
    phi = _sine(mesh)
    cut = geo.cutoff_multiplier(phi, eps)
    rho = geo.distance_to_boundary(geo.UNIT_SQUARE, mesh.node_coords())
    width = 6 * math.sqrt(2) * eps
    assert not np.any(cut.values[rho <= width])
    far = rho >= 2 * width
    assert np.allclose(cut.values[far], phi.values[far] * (1 - width / rho[far]), rtol=0, atol=1e-15)


def test_cutoff_distance_bounded_in_eps():
    # the 6 sqrt(2) eps layer swallows the whole square at eps = 1/16, so the
    # ratio approaches its small-eps limit from below; check boundedness and
    # that the increments shrink
    ratios = []
    for eps in (1 / 16, 1 / 32, 1 / 64, 1 / 128):
        mesh = build_mesh(geo.UNIT_SQUARE, 256)
        phi = _sine(mesh)
        cut = geo.cutoff_multiplier(phi, eps)
        diff = GridFunction(mesh, phi.values - cut.values)
        ratios.append(l2_norm(diff) / (eps * h1_seminorm(phi)))
    steps = np.diff(ratios)
    assert max(ratios) < 10
    assert np.all(steps > 0) and np.all(np.diff(steps) < 0)
