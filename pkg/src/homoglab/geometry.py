"""Rectangle domains, the boundary-distance function and the eps-lattice.

Everything here works for axis-aligned boxes in one or two dimensions.  The
distance to the boundary has a closed form on such domains, which is what
makes the weighted norms of :mod:`homoglab.norms` cheap to evaluate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# relative slack used when deciding whether L/eps is an integer
LATTICE_RTOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the closed domain."""


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned box ``(0, L1) x ... x (0, Ln)`` with ``n`` in {1, 2}."""

    extents: tuple[float, ...]

    def __post_init__(self):
        ext = tuple(float(v) for v in np.atleast_1d(self.extents))
        if len(ext) not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {len(ext)}")
        if any(not (v > 0 and math.isfinite(v)) for v in ext):
            raise ValueError(f"extents must be positive and finite, got {ext}")
        object.__setattr__(self, "extents", ext)

    @property
    def dimension(self) -> int:
        return len(self.extents)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    @property
    def perimeter(self) -> float:
        if self.dimension == 1:
            return 2.0  # two boundary points (counting measure)
        return 2.0 * (self.extents[0] + self.extents[1])


UNIT_SQUARE = DomainSpec((1.0, 1.0))


def _as_points(domain: DomainSpec, x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if domain.dimension == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
        pts = pts[..., None]
    if pts.shape[-1] != domain.dimension:
        raise ValueError(f"points must have trailing dimension {domain.dimension}")
    return pts


def distance_to_boundary(domain: DomainSpec, x, *, check: bool = True) -> np.ndarray:
    """Distance ``rho(x)`` from ``x`` to the boundary of the box.

    ``x`` is an array of points with trailing axis of length ``n``; a scalar
    (or a single point) gives a 0-d result.  Points outside the closed box
    raise :class:`DomainError` unless ``check`` is false.
    """
    pts = _as_points(domain, x)
    ext = np.asarray(domain.extents)
    lo = pts
    hi = ext - pts
    rho = np.minimum(lo, hi).min(axis=-1)
    if check:
        tol = 1e-12 * ext.max()
        if np.any(rho < -tol):
            raise DomainError("point outside the closed domain")
    return np.maximum(rho, 0.0)


def clipped_distance(domain: DomainSpec, x, eps: float) -> np.ndarray:
    """``min(1, rho(x) / eps)``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return np.minimum(1.0, distance_to_boundary(domain, x) / eps)


def cells_along(length: float, eps: float) -> int:
    """Number of whole eps-cells ``eps*(k + (0, 1))`` fitting in ``(0, length)``."""
    r = length / eps
    k = round(r)
    if abs(r - k) <= LATTICE_RTOL * max(r, 1.0):
        return int(k)
    return int(math.floor(r))


@dataclass(frozen=True)
class LatticeMap:
    """Classification of the eps-cells ``eps*(xi + Y)`` against the domain.

    ``counts[i]`` is the number of whole cells along axis ``i``; the interior
    index set is the box ``{0..counts[0]-1} x ...``.  ``partial[i]`` is true
    when a strip of width ``< eps`` is left over along axis ``i``.  The
    ``cell_mask`` covers every cell meeting the domain (whole or partial) and
    flags the interior ones; its complement is the remainder region.
    """

    domain: DomainSpec
    eps: float
    counts: tuple[int, ...]
    partial: tuple[bool, ...]
    cell_mask: np.ndarray = field(repr=False, compare=False)

    @property
    def interior_cells(self) -> np.ndarray:
        """Integer indices ``xi`` of the interior cells, shape (ncells, n)."""
        grids = np.meshgrid(*[np.arange(k) for k in self.counts], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @property
    def n_interior(self) -> int:
        return int(np.prod(self.counts))

    @property
    def covered_extents(self) -> tuple[float, ...]:
        """Extents of the covered box (the union of interior cells)."""
        return tuple(k * self.eps for k in self.counts)

    @property
    def covered_volume(self) -> float:
        return float(np.prod(self.covered_extents))

    @property
    def remainder_empty(self) -> bool:
        return not any(self.partial)

    @property
    def remainder_mask(self) -> np.ndarray:
        return ~self.cell_mask

    def in_covered(self, x) -> np.ndarray:
        """True where a point lies in the closure of the covered region."""
        pts = _as_points(self.domain, x)
        hi = np.asarray(self.covered_extents)
        return np.all(pts <= hi * (1 + LATTICE_RTOL), axis=-1)


def classify_cells(domain: DomainSpec, eps: float) -> LatticeMap:
    if not 0 < eps < min(domain.extents):
        raise ValueError(f"need 0 < eps < min(extents), got eps={eps}")
    counts = tuple(cells_along(L, eps) for L in domain.extents)
    partial = tuple(k * eps < L * (1 - LATTICE_RTOL) for k, L in zip(counts, domain.extents))
    shape = tuple(k + int(p) for k, p in zip(counts, partial))
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(0, k) for k in counts)] = True
    mask.setflags(write=False)
    return LatticeMap(domain, float(eps), counts, partial, mask)


@dataclass(frozen=True)
class LayerMask:
    """Elements and nodes lying in the boundary layer ``{rho < gamma}``."""

    gamma: float
    elements: np.ndarray = field(repr=False, compare=False)
    nodes: np.ndarray = field(repr=False, compare=False)

    @property
    def n_elements(self) -> int:
        return int(self.elements.sum())


def boundary_layer_mask(domain: DomainSpec, gamma: float, mesh) -> LayerMask:
    """Layer membership by element barycenter (and by node position)."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    rho_bary = distance_to_boundary(domain, mesh.element_centers())
    rho_node = distance_to_boundary(domain, mesh.node_coords())
    return LayerMask(float(gamma), rho_bary < gamma, rho_node < gamma)


def cutoff_multiplier(phi, eps: float, *, atol: float = 1e-14):
    """Return ``((rho - 6 sqrt(n) eps)^+ / rho) * phi`` as a nodal field.

    ``phi`` is a :class:`homoglab.mesh_fem.GridFunction` on a domain mesh and
    must vanish on the boundary nodes.  The result is zero wherever
    ``rho <= 6 sqrt(n) eps``.
    """
    from homoglab.mesh_fem import GridFunction

    mesh = phi.mesh
    domain = mesh.domain
    bnd = mesh.boundary_nodes()
    scale = max(1.0, float(np.abs(phi.values).max(initial=0.0)))
    if np.any(np.abs(phi.values[bnd]) > atol * scale):
        raise ValueError("cutoff_multiplier needs a field vanishing on the boundary")
    rho = distance_to_boundary(domain, mesh.node_coords())
    width = 6.0 * math.sqrt(domain.dimension) * eps
    factor = np.zeros_like(rho)
    inside = rho > width
    factor[inside] = (rho[inside] - width) / rho[inside]
    return GridFunction(mesh, factor * phi.values)
