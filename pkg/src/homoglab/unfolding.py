"""Unfolding, local averages, scale splitting and the two-scale corrector expansion.

All operators assume the domain mesh is aligned with the eps-lattice, i.e.
``h = eps/m`` for an integer ``m`` on both axes.  Then every eps-cell owns an
``(m+1) x (m+1)`` block of mesh nodes and unfolding is a reindexing.
Cell quantities are indexed ``[xi1, xi2, a1, a2]`` (cell first, then the
sample index inside the cell, axis 1 before axis 2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from homoglab.geometry import LatticeMap, classify_cells
from homoglab.mesh_fem import GAUSS_1D, GAUSS_REF, GridFunction, Mesh, gradient_at_gauss, recover_gradient


class AlignmentError(ValueError):
    """Mesh spacing is not eps/m for an integer m."""


def elements_per_cell(mesh: Mesh, eps: float) -> int:
    """``eps / h`` when it is the same positive integer on both axes."""
    ms = [eps / h for h in mesh.h]
    m = round(ms[0])
    if m < 1 or any(abs(v - m) > 1e-9 * m for v in ms):
        raise AlignmentError(f"mesh spacing {mesh.h} is not eps/m for eps={eps}")
    return int(m)


def trapezoid_weights(m: int) -> np.ndarray:
    """Composite trapezoid weights of ``m`` panels on [0, 1]."""
    w = np.full(m + 1, 1.0 / m)
    w[[0, -1]] *= 0.5
    return w


@dataclass(frozen=True)
class KernelH:
    """Tent kernel ``H(z) = prod_i (1 - |z_i|)^+``."""

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.prod(np.clip(1.0 - np.abs(z), 0.0, None), axis=-1)

    def scaled(self, x, eps: float, xi) -> np.ndarray:
        """``H((x - eps*xi)/eps)``."""
        return self((np.asarray(x, dtype=float) - eps * np.asarray(xi, dtype=float)) / eps)


H = KernelH()


@dataclass(frozen=True)
class UnfoldedField:
    """Per-cell sample blocks of ``T_eps(phi)`` over the interior cells.

    Cells in the remainder region carry the zero function and are not stored.
    """

    lattice: LatticeMap
    m: int
    blocks: np.ndarray  # (K1, K2, m+1, m+1)

    @property
    def weights(self) -> np.ndarray:
        w = trapezoid_weights(self.m)
        return np.outer(w, w)

    def cell_integrals(self) -> np.ndarray:
        """Trapezoid ``int_Y T(phi)(xi, y) dy`` for each interior cell."""
        return np.einsum("pqab,ab->pq", self.blocks, self.weights)

    def integral(self) -> float:
        """Trapezoid value of ``int_{Omega x Y} T(phi)``; remainder cells add nothing."""
        return float(self.lattice.eps ** 2 * self.cell_integrals().sum())

    def l2_norm(self) -> float:
        sq = np.einsum("pqab,ab->", self.blocks ** 2, self.weights)
        return float(np.sqrt(self.lattice.eps ** 2 * sq))

    def full_blocks(self) -> np.ndarray:
        """Blocks over every cell meeting the domain, zero on the remainder."""
        shape = self.lattice.cell_mask.shape + self.blocks.shape[2:]
        out = np.zeros(shape)
        K1, K2 = self.lattice.counts
        out[:K1, :K2] = self.blocks
        return out


def _lattice_for(mesh: Mesh, eps: float, lattice: LatticeMap | None) -> LatticeMap:
    lattice = lattice or classify_cells(mesh.domain, eps)
    if lattice.domain != mesh.domain:
        raise ValueError("lattice and mesh live on different domains")
    return lattice


def _node_table(phi: GridFunction) -> np.ndarray:
    """Nodal values indexed ``[i1, i2]``."""
    return phi.grid().T


def unfold(phi: GridFunction, lattice: LatticeMap) -> UnfoldedField:
    mesh = phi.mesh
    lattice = _lattice_for(mesh, lattice.eps, lattice)
    m = elements_per_cell(mesh, lattice.eps)
    K1, K2 = lattice.counts
    local = np.arange(m + 1)
    idx1 = np.arange(K1)[:, None] * m + local
    idx2 = np.arange(K2)[:, None] * m + local
    U = _node_table(phi)
    blocks = U[idx1[:, None, :, None], idx2[None, :, None, :]]
    return UnfoldedField(lattice, m, blocks)


def local_average(phi: GridFunction | UnfoldedField, lattice: LatticeMap | None = None) -> np.ndarray:
    """Per-cell trapezoid mean ``M_eps(phi)`` over the interior cells, shape (K1, K2)."""
    if isinstance(phi, UnfoldedField):
        return phi.cell_integrals()
    if lattice is None:
        raise ValueError("a lattice is needed to average a grid function")
    return unfold(phi, lattice).cell_integrals()


def cellwise_constant(values: np.ndarray, lattice: LatticeMap, m: int) -> UnfoldedField:
    """Unfolded form of the piecewise-constant field taking ``values`` on each cell."""
    values = np.asarray(values, dtype=float)
    if values.shape != lattice.counts:
        raise ValueError(f"expected per-cell values of shape {lattice.counts}")
    blocks = np.broadcast_to(values[:, :, None, None], values.shape + (m + 1, m + 1)).copy()
    return UnfoldedField(lattice, m, blocks)


def covered_l2(phi: GridFunction, lattice: LatticeMap) -> float:
    """Trapezoid L2 norm of ``phi`` over the covered box, computed on the domain mesh."""
    mesh = phi.mesh
    m = elements_per_cell(mesh, lattice.eps)
    n1, n2 = (k * m for k in lattice.counts)
    U = _node_table(phi)[: n1 + 1, : n2 + 1]
    h1, h2 = mesh.h
    w1 = np.full(n1 + 1, h1)
    w2 = np.full(n2 + 1, h2)
    w1[[0, -1]] *= 0.5
    w2[[0, -1]] *= 0.5
    return float(np.sqrt(w1 @ U ** 2 @ w2))


def trapezoid_integral(phi: GridFunction) -> float:
    """Composite trapezoid ``int_Omega phi`` on the mesh nodes."""
    h1, h2 = phi.mesh.h
    U = _node_table(phi)
    w1 = np.full(U.shape[0], h1)
    w2 = np.full(U.shape[1], h2)
    w1[[0, -1]] *= 0.5
    w2[[0, -1]] *= 0.5
    return float(w1 @ U @ w2)


# ---------------------------------------------------------------- scale splitting


def _mirror(k: np.ndarray, M: int) -> np.ndarray:
    """Reflect node indices across 0 and M (one reflection each side)."""
    k = np.abs(k)
    return np.where(k > M, 2 * M - k, k)


@dataclass(frozen=True)
class CellAverages:
    """Lattice values ``M_eps(phi)(eps*xi)`` for ``xi`` in the stencil of the mesh.

    ``values[p, q]`` belongs to the lattice corner ``eps*(p, q)``; the stencil
    runs one cell beyond the mesh so that every node has all its corners.
    """

    eps: float
    m: int
    values: np.ndarray  # (C1, C2)

    def _axis_weights(self, t: np.ndarray, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower corner and hat weight of the upper corner for local positions ``t`` (in cells)."""
        lo = np.clip(np.floor(t).astype(int), 0, n_cells - 2)
        frac = t - lo
        if np.any(frac < -1e-12) or np.any(frac > 1 + 1e-12):
            raise ValueError("point outside the averaging stencil")
        return lo, frac

    def at_cell_coords(self, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        """Interpolate at positions given in lattice units (``x / eps``)."""
        C1, C2 = self.values.shape
        l1, f1 = self._axis_weights(np.asarray(t1, dtype=float), C1)
        l2, f2 = self._axis_weights(np.asarray(t2, dtype=float), C2)
        V = self.values
        return ((1 - f1) * (1 - f2) * V[l1, l2] + f1 * (1 - f2) * V[l1 + 1, l2]
                + (1 - f1) * f2 * V[l1, l2 + 1] + f1 * f2 * V[l1 + 1, l2 + 1])

    def at_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.at_cell_coords(x[..., 0] / self.eps, x[..., 1] / self.eps)

    def _node_axis(self, n: int):
        k = np.arange(n + 1)
        return k // self.m, (k % self.m) / self.m

    def at_nodes(self, mesh: Mesh) -> GridFunction:
        """Nodal values of ``Q_eps``; exact integer bookkeeping on the aligned mesh."""
        m1, m2 = mesh.shape
        l1, f1 = self._node_axis(m1)
        l2, f2 = self._node_axis(m2)
        W1 = _interp_matrix(l1, f1, self.values.shape[0])
        W2 = _interp_matrix(l2, f2, self.values.shape[1])
        Q = W1 @ self.values @ W2.T  # [i1, i2]
        return GridFunction(mesh, Q.T.ravel())

    def at_gauss(self, mesh: Mesh) -> np.ndarray:
        """Values at the Gauss points, shape (n_elements, 4)."""
        m1, m2 = mesh.shape
        tabs = []
        for n, C in ((m1, self.values.shape[0]), (m2, self.values.shape[1])):
            e = np.arange(n)
            t = (e[:, None] % self.m + GAUSS_1D[None, :]) / self.m  # (elem, g)
            lo = np.broadcast_to((e // self.m)[:, None], t.shape)
            tabs.append(_interp_matrix(lo.ravel(), t.ravel(), C))  # rows: elem*2 + g
        Q = tabs[0] @ self.values @ tabs[1].T  # [(i, g1), (j, g2)]
        Q = Q.reshape(m1, 2, m2, 2)
        # element index j*m1 + i; Gauss order (g1, g2) = (0,0), (1,0), (0,1), (1,1)
        return Q.transpose(2, 0, 3, 1).reshape(m1 * m2, 4)


def _interp_matrix(lo: np.ndarray, frac: np.ndarray, n_cells: int) -> np.ndarray:
    W = np.zeros((lo.size, n_cells))
    rows = np.arange(lo.size)
    W[rows, lo] += 1.0 - frac
    upper = frac > 0
    W[rows[upper], lo[upper] + 1] += frac[upper]
    return W


def _stencil_counts(mesh: Mesh, m: int) -> tuple[int, int]:
    return tuple(n // m + 2 for n in mesh.shape)


def cell_averages(phi: GridFunction | Callable, eps: float, mesh: Mesh | None = None) -> CellAverages:
    """Lattice values for ``Q_eps``.

    A grid function is mirror-extended across the faces of the domain before
    averaging; a callable is averaged directly (the formula is evaluated
    outside the domain when the stencil leaves it).  Both use the trapezoid
    rule on the ``m``-grid of each cell.
    """
    if isinstance(phi, GridFunction):
        mesh = phi.mesh
    if mesh is None:
        raise ValueError("a mesh is needed to scale-split an analytic field")
    m = elements_per_cell(mesh, eps)
    C1, C2 = _stencil_counts(mesh, m)
    w = trapezoid_weights(m)
    if isinstance(phi, GridFunction):
        M1, M2 = mesh.shape
        U = _node_table(phi)
        i1 = _mirror(np.arange(C1 * m + 1), M1)
        i2 = _mirror(np.arange(C2 * m + 1), M2)
        ext = U[i1[:, None], i2[None, :]]
    else:
        h1, h2 = mesh.h
        X1, X2 = np.meshgrid(np.arange(C1 * m + 1) * h1, np.arange(C2 * m + 1) * h2, indexing="ij")
        ext = np.asarray(phi(np.stack([X1, X2], axis=-1)), dtype=float)
        ext = np.broadcast_to(ext, X1.shape)
    local = np.arange(m + 1)
    idx1 = np.arange(C1)[:, None] * m + local
    idx2 = np.arange(C2)[:, None] * m + local
    blocks = ext[idx1[:, None, :, None], idx2[None, :, None, :]]
    return CellAverages(float(eps), m, np.einsum("pqab,a,b->pq", blocks, w, w))


def scale_split(phi: GridFunction | Callable, eps: float, mesh: Mesh | None = None) -> GridFunction:
    """Nodal values of ``Q_eps(phi) = sum_xi M_eps(phi)(eps xi) H((x - eps xi)/eps)``."""
    avg = cell_averages(phi, eps, mesh)
    return avg.at_nodes(phi.mesh if isinstance(phi, GridFunction) else mesh)


def scale_split_direct(avg: CellAverages, x) -> np.ndarray:
    """Reference evaluation of ``Q_eps`` at points by summing the kernel over active corners."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape[0])
    for n, p in enumerate(x):
        base = np.floor(p / avg.eps).astype(int)
        for d1 in (-1, 0, 1, 2):
            for d2 in (-1, 0, 1, 2):
                xi = base + (d1, d2)
                weight = H.scaled(p, avg.eps, xi)
                if weight > 0:
                    out[n] += avg.values[xi[0], xi[1]] * weight
    return out


# ---------------------------------------------------------------- corrector expansion


def cell_coords_at_nodes(mesh: Mesh, m: int) -> np.ndarray:
    """Exact ``{x/eps}`` at the nodes of an aligned mesh, shape (n_nodes, 2)."""
    n1, n2 = mesh.node_shape
    Y1, Y2 = np.meshgrid((np.arange(n1) % m) / m, (np.arange(n2) % m) / m)
    return np.stack([Y1.ravel(), Y2.ravel()], axis=-1)


def cell_coords_at_gauss(mesh: Mesh, m: int) -> np.ndarray:
    """Exact ``{x/eps}`` at the Gauss points of an aligned mesh, shape (n_elements, 4, 2)."""
    m1, m2 = mesh.shape
    I, J = np.meshgrid(np.arange(m1) % m, np.arange(m2) % m)
    origin = np.stack([I.ravel(), J.ravel()], axis=-1)[:, None, :]
    return (origin + GAUSS_REF[None, :, :]) / m


@dataclass
class Expansion:
    value: GridFunction
    gradient: np.ndarray  # (n_elements, 4, 2)
    macro_gradient: list  # Q_eps(dPhi/dx_i) at Gauss points, per axis


def corrector_expansion(Phi: GridFunction, correctors, eps: float, *,
                        macro_gradient: tuple[GridFunction, GridFunction] | None = None) -> Expansion:
    """Two-scale expansion ``Phi + eps sum_i Q(dPhi/dx_i) chi_i(x/eps)`` and its gradient field.

    The gradient field is ``grad Phi + sum_i Q(dPhi/dx_i) grad_y chi_i(x/eps)`` at
    the Gauss points.  ``macro_gradient`` overrides the recovered nodal gradient
    of ``Phi``.
    """
    mesh = Phi.mesh
    m = elements_per_cell(mesh, eps)
    if len(correctors) != 2:
        raise ValueError("need one corrector per axis")
    cmesh = correctors[0].mesh
    if any(c.mesh != cmesh for c in correctors) or not cmesh.periodic:
        raise ValueError("correctors must share one periodic cell mesh")
    dPhi = macro_gradient if macro_gradient is not None else recover_gradient(Phi)
    y_nodes = cell_coords_at_nodes(mesh, m)
    y_gauss = cell_coords_at_gauss(mesh, m)
    value = Phi.values.copy()
    grad = gradient_at_gauss(Phi)
    macro = []
    for i, chi in enumerate(correctors):
        avg = cell_averages(dPhi[i], eps)
        value += eps * avg.at_nodes(mesh).values * chi(y_nodes)
        q = avg.at_gauss(mesh)
        grad = grad + q[..., None] * chi.gradient(y_gauss)
        macro.append(q)
    return Expansion(GridFunction(mesh, value), grad, macro)


# ---------------------------------------------------------------- face periodicity defect


def periodicity_defect(phi: GridFunction, lattice: LatticeMap) -> np.ndarray:
    """Per-axis L2 norm of ``T(phi)(., y' + e_i) - T(phi)(., y')`` over faces ``y_i = 0``.

    Only cells whose ``e_i`` neighbour is interior contribute.  The x-integral
    over a cell is ``eps^2`` times the (constant in x) face integrand.
    """
    U = unfold(phi, lattice)
    w = trapezoid_weights(U.m)
    B = U.blocks
    eps2 = lattice.eps ** 2
    d1 = (B[:-1, :, -1, :] - B[:-1, :, 0, :])  # axis 1 faces, samples along y2
    d2 = (B[:, :-1, :, -1] - B[:, :-1, :, 0])
    return np.array([np.sqrt(eps2 * np.einsum("pqb,b->", d1 ** 2, w)),
                     np.sqrt(eps2 * np.einsum("pqa,a->", d2 ** 2, w))])
