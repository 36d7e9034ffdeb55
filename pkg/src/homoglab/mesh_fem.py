"""Bilinear finite elements on uniform rectangular meshes.

Meshes are tensor-product grids of ``m1 x m2`` square-ish elements, either on
a :class:`~homoglab.geometry.DomainSpec` (Dirichlet problems) or on the unit
cell with opposite faces identified (cell problems).  Every integral uses the
2x2 Gauss rule, and coefficients are sampled at the Gauss points.

Node numbering is row-major with x1 running fastest: node ``(i, j)`` has index
``j*(m1+1) + i`` on a domain mesh and ``(j % m2)*m1 + (i % m1)`` on a periodic
mesh.  Element ``(i, j)`` has index ``j*m1 + i`` and local nodes
``(i, j), (i+1, j), (i, j+1), (i+1, j+1)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from homoglab.geometry import DomainSpec

log = logging.getLogger(__name__)

_G = 0.5 / np.sqrt(3.0)
GAUSS_1D = np.array([0.5 - _G, 0.5 + _G])
# reference Gauss points, ordered (a,a), (b,a), (a,b), (b,b)
GAUSS_REF = np.array([[GAUSS_1D[0], GAUSS_1D[0]], [GAUSS_1D[1], GAUSS_1D[0]],
                      [GAUSS_1D[0], GAUSS_1D[1]], [GAUSS_1D[1], GAUSS_1D[1]]])
PROBES = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]])


class CoefficientError(ValueError):
    """Coefficient fails the ellipticity certificate."""


class ConvergenceError(RuntimeError):
    """Krylov iteration hit its cap before reaching the tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def shape_values(ref: np.ndarray) -> np.ndarray:
    """Bilinear shape function values at reference points, shape (npts, 4)."""
    s, t = ref[..., 0], ref[..., 1]
    return np.stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t], axis=-1)


def shape_gradients(ref: np.ndarray, h: tuple[float, float]) -> np.ndarray:
    """Physical shape gradients at reference points, shape (npts, 2, 4)."""
    s, t = ref[..., 0], ref[..., 1]
    dx = np.stack([-(1 - t), (1 - t), -t, t], axis=-1) / h[0]
    dy = np.stack([-(1 - s), -s, (1 - s), s], axis=-1) / h[1]
    return np.stack([dx, dy], axis=-2)


@dataclass(frozen=True)
class Mesh:
    domain: DomainSpec
    shape: tuple[int, int]
    periodic: bool = False

    def __post_init__(self):
        if self.domain.dimension != 2:
            raise ValueError("finite element meshes are two-dimensional")
        shape = tuple(int(v) for v in self.shape)
        if len(shape) != 2 or min(shape) < 2:
            raise ValueError(f"need at least 2 subdivisions per axis, got {self.shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def h(self) -> tuple[float, float]:
        return (self.domain.extents[0] / self.shape[0], self.domain.extents[1] / self.shape[1])

    @property
    def node_shape(self) -> tuple[int, int]:
        """Nodes per axis as (n1, n2)."""
        m1, m2 = self.shape
        return (m1, m2) if self.periodic else (m1 + 1, m2 + 1)

    @property
    def n_nodes(self) -> int:
        n1, n2 = self.node_shape
        return n1 * n2

    @property
    def n_elements(self) -> int:
        return self.shape[0] * self.shape[1]

    def node_index(self, i, j):
        n1, n2 = self.node_shape
        if self.periodic:
            return (np.asarray(j) % n2) * n1 + (np.asarray(i) % n1)
        return np.asarray(j) * n1 + np.asarray(i)

    def node_coords(self) -> np.ndarray:
        n1, n2 = self.node_shape
        h1, h2 = self.h
        x1 = np.arange(n1) * h1
        x2 = np.arange(n2) * h2
        X1, X2 = np.meshgrid(x1, x2)
        return np.stack([X1.ravel(), X2.ravel()], axis=-1)

    @cached_property
    def connectivity(self) -> np.ndarray:
        m1, m2 = self.shape
        I, J = np.meshgrid(np.arange(m1), np.arange(m2))
        I, J = I.ravel(), J.ravel()
        conn = np.stack([self.node_index(I, J), self.node_index(I + 1, J),
                         self.node_index(I, J + 1), self.node_index(I + 1, J + 1)], axis=-1)
        conn = conn.astype(np.int32 if self.n_nodes < 2**31 else np.int64)
        conn.setflags(write=False)
        return conn

    def element_origins(self) -> np.ndarray:
        m1, m2 = self.shape
        h1, h2 = self.h
        I, J = np.meshgrid(np.arange(m1), np.arange(m2))
        return np.stack([I.ravel() * h1, J.ravel() * h2], axis=-1)

    def element_centers(self) -> np.ndarray:
        return self.element_origins() + 0.5 * np.asarray(self.h)

    def gauss_points(self) -> np.ndarray:
        """Physical Gauss points, shape (n_elements, 4, 2)."""
        return self.element_origins()[:, None, :] + GAUSS_REF[None, :, :] * np.asarray(self.h)

    @property
    def gauss_weight(self) -> float:
        h1, h2 = self.h
        return 0.25 * h1 * h2

    def boundary_nodes(self) -> np.ndarray:
        """Boundary node indices counter-clockwise from the origin (no repeats)."""
        if self.periodic:
            raise ValueError("periodic meshes have no boundary")
        m1, m2 = self.shape
        bottom = self.node_index(np.arange(0, m1), 0)
        right = self.node_index(m1, np.arange(0, m2))
        top = self.node_index(np.arange(m1, 0, -1), m2)
        left = self.node_index(0, np.arange(m2, 0, -1))
        return np.concatenate([bottom, right, top, left])

    def boundary_arclength(self) -> np.ndarray:
        """Arclength of each boundary node along the counter-clockwise curve."""
        m1, m2 = self.shape
        h1, h2 = self.h
        L1, L2 = self.domain.extents
        return np.concatenate([np.arange(m1) * h1, L1 + np.arange(m2) * h2,
                               L1 + L2 + np.arange(m1) * h1, 2 * L1 + L2 + np.arange(m2) * h2])

    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes()] = False
        return np.flatnonzero(mask)


def build_mesh(domain_or_cell: DomainSpec | None, subdivisions, periodic: bool = False) -> Mesh:
    """Uniform mesh; ``None`` stands for the unit cell."""
    domain = DomainSpec((1.0, 1.0)) if domain_or_cell is None else domain_or_cell
    if np.isscalar(subdivisions):
        subdivisions = (subdivisions, subdivisions)
    return Mesh(domain, tuple(subdivisions), periodic)


@dataclass
class GridFunction:
    mesh: Mesh
    values: np.ndarray
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError(f"expected {self.mesh.n_nodes} nodal values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function has non-finite values")

    def grid(self) -> np.ndarray:
        """Values as a 2-D array indexed ``[j, i]``."""
        n1, n2 = self.mesh.node_shape
        return self.values.reshape(n2, n1)


def interpolate(mesh: Mesh, func: Callable[[np.ndarray], np.ndarray]) -> GridFunction:
    return GridFunction(mesh, func(mesh.node_coords()))


@dataclass
class LinearSystem:
    """Sparse system, possibly reduced to the free nodes of a Dirichlet problem."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    mesh: Mesh
    symmetric: bool = True
    free: np.ndarray | None = None
    fixed: np.ndarray | None = None
    fixed_values: np.ndarray | None = None
    zero_mean: bool = False


def _coefficient_array(mesh: Mesh, coeff) -> np.ndarray:
    if callable(coeff):
        coeff = coeff(mesh.gauss_points())
    A = np.asarray(coeff, dtype=float)
    if A.shape == (2, 2):
        A = np.broadcast_to(A, (mesh.n_elements, 4, 2, 2))
    if A.shape != (mesh.n_elements, 4, 2, 2):
        raise ValueError(f"coefficient must have shape (2,2) or {(mesh.n_elements, 4, 2, 2)}")
    return A


def check_ellipticity(A: np.ndarray, c: float, rtol: float = 1e-12) -> None:
    """Raise :class:`CoefficientError` if ``A xi.xi < c |xi|^2`` for a probe."""
    for xi in PROBES:
        q = np.einsum("...kl,k,l->...", A, xi, xi)
        worst = float(q.min()) - c * float(xi @ xi)
        if worst < -rtol * max(1.0, c):
            raise CoefficientError(f"ellipticity fails for probe {xi.tolist()}: "
                                   f"min A xi.xi - c|xi|^2 = {worst:.3e}")


def assemble_stiffness(mesh: Mesh, coeff_at_gauss, ellipticity: float | None = None) -> LinearSystem:
    """Stiffness matrix ``K[a, b] = int A grad(phi_b) . grad(phi_a)``."""
    A = _coefficient_array(mesh, coeff_at_gauss)
    if ellipticity is not None:
        check_ellipticity(A, ellipticity)
    symmetric = bool(np.array_equal(A, np.swapaxes(A, -1, -2)))
    B = shape_gradients(GAUSS_REF, mesh.h)  # (4, 2, 4)
    w = mesh.gauss_weight
    Ke = np.zeros((mesh.n_elements, 4, 4))
    for g in range(4):
        AB = np.einsum("ekl,lb->ekb", A[:, g], B[g])
        Ke += w * np.einsum("ka,ekb->eab", B[g], AB)
    del A
    conn = mesh.connectivity
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    K.sum_duplicates()
    return LinearSystem(K, np.zeros(mesh.n_nodes), mesh, symmetric=symmetric)


def assemble_load(mesh: Mesh, f) -> np.ndarray:
    """Load vector ``b[a] = int f phi_a`` by the same Gauss rule."""
    if callable(f):
        fg = np.asarray(f(mesh.gauss_points()), dtype=float)
    else:
        fg = np.asarray(f, dtype=float)
    fg = np.broadcast_to(fg, (mesh.n_elements, 4))
    N = shape_values(GAUSS_REF)  # (gauss, node)
    local = mesh.gauss_weight * fg @ N  # (nel, 4)
    return np.bincount(mesh.connectivity.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


def apply_dirichlet(system: LinearSystem, trace) -> LinearSystem:
    """Eliminate the boundary unknowns; ``trace`` follows ``mesh.boundary_nodes()``."""
    mesh = system.mesh
    fixed = mesh.boundary_nodes()
    trace = np.asarray(trace, dtype=float)
    if trace.shape != fixed.shape or not np.all(np.isfinite(trace)):
        raise ValueError(f"need a finite value on each of the {fixed.size} boundary nodes")
    free = mesh.interior_nodes()
    K = system.matrix
    Kf = K[free]
    rhs = system.rhs[free] - Kf[:, fixed] @ trace
    return LinearSystem(Kf[:, free].tocsr(), rhs, mesh, system.symmetric,
                        free=free, fixed=fixed, fixed_values=trace)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    maxiter: int = 20000
    method: str = "auto"  # auto | cg | bicgstab

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.maxiter < 1:
            raise ValueError("maxiter must be at least 1")
        if self.method not in ("auto", "cg", "bicgstab"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class KrylovResult:
    x: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list, repr=False)


def _project(v):
    return v - v.mean()


def pcg(A, b, *, tol=1e-10, maxiter=20000, zero_mean=False, x0=None, record=False) -> KrylovResult:
    """Jacobi-preconditioned conjugate gradients.

    With ``zero_mean`` the residual is kept orthogonal to constants, which is
    what a singular periodic system needs.
    """
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b) if x0 is None else x0.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return KrylovResult(np.zeros_like(b), 0, 0.0)
    r = b - A @ x if x0 is not None else b.copy()
    if zero_mean:
        r = _project(r)
    z = dinv * r
    p = z.copy()
    rz = r @ z
    history = []
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol:
        if it >= maxiter:
            raise ConvergenceError("conjugate gradients did not converge", res, it)
        Ap = A @ p
        pAp = p @ Ap
        if rz == 0.0 or pAp == 0.0:  # exact solution reached
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if zero_mean:
            r = _project(r)
        it += 1
        res = np.linalg.norm(r) / bnorm
        if record:
            history.append(x.copy())
        z = dinv * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    return KrylovResult(x, it, res, history)


def bicgstab(A, b, *, tol=1e-10, maxiter=20000, zero_mean=False, x0=None) -> KrylovResult:
    """Right-preconditioned (Jacobi) BiCGSTAB for non-symmetric systems."""
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b) if x0 is None else x0.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return KrylovResult(np.zeros_like(b), 0, 0.0)
    r = b - A @ x if x0 is not None else b.copy()
    if zero_mean:
        r = _project(r)
    rhat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol:
        if it >= maxiter:
            raise ConvergenceError("BiCGSTAB did not converge", res, it)
        rho_new = rhat @ r
        if rho_new == 0.0:  # breakdown: restart the shadow residual
            rhat = r.copy()
            rho_new = rhat @ r
            p[:] = 0.0
            v[:] = 0.0
            rho = alpha = omega = 1.0
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        phat = dinv * p
        v = A @ phat
        alpha = rho_new / (rhat @ v)
        s = r - alpha * v
        if zero_mean:
            s = _project(s)
        it += 1
        if np.linalg.norm(s) / bnorm <= tol:
            x += alpha * phat
            r = s
            res = np.linalg.norm(r) / bnorm
            break
        shat = dinv * s
        t = A @ shat
        omega = (t @ s) / (t @ t)
        x += alpha * phat + omega * shat
        r = s - omega * t
        if zero_mean:
            r = _project(r)
        rho = rho_new
        res = np.linalg.norm(r) / bnorm
    return KrylovResult(x, it, res)


def krylov_solve(A, b, config: SolverConfig, *, symmetric=True, zero_mean=False) -> KrylovResult:
    method = config.method
    if method == "auto":
        method = "cg" if symmetric else "bicgstab"
    if zero_mean:
        b = _project(b)
    # work with a unit right-hand side so tiny or huge data cannot under/overflow
    scale = float(np.linalg.norm(b))
    if scale == 0.0:
        return KrylovResult(np.zeros_like(b), 0, 0.0)
    if not np.isfinite(scale):
        raise ValueError("right-hand side is not finite")
    b = b / scale
    solver = pcg if method == "cg" else bicgstab
    result = solver(A, b, tol=config.tol, maxiter=config.maxiter, zero_mean=zero_mean)
    # the recursive residual can drift from the true one; restart once if so
    bnorm = np.linalg.norm(b)
    if bnorm > 0:
        true_res = np.linalg.norm(_project(b - A @ result.x) if zero_mean else b - A @ result.x) / bnorm
        if true_res > config.tol:
            again = solver(A, b, tol=config.tol, maxiter=config.maxiter, zero_mean=zero_mean, x0=result.x)
            result = KrylovResult(again.x, result.iterations + again.iterations, again.residual)
            true_res = np.linalg.norm(_project(b - A @ result.x) if zero_mean else b - A @ result.x) / bnorm
        result.residual = float(true_res)
    if zero_mean:
        result.x = _project(result.x)
    result.x = result.x * scale
    return result


def solve(system: LinearSystem, config: SolverConfig | None = None) -> GridFunction:
    """Solve and return the full nodal field; iterations land in ``meta``."""
    config = config or SolverConfig()
    result = krylov_solve(system.matrix, system.rhs, config,
                          symmetric=system.symmetric, zero_mean=system.zero_mean)
    if system.free is None:
        values = result.x
    else:
        values = np.empty(system.mesh.n_nodes)
        values[system.free] = result.x
        values[system.fixed] = system.fixed_values
    log.debug("solved %d unknowns in %d iterations", result.x.size, result.iterations)
    return GridFunction(system.mesh, values, {"iterations": result.iterations,
                                              "residual": result.residual})


def gradient_at_gauss(u: GridFunction) -> np.ndarray:
    """Gradients at the Gauss points, shape (n_elements, 4, 2)."""
    B = shape_gradients(GAUSS_REF, u.mesh.h)  # (g, k, a)
    local = u.values[u.mesh.connectivity]  # (e, a)
    return np.einsum("gka,ea->egk", B, local)


def values_at_gauss(u: GridFunction) -> np.ndarray:
    """Values at the Gauss points, shape (n_elements, 4)."""
    return u.values[u.mesh.connectivity] @ shape_values(GAUSS_REF).T


def recover_gradient(u: GridFunction) -> tuple[GridFunction, GridFunction]:
    """Nodal gradient: average over adjacent elements of their Gauss gradients."""
    mesh = u.mesh
    elem = gradient_at_gauss(u).mean(axis=1)  # (e, 2)
    conn = mesh.connectivity.ravel()
    count = np.bincount(conn, minlength=mesh.n_nodes)
    out = []
    for k in range(2):
        s = np.bincount(conn, weights=np.repeat(elem[:, k], 4), minlength=mesh.n_nodes)
        out.append(GridFunction(mesh, s / count))
    return out[0], out[1]


def solve_dirichlet(mesh: Mesh, coeff_at_gauss, trace, f=None, *, ellipticity=None,
                    config: SolverConfig | None = None) -> GridFunction:
    """Convenience: assemble, load, eliminate the boundary and solve."""
    system = assemble_stiffness(mesh, coeff_at_gauss, ellipticity)
    if f is not None:
        system.rhs = assemble_load(mesh, f)
    return solve(apply_dirichlet(system, trace), config)
