"""Periodic coefficients, cell correctors and the homogenized tensor."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate

from homoglab.mesh_fem import (GAUSS_REF, GridFunction, LinearSystem, Mesh, SolverConfig,
                               assemble_stiffness, build_mesh, check_ellipticity,
                               gradient_at_gauss, shape_gradients, solve)
from homoglab.unfolding import elements_per_cell

FAMILIES = ("identity", "isotropic-sin", "layered", "constant-nonsymmetric", "skew-perturbed", "raster")
DEFAULT_CELL_GRID = 128
_J = np.array([[0.0, 1.0], [-1.0, 0.0]])


@dataclass(frozen=True)
class CoefficientField:
    """Matrix field ``A(y)`` on the unit cell, extended by periodicity.

    ``evaluator`` maps points of shape (..., 2) to matrices (..., 2, 2).
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    ellipticity: float
    symmetric: bool
    family: str
    bound: float
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(self.evaluator(y), y.shape[:-1] + (2, 2))

    def transpose(self) -> CoefficientField:
        ev = self.evaluator
        return CoefficientField(lambda y: np.swapaxes(ev(y), -1, -2), self.ellipticity,
                                self.symmetric, self.family, self.bound,
                                {**self.params, "transposed": not self.params.get("transposed", False)})

    def certify(self, points: np.ndarray) -> None:
        """Check ellipticity and the L-infinity bound at ``points``."""
        A = self(points)
        check_ellipticity(A, self.ellipticity)
        if np.abs(A).max() > self.bound * (1 + 1e-12):
            from homoglab.mesh_fem import CoefficientError
            raise CoefficientError(f"coefficient entries exceed the declared bound {self.bound}")


def _scalar_times_identity(a: Callable) -> Callable:
    return lambda y: a(y)[..., None, None] * np.eye(2)


def identity() -> CoefficientField:
    return CoefficientField(lambda y: np.broadcast_to(np.eye(2), y.shape[:-1] + (2, 2)),
                            1.0, True, "identity", 1.0)


def constant(M, family="constant") -> CoefficientField:
    M = np.asarray(M, dtype=float)
    sym = 0.5 * (M + M.T)
    c = float(np.linalg.eigvalsh(sym).min())
    if c <= 0:
        raise ValueError("constant matrix is not elliptic")
    return CoefficientField(lambda y: np.broadcast_to(M, y.shape[:-1] + (2, 2)), c,
                            bool(np.array_equal(M, M.T)), family, float(np.abs(M).max()),
                            {"matrix": M.tolist()})


def constant_nonsymmetric() -> CoefficientField:
    return constant([[2.0, 0.5], [-0.5, 2.0]], "constant-nonsymmetric")


def isotropic_sin(mean: float = 1.5, amplitude: float = 0.5) -> CoefficientField:
    """``a(y) I`` with ``a = mean + amplitude*(sin 2 pi y1 + sin 2 pi y2)``."""
    if mean - 2 * abs(amplitude) <= 0:
        raise ValueError("isotropic-sin coefficient must stay positive")

    def a(y):
        return mean + amplitude * (np.sin(2 * np.pi * y[..., 0]) + np.sin(2 * np.pi * y[..., 1]))

    return CoefficientField(_scalar_times_identity(a), mean - 2 * abs(amplitude), True,
                            "isotropic-sin", mean + 2 * abs(amplitude),
                            {"mean": mean, "amplitude": amplitude})


def layered(alpha: float = 2.0, beta: float = 1.0) -> CoefficientField:
    """``a(y1) I`` with ``a = alpha + beta cos(2 pi y1)``."""
    if alpha - abs(beta) <= 0:
        raise ValueError("layered coefficient must stay positive")

    def a(y):
        return alpha + beta * np.cos(2 * np.pi * y[..., 0])

    return CoefficientField(_scalar_times_identity(a), alpha - abs(beta), True, "layered",
                            alpha + abs(beta), {"alpha": alpha, "beta": beta})


def skew_perturbed(diagonal: float = 2.0, amplitude: float = 1.0) -> CoefficientField:
    """``diagonal*I + b(y) J`` with ``b = amplitude sin(2 pi y1)`` and ``J`` the unit skew matrix."""

    def ev(y):
        b = amplitude * np.sin(2 * np.pi * y[..., 0])
        return diagonal * np.eye(2) + b[..., None, None] * _J

    return CoefficientField(ev, diagonal, False, "skew-perturbed",
                            max(diagonal, abs(amplitude)),
                            {"diagonal": diagonal, "amplitude": amplitude})


def raster(entries) -> CoefficientField:
    """Piecewise-constant coefficient on an ``n_sub x n_sub`` grid of subsquares.

    Row ``k = r*n_sub + c`` of ``entries`` holds ``(a11, a12, a21, a22)`` for
    the subsquare with lower-left corner ``(c, r)/n_sub``.  Subsquares are
    half-open, so points on an edge take the value of the subsquare above/right.
    """
    E = np.asarray(entries, dtype=float)
    n_sub = int(round(math.sqrt(E.shape[0])))
    if E.ndim != 2 or E.shape[1] != 4 or n_sub * n_sub != E.shape[0]:
        raise ValueError("raster needs n_sub^2 rows of four entries")
    mats = E.reshape(n_sub, n_sub, 2, 2)
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    c = float(np.linalg.eigvalsh(sym).min())
    if c <= 0:
        raise ValueError("raster coefficient is not elliptic")

    def ev(y):
        idx = np.floor(np.mod(y, 1.0) * n_sub + 1e-12).astype(int) % n_sub
        return mats[idx[..., 1], idx[..., 0]]

    return CoefficientField(ev, c, bool(np.array_equal(mats, np.swapaxes(mats, -1, -2))),
                            "raster", float(np.abs(E).max()), {"n_sub": n_sub})


def read_raster(path) -> CoefficientField:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    n_sub = int(lines[0].strip())
    rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    if len(rows) != n_sub * n_sub:
        raise ValueError(f"raster file declares n_sub={n_sub} but has {len(rows)} rows")
    return raster(rows)


def write_raster(path, entries) -> None:
    E = np.asarray(entries, dtype=float)
    n_sub = int(round(math.sqrt(E.shape[0])))
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in E)
    Path(path).write_text(f"{n_sub}\n{body}\n")


def from_tag(tag: str, raster_path=None, **params) -> CoefficientField:
    if tag == "identity":
        return identity()
    if tag == "isotropic-sin":
        return isotropic_sin(**params)
    if tag == "layered":
        return layered(**params)
    if tag == "constant-nonsymmetric":
        return constant_nonsymmetric()
    if tag == "skew-perturbed":
        return skew_perturbed(**params)
    if tag == "raster":
        if raster_path is None:
            raise ValueError("raster family needs a raster file")
        return read_raster(raster_path)
    raise ValueError(f"unknown coefficient family {tag!r}; expected one of {FAMILIES}")


@dataclass
class CellFunction(GridFunction):
    """Nodal field on the periodic cell mesh with pointwise evaluation."""

    zero_mean: bool = True

    def _locate(self, y):
        n1, n2 = self.mesh.node_shape
        s = np.mod(np.asarray(y, dtype=float), 1.0) * np.array([n1, n2])
        i0 = np.floor(s).astype(int)
        t = s - i0
        i0[..., 0] %= n1
        i0[..., 1] %= n2
        i1 = (i0 + 1) % np.array([n1, n2])
        u = self.grid()
        corners = (u[i0[..., 1], i0[..., 0]], u[i0[..., 1], i1[..., 0]],
                   u[i1[..., 1], i0[..., 0]], u[i1[..., 1], i1[..., 0]])
        return t, corners

    def __call__(self, y) -> np.ndarray:
        """Bilinear interpolation with periodic wraparound."""
        t, (u00, u10, u01, u11) = self._locate(y)
        s1, s2 = t[..., 0], t[..., 1]
        return (1 - s1) * (1 - s2) * u00 + s1 * (1 - s2) * u10 + (1 - s1) * s2 * u01 + s1 * s2 * u11

    def gradient(self, y) -> np.ndarray:
        """Gradient of the bilinear interpolant, shape (..., 2)."""
        n1, n2 = self.mesh.node_shape
        t, (u00, u10, u01, u11) = self._locate(y)
        s1, s2 = t[..., 0], t[..., 1]
        d1 = n1 * ((1 - s2) * (u10 - u00) + s2 * (u11 - u01))
        d2 = n2 * ((1 - s1) * (u01 - u00) + s1 * (u11 - u10))
        return np.stack([d1, d2], axis=-1)

    def mean(self) -> float:
        # every node of a uniform periodic Q1 mesh carries the same shape integral
        return float(self.values.mean())


def cell_mesh(n: int = DEFAULT_CELL_GRID) -> Mesh:
    return build_mesh(None, n, periodic=True)


def _corrector_system(A: CoefficientField, i: int, mesh: Mesh) -> LinearSystem:
    if not mesh.periodic:
        raise ValueError("cell problems need a periodic mesh")
    Ag = A(mesh.gauss_points())
    check_ellipticity(Ag, A.ellipticity)
    system = assemble_stiffness(mesh, Ag)
    B = shape_gradients(GAUSS_REF, mesh.h)  # (g, k, a)
    local = -mesh.gauss_weight * np.einsum("gka,egk->ea", B, Ag[..., :, i])
    system.rhs = np.bincount(mesh.connectivity.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)
    system.zero_mean = True
    return system


def solve_corrector(A: CoefficientField, i: int, mesh: Mesh | None = None,
                    config: SolverConfig | None = None) -> CellFunction:
    """Zero-mean periodic ``chi_i`` with ``y_i + chi_i`` A-harmonic on the cell."""
    mesh = mesh or cell_mesh()
    sol = solve(_corrector_system(A, i, mesh), config or SolverConfig(tol=1e-12))
    return CellFunction(mesh, sol.values, {**sol.meta, "axis": i, "family": A.family})


def solve_adjoint_corrector(A: CoefficientField, i: int, mesh: Mesh | None = None,
                            config: SolverConfig | None = None) -> CellFunction:
    """Adjoint corrector: the corrector of the transposed coefficient."""
    chi = solve_corrector(A.transpose(), i, mesh, config)
    chi.meta["adjoint"] = True
    return chi


def solve_correctors(A: CoefficientField, mesh: Mesh | None = None,
                     config: SolverConfig | None = None) -> list[CellFunction]:
    mesh = mesh or cell_mesh()
    return [solve_corrector(A, i, mesh, config) for i in range(2)]


@dataclass(frozen=True)
class HomogenizedTensor:
    entries: np.ndarray
    cell_grid: int | None = None
    family: str = ""

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=float).reshape(2, 2))

    @property
    def T(self) -> HomogenizedTensor:
        return HomogenizedTensor(self.entries.T, self.cell_grid, self.family)

    def ellipticity(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.entries + self.entries.T)).min())

    def to_json(self) -> str:
        return json.dumps({"n": 2, "entries": self.entries.tolist(),
                           "cell_grid": self.cell_grid, "family": self.family})

    @classmethod
    def from_json(cls, text: str) -> HomogenizedTensor:
        d = json.loads(text)
        return cls(np.array(d["entries"]), d.get("cell_grid"), d.get("family", ""))


def homogenized_tensor(A: CoefficientField, correctors) -> HomogenizedTensor:
    """Gauss quadrature of ``A (e_j + grad chi_j) . (e_i + grad chi_i)`` over the cell."""
    mesh = correctors[0].mesh
    if any(c.mesh != mesh for c in correctors):
        raise ValueError("correctors live on different cell meshes")
    Ag = A(mesh.gauss_points())
    G = [gradient_at_gauss(c) + np.eye(2)[i] for i, c in enumerate(correctors)]
    w = mesh.gauss_weight
    out = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            AGj = np.einsum("egkl,egl->egk", Ag, G[j])
            out[i, j] = w * np.sum(AGj * G[i])
    return HomogenizedTensor(out, mesh.shape[0], A.family)


def compute_tensor(A: CoefficientField, n: int = DEFAULT_CELL_GRID,
                   config: SolverConfig | None = None) -> tuple[HomogenizedTensor, list[CellFunction]]:
    chis = solve_correctors(A, cell_mesh(n), config)
    return homogenized_tensor(A, chis), chis


@dataclass(frozen=True)
class Closed1D:
    harmonic_mean: float
    grid: np.ndarray
    profile: np.ndarray  # zero-mean corrector at the grid points
    derivative: Callable[[np.ndarray], np.ndarray]


def corrector_1d_closed_form(a: Callable, n: int = DEFAULT_CELL_GRID, *, breakpoints=()) -> Closed1D:
    """Classical 1D oracle: harmonic mean and corrector of a periodic ``a(t)``.

    ``chi'(t) = abar / a(t) - 1`` with ``abar = (int_0^1 1/a)^-1``; the profile
    is integrated panel by panel with 20-point Gauss-Legendre and shifted to
    zero mean (trapezoid mean on the grid, matching the periodic Q1 mean).
    """
    t = np.linspace(0.0, 1.0, 2001)
    if np.min(a(t)) <= 0:
        raise ValueError("a must be positive on [0, 1]")
    pts = sorted(set(float(b) for b in breakpoints if 0 < b < 1))
    inv, _ = integrate.quad(lambda s: 1.0 / a(s), 0.0, 1.0, points=pts or None,
                            epsabs=1e-14, epsrel=1e-13, limit=200)
    abar = 1.0 / inv

    def deriv(s):
        return abar / a(np.asarray(s, dtype=float)) - 1.0

    grid = np.arange(n) / n
    xg, wg = np.polynomial.legendre.leggauss(20)
    panel = np.empty(n)
    for k in range(n):
        lo, hi = k / n, (k + 1) / n
        inner = [lo] + [b for b in pts if lo < b < hi] + [hi]
        acc = 0.0
        for p, q in zip(inner[:-1], inner[1:]):
            s = 0.5 * (q - p) * xg + 0.5 * (p + q)
            acc += 0.5 * (q - p) * np.sum(wg * deriv(s))
        panel[k] = acc
    profile = np.concatenate([[0.0], np.cumsum(panel)[:-1]])
    profile -= profile.mean()
    return Closed1D(abar, grid, profile, deriv)


def build_oscillating_coefficient(A: CoefficientField, eps: float) -> Callable[[np.ndarray], np.ndarray]:
    """``x -> A({x / eps})`` with the half-open fractional part."""
    if not eps > 0:
        raise ValueError("eps must be positive")

    def A_eps(x):
        s = np.asarray(x, dtype=float) / eps
        return A(s - np.floor(s))

    return A_eps


def oscillating_coefficient_at_gauss(A: CoefficientField, mesh: Mesh, eps: float) -> np.ndarray:
    """``A({x/eps})`` at the Gauss points of a mesh aligned with the eps-lattice.

    With ``h = eps/m`` the cell coordinate of a Gauss point is ``(k mod m + g)/m``
    for integer ``k``, computed exactly here instead of through ``x/eps``.
    """
    m = elements_per_cell(mesh, eps)
    y1 = (np.arange(m)[:, None] + GAUSS_REF[None, :, 0]) / m  # (i mod m, g)
    y2 = (np.arange(m)[:, None] + GAUSS_REF[None, :, 1]) / m  # (j mod m, g)
    Y = np.stack(np.broadcast_arrays(y1[None, :, :], y2[:, None, :]), axis=-1)  # (jm, im, g, 2)
    Acell = A(Y)
    m1, m2 = mesh.shape
    I = np.arange(m1) % m
    J = np.arange(m2) % m
    return Acell[J[:, None], I[None, :]].reshape(mesh.n_elements, 4, 2, 2)

