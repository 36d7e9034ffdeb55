"""Norms on the domain and its boundary, and audits of the weighted inequalities.

Domain integrals use the 2x2 Gauss rule of the mesh, so the distance ``rho``
is never evaluated on the boundary itself.  Boundary quantities act on nodal
values ordered as ``Mesh.boundary_nodes()`` (counter-clockwise from the origin).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from homoglab.geometry import boundary_layer_mask, distance_to_boundary
from homoglab.mesh_fem import (GridFunction, Mesh, SolverConfig, gradient_at_gauss,
                               solve_dirichlet, values_at_gauss)


class NormError(ValueError):
    """Non-finite integrand or violated precondition."""


def _gauss_rho(mesh: Mesh) -> np.ndarray:
    return distance_to_boundary(mesh.domain, mesh.gauss_points())


def _integrate(mesh: Mesh, density: np.ndarray) -> float:
    total = mesh.gauss_weight * float(np.sum(density))
    if not math.isfinite(total):
        raise NormError("integrand is not finite")
    return total


def _as_gauss_values(u, mesh: Mesh | None = None) -> np.ndarray:
    return values_at_gauss(u) if isinstance(u, GridFunction) else np.asarray(u, dtype=float)


def _as_gauss_gradient(u) -> np.ndarray:
    return gradient_at_gauss(u) if isinstance(u, GridFunction) else np.asarray(u, dtype=float)


def weighted_norm(u: GridFunction, p: int = 0, kind: str = "value") -> float:
    """``(int rho^(2p) |u|^2)^(1/2)`` or the same with ``grad u``; p in {-2, -1, 0, 1}."""
    if p not in (-2, -1, 0, 1):
        raise ValueError(f"weight power must be one of -2, -1, 0, 1, got {p}")
    mesh = u.mesh
    if kind == "value":
        sq = values_at_gauss(u) ** 2
    elif kind == "gradient":
        sq = np.sum(gradient_at_gauss(u) ** 2, axis=-1)
    else:
        raise ValueError(f"kind must be 'value' or 'gradient', got {kind!r}")
    w = _gauss_rho(mesh) ** (2 * p) if p else 1.0
    return math.sqrt(_integrate(mesh, w * sq))


def l2_norm(u: GridFunction) -> float:
    return weighted_norm(u, 0, "value")


def h1_seminorm(u: GridFunction) -> float:
    return weighted_norm(u, 0, "gradient")


def rho_norm(u: GridFunction) -> float:
    """``||u||_rho = ||u|| + ||rho grad u||``."""
    return l2_norm(u) + weighted_norm(u, 1, "gradient")


def l2_error(u: GridFunction, v) -> float:
    """``||u - v||`` with ``v`` a grid function on the same mesh or a callable."""
    mesh = u.mesh
    if isinstance(v, GridFunction):
        if v.mesh != mesh:
            raise ValueError("fields live on different meshes")
        return l2_norm(GridFunction(mesh, u.values - v.values))
    vg = np.asarray(v(mesh.gauss_points()), dtype=float)
    return math.sqrt(_integrate(mesh, (values_at_gauss(u) - vg) ** 2))


def rho_weighted_h1_error(u, v, mesh: Mesh | None = None) -> float:
    """``||rho (grad u - v)||`` at the Gauss points.

    ``u`` is a grid function or a Gauss gradient array (n_elements, 4, 2);
    ``v`` is a grid function (its gradient is used) or such an array.
    """
    mesh = mesh or (u.mesh if isinstance(u, GridFunction) else v.mesh)
    gu = _as_gauss_gradient(u)
    gv = _as_gauss_gradient(v)
    if gu.shape != gv.shape or gu.shape != (mesh.n_elements, 4, 2):
        raise ValueError(f"gradient layouts differ: {gu.shape} vs {gv.shape}")
    rho = _gauss_rho(mesh)
    return math.sqrt(_integrate(mesh, rho ** 2 * np.sum((gu - gv) ** 2, axis=-1)))


# ---------------------------------------------------------------- Hardy-type ratios


def _ratio(num: float, den: float) -> float:
    if num == 0.0 and den == 0.0:
        return 0.0
    return num / den


def hardy_check(psi: GridFunction, *, atol: float = 1e-12) -> tuple[float, float]:
    """``(||psi/rho|| / ||grad psi||, ||psi/rho^2|| / ||grad psi / rho||)``; 0/0 is reported as 0."""
    bnd = psi.values[psi.mesh.boundary_nodes()]
    scale = max(1.0, float(np.abs(psi.values).max(initial=0.0)))
    if np.any(np.abs(bnd) > atol * scale):
        raise NormError("Hardy ratios need a field vanishing on the boundary")
    r1 = _ratio(weighted_norm(psi, -1, "value"), weighted_norm(psi, 0, "gradient"))
    r2 = _ratio(weighted_norm(psi, -2, "value"), weighted_norm(psi, -1, "gradient"))
    return r1, r2


# ---------------------------------------------------------------- boundary norms


def boundary_values(u: GridFunction) -> np.ndarray:
    return u.values[u.mesh.boundary_nodes()]


def _panel_lengths(mesh: Mesh) -> np.ndarray:
    """Length of the boundary panel starting at each boundary node."""
    m1, m2 = mesh.shape
    h1, h2 = mesh.h
    return np.concatenate([np.full(m1, h1), np.full(m2, h2), np.full(m1, h1), np.full(m2, h2)])


def _node_weights(panels: np.ndarray) -> np.ndarray:
    """Trapezoid weight of each node on the closed curve."""
    return 0.5 * (panels + np.roll(panels, 1))


def boundary_trace_l2(u, mesh: Mesh | None = None) -> float:
    """Trapezoid L2 norm along the four edges of nodal boundary values."""
    if isinstance(u, GridFunction):
        mesh, g = u.mesh, boundary_values(u)
    else:
        g = np.asarray(u, dtype=float)
    if mesh is None:
        raise ValueError("boundary values need their mesh")
    return math.sqrt(float(np.sum(_node_weights(_panel_lengths(mesh)) * g ** 2)))


def _gagliardo_parts(g, mesh: Mesh | None, perimeter: float | None, chunk: int) -> tuple[float, float]:
    g = np.asarray(g, dtype=float)
    B = g.size
    if B < 8:
        raise ValueError(f"need at least 8 boundary samples, got {B}")
    if mesh is not None:
        panels = _panel_lengths(mesh)
        if panels.size != B:
            raise ValueError("sample count does not match the mesh boundary")
        P = float(panels.sum())
    else:
        if perimeter is None:
            raise ValueError("give either a mesh or the perimeter")
        P = float(perimeter)
        panels = np.full(B, P / B)
    s = np.concatenate([[0.0], np.cumsum(panels)[:-1]])
    w = _node_weights(panels)
    l2sq = float(np.sum(w * g ** 2))
    semi = 0.0
    for start in range(0, B, chunk):
        rows = slice(start, min(start + chunk, B))
        d = np.abs(s[rows, None] - s[None, :])
        d = np.minimum(d, P - d)
        diag = d == 0.0
        d[diag] = 1.0
        term = (g[rows, None] - g[None, :]) ** 2 / d ** 2
        term[diag] = 0.0
        semi += float(np.sum(w[rows, None] * w[None, :] * term))
    return l2sq, semi


def gagliardo_h12(g, mesh: Mesh | None = None, *, perimeter: float | None = None,
                  chunk: int = 1024) -> float:
    """Discrete ``H^{1/2}`` norm of boundary samples by the Gagliardo double sum.

    Without a mesh the samples are taken as equispaced on a closed curve of
    length ``perimeter``; with a mesh the nodal arclength and trapezoid
    weights of its boundary are used.  The distance is the periodic arclength
    and the diagonal of the double sum is omitted.
    """
    l2sq, semi = _gagliardo_parts(g, mesh, perimeter, chunk)
    return math.sqrt(l2sq + semi)


def gagliardo_seminorm(g, mesh: Mesh | None = None, *, perimeter: float | None = None,
                       chunk: int = 1024) -> float:
    """The double-sum part of :func:`gagliardo_h12` alone."""
    return math.sqrt(_gagliardo_parts(g, mesh, perimeter, chunk)[1])


def lift_boundary(g, tensor, mesh: Mesh, config: SolverConfig | None = None) -> GridFunction:
    """Discrete solution of ``div(T grad phi) = 0``, ``phi = g`` on the boundary, with ``T`` constant."""
    T = np.asarray(getattr(tensor, "entries", tensor), dtype=float)
    c = float(np.linalg.eigvalsh(0.5 * (T + T.T)).min())
    if c <= 0:
        raise ValueError("lifting tensor is not elliptic")
    return solve_dirichlet(mesh, T, g, config=config)


def hminus12_proxy(g, tensor, mesh: Mesh, config: SolverConfig | None = None) -> float:
    """``||lift_boundary(g)||_{L2}``, an equivalent ``H^{-1/2}`` norm of ``g``."""
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        return 0.0
    return l2_norm(lift_boundary(g, tensor, mesh, config))


# ---------------------------------------------------------------- layer traces


@dataclass(frozen=True)
class LayerTraceAudit:
    gamma: float
    trace: float
    layer_l2: float
    layer_grad: float

    @property
    def trace_constant(self) -> float:
        """Smallest C in ``||u||_bd <= C gamma^(-1/2) (||u||_layer + gamma ||grad u||_layer)``."""
        return self.trace * math.sqrt(self.gamma) / (self.layer_l2 + self.gamma * self.layer_grad)

    @property
    def layer_constant(self) -> float:
        """Smallest C in ``||u||_layer <= C (gamma^(1/2) ||u||_bd + gamma ||grad u||_layer)``."""
        return self.layer_l2 / (math.sqrt(self.gamma) * self.trace + self.gamma * self.layer_grad)


def layer_trace_audit(u: GridFunction, gamma: float) -> LayerTraceAudit:
    mesh = u.mesh
    layer = boundary_layer_mask(mesh.domain, gamma, mesh).elements
    if not layer.any():
        raise ValueError(f"no element barycenter within {gamma} of the boundary")
    vals = values_at_gauss(u)[layer]
    grads = gradient_at_gauss(u)[layer]
    l2 = math.sqrt(mesh.gauss_weight * float(np.sum(vals ** 2)))
    gr = math.sqrt(mesh.gauss_weight * float(np.sum(grads ** 2)))
    return LayerTraceAudit(float(gamma), boundary_trace_l2(u), l2, gr)


# ---------------------------------------------------------------- report


@dataclass(frozen=True)
class NormReport:
    l2: float
    h1_semi: float
    rho: float
    inv_rho: float
    over_rho: float
    over_rho2: float
    boundary_l2: float
    h12: float
    hm12_proxy: float
    mesh_size: float
    boundary_panels: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, float) and not (math.isfinite(v) and v >= 0):
                raise NormError(f"norm {k} = {v} is not a finite non-negative number")


def norm_report(u: GridFunction, tensor=None, config: SolverConfig | None = None) -> NormReport:
    """Collect every norm of ``u``; the proxy needs the lifting tensor (default identity)."""
    mesh = u.mesh
    g = boundary_values(u)
    T = np.eye(2) if tensor is None else tensor
    return NormReport(
        l2=l2_norm(u), h1_semi=h1_seminorm(u), rho=rho_norm(u),
        inv_rho=weighted_norm(u, -1, "gradient"), over_rho=weighted_norm(u, -1, "value"),
        over_rho2=weighted_norm(u, -2, "value"), boundary_l2=boundary_trace_l2(u),
        h12=gagliardo_h12(g, mesh), hm12_proxy=hminus12_proxy(g, T, mesh, config),
        mesh_size=max(mesh.h), boundary_panels=int(g.size))
