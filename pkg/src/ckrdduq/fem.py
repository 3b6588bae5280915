"""Bilinear finite elements for -div(a grad u) = f on axis-aligned rectangles.

Nodes are numbered ``j + (ny+1)*i`` where ``i`` runs along x1 and ``j``
along x2, so the stiffness matrix has half-bandwidth ``ny + 2``.  The
diffusion field is given per element as its four nodal values, which lets a
field that jumps across an interface be assembled without averaging.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solveh_banded

SIDES = ("left", "right", "bottom", "top")
_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
# local node order: (i,j), (i+1,j), (i+1,j+1), (i,j+1)
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


class SingularSystemError(np.linalg.LinAlgError):
    pass


class FieldError(ValueError):
    pass


class GridError(ValueError):
    pass


def _shape(xi, eta):
    N = 0.25 * (1 + _XI * xi) * (1 + _ETA * eta)
    dN = np.stack([0.25 * _XI * (1 + _ETA * eta), 0.25 * _ETA * (1 + _XI * xi)])
    return N, dN


def _element_tensors():
    """G[k] with K_e = sum_k a_k G[k] (2x2 Gauss), and the load matrix M_q."""
    G = np.zeros((4, 4, 4))
    for xi in _GAUSS:
        for eta in _GAUSS:
            N, dN = _shape(xi, eta)
            # Jacobian factors cancel on a square cell
            G += N[:, None, None] * (dN.T @ dN)[None]
    return G.reshape(4, 16)


_G = _element_tensors()


@dataclass
class Mesh2D:
    x0: float
    x1: float
    y0: float
    y1: float
    h: float
    nx: int = field(init=False)
    ny: int = field(init=False)

    def __post_init__(self):
        nx = (self.x1 - self.x0) / self.h
        ny = (self.y1 - self.y0) / self.h
        self.nx, self.ny = int(round(nx)), int(round(ny))
        if abs(nx - self.nx) > 1e-9 or abs(ny - self.ny) > 1e-9 or self.nx < 1 or self.ny < 1:
            raise GridError(f"rectangle [{self.x0},{self.x1}]x[{self.y0},{self.y1}] is not a multiple of h={self.h}")
        self.xs = self.x0 + np.arange(self.nx + 1) * self.h
        self.ys = self.y0 + np.arange(self.ny + 1) * self.h
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        self.coords = np.column_stack([X.ravel(), Y.ravel()])
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        i, j = i.ravel(), j.ravel()
        n = self.node
        self.elements = np.column_stack([n(i, j), n(i + 1, j), n(i + 1, j + 1), n(i, j + 1)])

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    def node(self, i, j):
        return np.asarray(j) + (self.ny + 1) * np.asarray(i)

    def side_nodes(self, side: str, corners: bool = False) -> np.ndarray:
        """Boundary nodes on one side, ordered by increasing coordinate."""
        if side in ("left", "right"):
            i = 0 if side == "left" else self.nx
            js = np.arange(self.ny + 1) if corners else np.arange(1, self.ny)
            return self.node(np.full_like(js, i), js)
        if side in ("bottom", "top"):
            j = 0 if side == "bottom" else self.ny
            is_ = np.arange(self.nx + 1) if corners else np.arange(1, self.nx)
            return self.node(is_, np.full_like(is_, j))
        raise GridError(f"unknown side {side!r}")

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.side_nodes(s, corners=True) for s in SIDES]))

    def element_centers(self) -> np.ndarray:
        return self.coords[self.elements].mean(axis=1)

    def element_field(self, a_nodal: np.ndarray) -> np.ndarray:
        """Element-local nodal values, shape (..., n_elements, 4)."""
        return np.asarray(a_nodal)[..., self.elements]

    def grid_index(self, value: float, axis: int) -> int:
        grid = self.xs if axis == 0 else self.ys
        k = int(round((value - grid[0]) / self.h))
        if k < 0 or k >= grid.size or abs(grid[k] - value) > 1e-9 * max(1.0, abs(value)):
            raise GridError(f"coordinate {value} is not on a mesh line of axis x{axis + 1}")
        return k


def load_vector(mesh: Mesh2D, f) -> np.ndarray:
    """Galerkin load with 2x2 Gauss quadrature; f is a constant or f(x1, x2)."""
    F = np.zeros(mesh.n_nodes)
    h = mesh.h
    base = mesh.coords[mesh.elements[:, 0]]
    for xi in _GAUSS:
        for eta in _GAUSS:
            N, _ = _shape(xi, eta)
            qx = base[:, 0] + 0.5 * h * (1 + xi)
            qy = base[:, 1] + 0.5 * h * (1 + eta)
            fq = f(qx, qy) if callable(f) else np.full(qx.shape, float(f))
            np.add.at(F, mesh.elements, (0.25 * h * h) * fq[:, None] * N[None, :])
    return F


def element_stiffness_values(a_el: np.ndarray) -> np.ndarray:
    """Per-element 4x4 stiffness blocks flattened to (..., n_elements, 16)."""
    return np.asarray(a_el) @ _G


def stiffness_matrix(mesh: Mesh2D, a_el: np.ndarray) -> sp.csr_matrix:
    vals = element_stiffness_values(a_el).ravel()
    rows = np.repeat(mesh.elements, 4, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 4)).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


class LocalSolver:
    """Precomputed assembly plan for one rectangle and a fixed boundary layout.

    ``interfaces`` maps side name to 'dirichlet' or 'neumann'.  Every other
    boundary node, including interface corners, is an exterior Dirichlet node.
    """

    def __init__(self, mesh: Mesh2D, f=0.0, interfaces: dict[str, str] | None = None,
                 exterior: float | Callable = 0.0):
        self.mesh = mesh
        self.interfaces = dict(interfaces or {})
        for side, kind in self.interfaces.items():
            if side not in SIDES:
                raise GridError(f"unknown side {side!r}")
            if kind not in ("dirichlet", "neumann"):
                raise ValueError(f"unknown interface kind {kind!r} on side {side}")
        self.F = load_vector(mesh, f)
        n = mesh.n_nodes
        fixed = np.zeros(n, dtype=bool)
        fixed[mesh.boundary_nodes()] = True
        for side, kind in self.interfaces.items():
            if kind == "neumann":
                fixed[mesh.side_nodes(side)] = False
        if not fixed.any():
            raise SingularSystemError("no Dirichlet nodes: the local system is singular")
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)
        self.reduced = np.full(n, -1)
        self.reduced[self.free] = np.arange(self.free.size)
        self.u_fixed = np.zeros(n)
        bnd = np.flatnonzero(fixed)
        xy = mesh.coords[bnd]
        self.u_fixed[bnd] = exterior(xy[:, 0], xy[:, 1]) if callable(exterior) else float(exterior)
        self.side = {s: mesh.side_nodes(s) for s in self.interfaces}
        # edge weights for lumped Neumann loads and flux normalisation
        self.edge_weight = {s: np.full(self.side[s].size, mesh.h) for s in self.interfaces}

        rows = np.repeat(mesh.elements, 4, axis=1).ravel()
        cols = np.tile(mesh.elements, (1, 4)).ravel()
        rr, rc = self.reduced[rows], self.reduced[cols]
        both = (rr >= 0) & (rc >= 0) & (rr >= rc)
        self.bandwidth = int((rr[both] - rc[both]).max()) if both.any() else 0
        nb = self.bandwidth + 1
        nf = self.free.size
        self._band_idx = np.flatnonzero(both)
        self._band_pos = (rr[both] - rc[both]) * nf + rc[both]
        self._band_size = nb * nf
        lift = (rr >= 0) & (rc < 0)
        self._lift_idx = np.flatnonzero(lift)
        self._lift_row = rr[lift]
        self._lift_col = cols[lift]
        self._res_plan = {}
        for s, nodes in self.side.items():
            loc = np.full(n, -1)
            loc[nodes] = np.arange(nodes.size)
            hit = loc[rows] >= 0
            self._res_plan[s] = (np.flatnonzero(hit), loc[rows][hit], cols[hit])
        self._inner = {}
        for s in self.interfaces:
            self._inner[s] = self._inner_neighbors(s)

    def _inner_neighbors(self, side: str) -> np.ndarray:
        m = self.mesh
        nodes = self.side[side]
        step = {"left": m.ny + 1, "right": -(m.ny + 1), "bottom": 1, "top": -1}[side]
        return nodes + step

    def check_field(self, a_el: np.ndarray) -> None:
        low = np.min(a_el)
        if not low > 0:
            raise FieldError(f"diffusion field must be positive, minimum is {low:.3e}")

    def solve(self, a_el: np.ndarray, dirichlet: dict | None = None,
              neumann: dict | None = None, check: bool = True) -> np.ndarray:
        """Nodal solution for element-local field ``a_el`` of shape (n_elements, 4).

        ``dirichlet[side]`` holds nodal values on the side interior nodes;
        ``neumann[side]`` holds nodal outward flux a du/dn, applied as a
        lumped trapezoid boundary load.
        """
        if check:
            self.check_field(a_el)
        Kv = element_stiffness_values(a_el).ravel()
        u = self.u_fixed.copy()
        for side, vals in (dirichlet or {}).items():
            if self.interfaces.get(side) != "dirichlet":
                raise ValueError(f"side {side} is not a Dirichlet interface")
            u[self.side[side]] = vals
        b = self.F[self.free].copy()
        for side, vals in (neumann or {}).items():
            if self.interfaces.get(side) != "neumann":
                raise ValueError(f"side {side} is not a Neumann interface")
            b[self.reduced[self.side[side]]] += self.edge_weight[side] * np.asarray(vals)
        b -= np.bincount(self._lift_row, Kv[self._lift_idx] * u[self._lift_col], minlength=b.size)
        ab = np.bincount(self._band_pos, Kv[self._band_idx], minlength=self._band_size)
        ab = ab.reshape(self.bandwidth + 1, self.free.size)
        try:
            u[self.free] = solveh_banded(ab, b, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"stiffness matrix is not positive definite: {exc}") from exc
        return u

    def trace(self, u: np.ndarray, side: str) -> np.ndarray:
        return u[self.side[side]]

    def flux(self, u: np.ndarray, a_el: np.ndarray, side: str, method: str = "residual") -> np.ndarray:
        """Outward normal flux a du/dn at the side's interior nodes.

        ``residual`` recovers the flux variationally from the Galerkin
        residual, which makes Dirichlet-Neumann coupling reproduce the global
        discrete solution.  ``difference`` is the one-sided difference across
        the first cell layer.
        """
        if method == "residual":
            idx, loc, col = self._res_plan[side]
            Kv = element_stiffness_values(a_el).ravel()
            r = np.bincount(loc, Kv[idx] * u[col], minlength=self.side[side].size)
            return (r - self.F[self.side[side]]) / self.edge_weight[side]
        if method == "difference":
            nodes, inner = self.side[side], self._inner[side]
            a_nodal = np.zeros(self.mesh.n_nodes)
            a_nodal[self.mesh.elements.ravel()] = np.asarray(a_el).ravel()
            return a_nodal[nodes] * (u[nodes] - u[inner]) / self.mesh.h
        raise ValueError(f"unknown flux method {method!r}")

    def coupling(self, u, a_el, side: str, kind: str, flux_method: str = "residual") -> np.ndarray:
        if kind == "dirichlet":
            return self.trace(u, side)
        if kind == "neumann":
            return self.flux(u, a_el, side, flux_method)
        raise ValueError(f"unknown coupling kind {kind!r}")


@dataclass
class Segment:
    """Axis-aligned mesh line: ``axis=0`` is vertical (x1 = position)."""

    axis: int
    position: float
    start: float
    stop: float


def line_integral(mesh: Mesh2D, u: np.ndarray, seg: Segment) -> float:
    """Composite trapezoid integral of nodal u along a mesh line."""
    if seg.axis == 0:
        i = mesh.grid_index(seg.position, 0)
        j0, j1 = mesh.grid_index(seg.start, 1), mesh.grid_index(seg.stop, 1)
        vals = u[mesh.node(i, np.arange(j0, j1 + 1))]
    elif seg.axis == 1:
        j = mesh.grid_index(seg.position, 1)
        i0, i1 = mesh.grid_index(seg.start, 0), mesh.grid_index(seg.stop, 0)
        vals = u[mesh.node(np.arange(i0, i1 + 1), j)]
    else:
        raise GridError(f"segment axis must be 0 or 1, got {seg.axis}")
    if vals.size < 2:
        raise GridError("segment must span at least one cell")
    return float(mesh.h * (vals.sum(axis=-1) - 0.5 * (vals[..., 0] + vals[..., -1])))


def l2_error(mesh: Mesh2D, u: np.ndarray, exact: Callable) -> float:
    """L2 norm of u_h - exact with 3x3 Gauss quadrature per cell."""
    pts, wts = np.polynomial.legendre.leggauss(3)
    h = mesh.h
    base = mesh.coords[mesh.elements[:, 0]]
    ue = u[mesh.elements]
    total = 0.0
    for xi, wx in zip(pts, wts):
        for eta, wy in zip(pts, wts):
            N, _ = _shape(xi, eta)
            qx = base[:, 0] + 0.5 * h * (1 + xi)
            qy = base[:, 1] + 0.5 * h * (1 + eta)
            diff = ue @ N - exact(qx, qy)
            total += wx * wy * 0.25 * h * h * np.sum(diff * diff)
    return float(np.sqrt(total))
