"""Non-overlapping Dirichlet-Neumann decomposition with reduced interface data.

Interfaces are directed pairs ``(sender, receiver)``.  The data that
``receiver`` imposes on its side facing ``sender`` is parameterised by POD
coefficients ``tau[(sender, receiver)]``; the kind of an interface is the
boundary condition the receiver applies there.  A subdomain's full interface
parameter concatenates its incoming coefficient vectors in increasing sender
order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import LocalSolver, Mesh2D, Segment, line_integral
from .randfield import FieldConfig, KLBasis, kl_expand

OPPOSITE = {"left": "right", "right": "left", "bottom": "top", "top": "bottom"}


class DecompositionError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class PODError(ValueError):
    pass


# -- description ------------------------------------------------------------------


@dataclass
class SubdomainSpec:
    id: int
    rect: tuple[float, float, float, float]  # x1 range then x2 range
    field: FieldConfig
    output: Segment | None = None


@dataclass
class InterfaceSpec:
    sender: int
    receiver: int
    kind: str  # boundary condition the receiver applies
    theta: float = 1.0
    modes: int = 1

    @property
    def key(self) -> tuple[int, int]:
        return (self.sender, self.receiver)


def shared_side(a: tuple, b: tuple, tol: float = 1e-12) -> str | None:
    """Side of rectangle ``a`` that coincides with a side of ``b``."""
    ax0, ax1, ay0, ay1 = a
    bx0, bx1, by0, by1 = b
    same_y = abs(ay0 - by0) < tol and abs(ay1 - by1) < tol
    same_x = abs(ax0 - bx0) < tol and abs(ax1 - bx1) < tol
    if same_y and abs(ax1 - bx0) < tol:
        return "right"
    if same_y and abs(ax0 - bx1) < tol:
        return "left"
    if same_x and abs(ay1 - by0) < tol:
        return "top"
    if same_x and abs(ay0 - by1) < tol:
        return "bottom"
    return None


@dataclass
class Decomposition:
    subdomains: list[SubdomainSpec]
    interfaces: list[InterfaceSpec]
    h: float = 1.0 / 16
    source: float = 100.0
    flux_method: str = "residual"
    tol: float = 1e-6
    max_steps: int = 500
    sides: dict = field(init=False)

    def __post_init__(self):
        ids = [s.id for s in self.subdomains]
        if len(set(ids)) != len(ids):
            raise DecompositionError(f"duplicate subdomain ids {ids}")
        self.by_id = {s.id: s for s in self.subdomains}
        keys = {itf.key for itf in self.interfaces}
        if len(keys) != len(self.interfaces):
            raise DecompositionError("interface defined more than once")
        self.sides = {}
        for itf in self.interfaces:
            if itf.sender not in self.by_id or itf.receiver not in self.by_id:
                raise DecompositionError(f"interface {itf.key} references an unknown subdomain")
            if (itf.receiver, itf.sender) not in keys:
                raise DecompositionError(f"interface {itf.key} has no reverse interface")
            if itf.kind not in ("dirichlet", "neumann"):
                raise DecompositionError(f"interface {itf.key}: unknown kind {itf.kind!r}")
            if itf.theta < 0:
                raise DecompositionError(f"interface {itf.key}: relaxation must be nonnegative, got {itf.theta}")
            side = shared_side(self.by_id[itf.receiver].rect, self.by_id[itf.sender].rect)
            if side is None:
                raise DecompositionError(f"subdomains {itf.key} do not share a full side")
            self.sides[itf.key] = side  # receiver's side
        for s in self.subdomains:
            if len(self.incoming(s.id)) >= 4:
                raise DecompositionError(f"subdomain {s.id} has no exterior Dirichlet boundary")
        self.meshes = {s.id: Mesh2D(*s.rect, self.h) for s in self.subdomains}
        self.solvers = {
            s.id: LocalSolver(self.meshes[s.id], self.source,
                              {self.sides[i.key]: i.kind for i in self.incoming(s.id)})
            for s in self.subdomains
        }
        x0 = min(s.rect[0] for s in self.subdomains)
        x1 = max(s.rect[1] for s in self.subdomains)
        y0 = min(s.rect[2] for s in self.subdomains)
        y1 = max(s.rect[3] for s in self.subdomains)
        self.global_mesh = Mesh2D(x0, x1, y0, y1, self.h)
        self.global_solver = LocalSolver(self.global_mesh, self.source)
        gm = self.global_mesh
        self.element_map, self.node_map = {}, {}
        for s in self.subdomains:
            m = self.meshes[s.id]
            c = m.element_centers()
            ie = np.floor((c[:, 0] - x0) / self.h).astype(int)
            je = np.floor((c[:, 1] - y0) / self.h).astype(int)
            self.element_map[s.id] = ie * gm.ny + je
            ni = np.rint((m.coords[:, 0] - x0) / self.h).astype(int)
            nj = np.rint((m.coords[:, 1] - y0) / self.h).astype(int)
            self.node_map[s.id] = gm.node(ni, nj)
        covered = np.concatenate(list(self.element_map.values()))
        if np.unique(covered).size != gm.n_elements or covered.size != gm.n_elements:
            raise DecompositionError("subdomains do not tile their bounding rectangle")
        self._kl: dict[int, KLBasis] = {}

    # -- topology helpers -----------------------------------------------------
    @property
    def ids(self) -> list[int]:
        return sorted(self.by_id)

    def incoming(self, i: int) -> list[InterfaceSpec]:
        return sorted((itf for itf in self.interfaces if itf.receiver == i), key=lambda t: t.sender)

    def outgoing(self, i: int) -> list[InterfaceSpec]:
        return sorted((itf for itf in self.interfaces if itf.sender == i), key=lambda t: t.receiver)

    def interface(self, key) -> InterfaceSpec:
        for itf in self.interfaces:
            if itf.key == tuple(key):
                return itf
        raise KeyError(key)

    def sender_side(self, key) -> str:
        return OPPOSITE[self.sides[tuple(key)]]

    def interface_size(self, key) -> int:
        return self.solvers[key[1]].side[self.sides[tuple(key)]].size

    # -- random field ----------------------------------------------------------
    def kl(self, i: int) -> KLBasis:
        if i not in self._kl:
            m = self.meshes[i]
            self._kl[i] = kl_expand(self.by_id[i].field, m.xs, m.ys)
        return self._kl[i]

    def set_kl(self, i: int, basis: KLBasis) -> None:
        self._kl[i] = basis

    def n_xi(self, i: int) -> int:
        return self.by_id[i].field.modes

    def element_field(self, i: int, xi: np.ndarray) -> np.ndarray:
        return self.meshes[i].element_field(self.kl(i).evaluate(xi))

    # -- solves ------------------------------------------------------------------
    def local_solve(self, i: int, a_el: np.ndarray, incoming: dict) -> np.ndarray:
        """Solve subdomain i given physical interface data keyed by sender."""
        dir_, neu = {}, {}
        for itf in self.incoming(i):
            side = self.sides[itf.key]
            (dir_ if itf.kind == "dirichlet" else neu)[side] = incoming[itf.sender]
        return self.solvers[i].solve(a_el, dirichlet=dir_, neumann=neu)

    def exports(self, i: int, u: np.ndarray, a_el: np.ndarray) -> dict:
        """Physical coupling data h_{i,j} that subdomain i sends to each neighbour."""
        out = {}
        for itf in self.outgoing(i):
            side = self.sender_side(itf.key)
            if itf.kind == "dirichlet":
                out[itf.receiver] = self.solvers[i].trace(u, side)
            else:
                # receiver's outward normal is opposite to the sender's
                out[itf.receiver] = -self.solvers[i].flux(u, a_el, side, self.flux_method)
        return out

    def output(self, i: int, u: np.ndarray) -> float:
        seg = self.by_id[i].output
        if seg is None:
            raise DecompositionError(f"subdomain {i} has no output segment")
        return line_integral(self.meshes[i], u, seg)

    def global_field(self, xis: dict) -> np.ndarray:
        a_el = np.empty((self.global_mesh.n_elements, 4))
        for i in self.ids:
            a_el[self.element_map[i]] = self.element_field(i, xis[i])
        return a_el

    def global_solve(self, xis: dict) -> np.ndarray:
        return self.global_solver.solve(self.global_field(xis))

    def global_outputs(self, u: np.ndarray) -> dict:
        return {i: line_integral(self.global_mesh, u, self.by_id[i].output) for i in self.ids
                if self.by_id[i].output is not None}


# -- POD ----------------------------------------------------------------------------


@dataclass
class PODBasis:
    modes: np.ndarray  # (n_dof, n_modes), orthonormal columns
    singular_values: np.ndarray
    mean: np.ndarray

    @property
    def size(self) -> int:
        return self.modes.shape[1]

    def encode(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.modes

    def decode(self, c: np.ndarray) -> np.ndarray:
        return self.mean + np.asarray(c) @ self.modes.T

    @classmethod
    def identity(cls, n: int) -> "PODBasis":
        return cls(np.eye(n), np.ones(n), np.zeros(n))


def build_pod(snapshots: np.ndarray, retained: int, center: bool = True) -> PODBasis:
    """SVD basis of snapshot rows; ``center`` subtracts the snapshot mean first."""
    X = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    mean = X.mean(axis=0) if center else np.zeros(X.shape[1])
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = int(np.sum(s > (s[0] if s.size else 0.0) * max(X.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    if retained < 1 or retained > rank:
        raise PODError(f"cannot retain {retained} modes from rank-{rank} snapshots; singular values {np.array2string(s, precision=3)}")
    modes = vt[:retained].T.copy()
    # deterministic sign: largest entry of each mode positive
    flip = np.sign(modes[np.argmax(np.abs(modes), axis=0), np.arange(retained)])
    modes *= flip
    return PODBasis(modes, s, mean)


# -- iteration ----------------------------------------------------------------------


def dn_update(tau: np.ndarray, h: np.ndarray, theta: float) -> np.ndarray:
    """Relaxed update; theta == 0 means plain replacement by h."""
    if theta < 0:
        raise DecompositionError(f"relaxation must be nonnegative, got {theta}")
    if theta == 0:
        return np.array(h, dtype=np.float64, copy=True)
    return theta * np.asarray(h) + (1.0 - theta) * np.asarray(tau)


def indicator(new: dict, old: dict) -> np.ndarray:
    """max over interfaces of the sup-norm change, one value per sample."""
    return np.max(np.stack([np.max(np.abs(new[k] - old[k]), axis=-1) for k in new]), axis=0)


@dataclass
class IterationResult:
    tau: dict  # key -> (n, N_key) converged coefficients
    steps: np.ndarray  # per-sample number of steps taken
    converged: np.ndarray  # per-sample flag
    history: list  # max over active samples of the indicator, one per step
    final_indicator: np.ndarray


def iterate(keys: list, thetas: dict, receivers: dict, oracle: Callable, tau0: dict,
            tol: float = 1e-6, max_steps: int = 500) -> IterationResult:
    """Parallel relaxation for a batch of samples.

    ``oracle(i, idx, tau_i)`` returns ``{j: h_ij}`` for subdomain ``i`` and the
    sample indices ``idx``, where ``tau_i`` concatenates incoming coefficients.
    ``receivers[i]`` lists the incoming keys of subdomain i in order.
    Samples that meet the tolerance are frozen.
    """
    if tol <= 0:
        raise DecompositionError("tolerance must be positive")
    tau = {k: np.array(v, dtype=np.float64, copy=True) for k, v in tau0.items()}
    n = next(iter(tau.values())).shape[0]
    active = np.arange(n)
    steps = np.zeros(n, dtype=int)
    final = np.full(n, np.inf)
    history = []
    for step in range(1, max_steps + 1):
        if active.size == 0:
            break
        cur = {k: tau[k][active] for k in keys}
        h = {}
        for i, inc in receivers.items():
            tau_i = np.concatenate([cur[k] for k in inc], axis=1) if inc else np.zeros((active.size, 0))
            for j, val in oracle(i, active, tau_i).items():
                h[(i, j)] = val
        new = {k: dn_update(cur[k], h[k], thetas[k]) for k in keys}
        for k in keys:
            if not np.all(np.isfinite(new[k])):
                raise DivergenceError(f"non-finite interface data at step {step} on interface {k}")
        eps = indicator(new, cur)
        history.append(float(eps.max()))
        for k in keys:
            tau[k][active] = new[k]
        steps[active] = step
        final[active] = eps
        active = active[eps >= tol]
    return IterationResult(tau, steps, final < tol, history, final)


def exact_oracle(dec: Decomposition, xis: dict, bases: dict) -> Callable:
    """Coupling oracle that runs the local finite-element solves."""
    fields = {}

    def field(i, s):
        if (i, s) not in fields:
            fields[(i, s)] = dec.element_field(i, xis[i][s])
        return fields[(i, s)]

    def oracle(i, idx, tau_i):
        inc = dec.incoming(i)
        sizes = np.cumsum([0] + [bases[itf.key].size for itf in inc])
        out = {itf.receiver: np.empty((idx.size, bases[itf.key].size)) for itf in dec.outgoing(i)}
        for row, s in enumerate(idx):
            data = {itf.sender: bases[itf.key].decode(tau_i[row, sizes[q]:sizes[q + 1]])
                    for q, itf in enumerate(inc)}
            a_el = field(i, s)
            u = dec.local_solve(i, a_el, data)
            for j, val in dec.exports(i, u, a_el).items():
                out[j][row] = bases[(i, j)].encode(val)
        return out

    return oracle


def run_exact_dd(dec: Decomposition, xis: dict, bases: dict | None = None, tau0: dict | None = None,
                 tol: float | None = None, max_steps: int | None = None) -> IterationResult:
    """Dirichlet-Neumann iteration with exact local solves.

    Without ``bases`` the interface data is carried in full nodal
    coordinates, so the fixed point is not affected by any truncation.
    """
    keys = [itf.key for itf in dec.interfaces]
    if bases is None:
        bases = {k: PODBasis.identity(dec.interface_size(k)) for k in keys}
    n = next(iter(xis.values())).shape[0]
    if tau0 is None:
        tau0 = {k: np.zeros((n, bases[k].size)) for k in keys}
    receivers = {i: [itf.key for itf in dec.incoming(i)] for i in dec.ids}
    return iterate(keys, {itf.key: itf.theta for itf in dec.interfaces}, receivers,
                   exact_oracle(dec, xis, bases), tau0,
                   dec.tol if tol is None else tol, dec.max_steps if max_steps is None else max_steps)


def local_solutions(dec: Decomposition, xis: dict, tau: dict, bases: dict, s: int) -> dict:
    """Local solutions of sample s for given interface coefficients."""
    out = {}
    for i in dec.ids:
        data = {itf.sender: bases[itf.key].decode(tau[itf.key][s]) for itf in dec.incoming(i)}
        out[i] = dec.local_solve(i, dec.element_field(i, xis[i][s]), data)
    return out
