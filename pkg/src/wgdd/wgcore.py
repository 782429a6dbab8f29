"""Element-level weak Galerkin algebra.

Local degrees of freedom of a cell with p edges are ordered as
``[v0 (n0) | vb on local edge 0 (nb) | ... | vb on local edge p-1 (nb)]``,
where local edge i runs from loop vertex i to loop vertex i+1. Trace
coefficients always refer to the edge basis in the edge's *global*
orientation, so neighbouring cells agree on them without sign flips.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import ModelError
from .polybasis import (
    RTSpace,
    VectorPolySpace,
    batch_cell_quadrature,
    gauss_rule,
    polygon_area_centroid,
    scaled_monomial_gradients,
    scaled_monomials,
)

__all__ = [
    "ElementFamily",
    "WeakFunction",
    "LocalOperators",
    "Discretization",
    "cell_geometry",
    "project_Q0",
    "project_Qb",
    "weak_gradient_matrix",
    "weak_gradient",
    "stabilizer_matrix",
    "local_stiffness",
    "local_load",
    "compute_local_operators",
]

KINDS = ("standard", "superconvergent")


@dataclass(frozen=True)
class ElementFamily:
    """{P_k, P_{k-1}} with [P_{k-1}]^2 gradients and a stabilizer, or the
    stabilizer-free {P_k, P_k} element with RT_k gradients."""

    kind: str = "standard"
    degree: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown element family {self.kind!r}")
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError("degree must be an integer >= 1")

    @property
    def superconvergent(self):
        return self.kind == "superconvergent"

    @property
    def stabilized(self):
        return not self.superconvergent

    @property
    def trace_degree(self):
        return self.degree if self.superconvergent else self.degree - 1

    @property
    def n0(self):
        k = self.degree
        return (k + 1) * (k + 2) // 2

    @property
    def nb(self):
        return self.trace_degree + 1

    @property
    def ng(self):
        k = self.degree
        return (k + 1) * (k + 3) if self.superconvergent else k * (k + 1)

    def nloc(self, p):
        return self.n0 + p * self.nb

    @property
    def cell_quad_degree(self):
        return 2 * self.degree + (3 if self.superconvergent else 2)

    @property
    def edge_quad_degree(self):
        return 2 * self.degree + 1

    def gradient_space(self, center, h):
        if self.superconvergent:
            return RTSpace(center, h, self.degree)
        return VectorPolySpace(center, h, self.degree - 1)


def cell_geometry(vertices):
    """Area, area centroid and diameter of polygons ``(..., p, 2)``."""
    v = np.asarray(vertices, dtype=float)
    area, cen = polygon_area_centroid(v)
    d = v[..., :, None, :] - v[..., None, :, :]
    diam = np.sqrt((d ** 2).sum(-1).max(axis=(-1, -2)))
    return area, cen, diam


def _edge_points(v, i, signs, nb, degree):
    """Quadrature data on local edge i of a batch of cells."""
    p = v.shape[1]
    p0 = v[:, i]
    p1 = v[:, (i + 1) % p]
    d = p1 - p0
    length = np.hypot(d[:, 0], d[:, 1])
    s, w = gauss_rule(degree)
    xe = p0[:, None, :] + s[None, :, None] * d[:, None, :]
    we = length[:, None] * w[None, :]
    t = signs[:, i, None] * (s[None, :] - 0.5)
    psi = t[..., None] ** np.arange(nb)
    normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    return xe, we, psi, normal


@dataclass(frozen=True, eq=False)
class LocalOperators:
    """Local matrices for a batch of cells sharing one vertex count.

    All arrays carry the batch on axis 0:
    ``G`` weak gradient (C, ng, nloc); ``Mg`` gradient-space Gram (C, ng, ng);
    ``A`` stiffness incl. reaction and stabilizer (C, nloc, nloc);
    ``S`` stabilizer scaled by 1/h_T (C, nloc, nloc); ``M0`` interior mass
    (C, n0, n0); ``K0a``/``K0`` a-weighted and plain Dirichlet forms of v0;
    ``b`` load moments (C, n0); ``Qb0`` per-edge projections of v0 traces
    (C, p, nb, n0); ``Me`` per-edge trace Gram (C, p, nb, nb).
    """

    cells: np.ndarray
    nvert: int
    family: ElementFamily
    centers: np.ndarray
    diameters: np.ndarray
    G: np.ndarray
    Mg: np.ndarray
    A: np.ndarray
    S: np.ndarray
    M0: np.ndarray
    K0a: np.ndarray
    K0: np.ndarray
    b: np.ndarray
    Qb0: np.ndarray
    Me: np.ndarray


def _weighted_gram(w, X, Y=None):
    """sum_q w[c,q] X[c,q,i,...] Y[c,q,j,...] as a batched matmul."""
    Y = X if Y is None else Y
    C, Q = w.shape
    Xw = (X * w.reshape(C, Q, *([1] * (X.ndim - 2)))).reshape(C, Q, X.shape[2], -1)
    Xw = Xw.transpose(0, 2, 1, 3).reshape(C, X.shape[2], -1)
    Yr = Y.reshape(C, Q, Y.shape[2], -1).transpose(0, 2, 1, 3).reshape(C, Y.shape[2], -1)
    return Xw @ Yr.transpose(0, 2, 1)


def compute_local_operators(vertices, family, a=None, c=None, f=None, signs=None, cells=None):
    """Batched construction of :class:`LocalOperators` for ``(C, p, 2)`` vertex loops.

    ``a`` and ``c`` are checked at every quadrature point (``a > 0``, ``c >= 0``).
    ``signs`` gives the orientation of each local edge relative to its global
    direction (default +1, i.e. the local direction is the global one).
    """
    v = np.asarray(vertices, dtype=float)
    C, p, _ = v.shape
    if signs is None:
        signs = np.ones((C, p))
    signs = np.asarray(signs, dtype=float)
    k = family.degree
    n0, nb, ng = family.n0, family.nb, family.ng
    nloc = family.nloc(p)

    _, cen, diam = cell_geometry(v)
    X, W = batch_cell_quadrature(v, family.cell_quad_degree)
    c3 = cen[:, None, :]
    h3 = diam[:, None]
    phi = scaled_monomials(X, c3, h3, k)
    dphi = scaled_monomial_gradients(X, c3, h3, k)
    space = family.gradient_space(c3, h3)
    wv = space.eval(X)
    wd = space.div(X)

    aq = np.ones(W.shape) if a is None else np.asarray(a(X), dtype=float) * np.ones(W.shape)
    cq = np.zeros(W.shape) if c is None else np.asarray(c(X), dtype=float) * np.ones(W.shape)
    if np.any(~np.isfinite(aq)) or np.any(aq <= 0.0):
        raise ModelError("diffusion coefficient a must be positive at every quadrature point")
    if np.any(~np.isfinite(cq)) or np.any(cq < 0.0):
        raise ModelError("reaction coefficient c must be non-negative at every quadrature point")

    Mg = _weighted_gram(W, wv)
    Ma = _weighted_gram(W * aq, wv)
    M0 = _weighted_gram(W, phi)
    Mc = _weighted_gram(W * cq, phi)
    K0a = _weighted_gram(W * aq, dphi)
    K0 = _weighted_gram(W, dphi)

    B = np.zeros((C, ng, nloc))
    B[:, :, :n0] = -_weighted_gram(W, wd, phi)
    S = np.zeros((C, nloc, nloc))
    Qb0 = np.zeros((C, p, nb, n0))
    Me = np.zeros((C, p, nb, nb))
    for i in range(p):
        xe, we, psi, normal = _edge_points(v, i, signs, nb, family.edge_quad_degree)
        sl = slice(n0 + i * nb, n0 + (i + 1) * nb)
        wn = np.einsum("cqid,cd->cqi", space.eval(xe), normal)
        B[:, :, sl] = _weighted_gram(we, wn, psi)
        me = _weighted_gram(we, psi)
        ce = _weighted_gram(we, psi, scaled_monomials(xe, c3, h3, k))
        proj = np.linalg.solve(me, ce)
        Me[:, i] = me
        Qb0[:, i] = proj
        if family.stabilized:
            D = np.zeros((C, nb, nloc))
            D[:, :, :n0] = proj
            D[:, :, sl] = -np.eye(nb)
            S += D.transpose(0, 2, 1) @ me @ D / diam[:, None, None]

    G = np.linalg.solve(Mg, B)
    A = G.transpose(0, 2, 1) @ Ma @ G + S
    A[:, :n0, :n0] += Mc
    A = 0.5 * (A + A.transpose(0, 2, 1))
    S = 0.5 * (S + S.transpose(0, 2, 1))
    if f is None:
        b = np.zeros((C, n0))
    else:
        b = np.einsum("cq,cqi->ci", W * f(X), phi)
    if cells is None:
        cells = np.arange(C)
    return LocalOperators(
        cells=np.asarray(cells), nvert=p, family=family, centers=cen, diameters=diam,
        G=G, Mg=Mg, A=A, S=S, M0=M0, K0a=K0a, K0=K0, b=b, Qb0=Qb0, Me=Me,
    )


def _single(vertices, signs):
    v = np.asarray(vertices, dtype=float)[None]
    s = None if signs is None else np.asarray(signs, dtype=float)[None]
    return v, s


def weak_gradient_matrix(vertices, family, signs=None):
    """Matrix mapping local (v0, vb) coefficients to weak-gradient coefficients."""
    v, s = _single(vertices, signs)
    return compute_local_operators(v, family, signs=s).G[0]


def stabilizer_matrix(vertices, family, signs=None):
    """h_T^{-1} sum_e <Q_b v0 - vb, Q_b w0 - wb>_e; zero for the superconvergent family."""
    v, s = _single(vertices, signs)
    return compute_local_operators(v, family, signs=s).S[0]


def local_stiffness(vertices, family, a=None, c=None, signs=None):
    v, s = _single(vertices, signs)
    return compute_local_operators(v, family, a=a, c=c, signs=s).A[0]


def local_load(vertices, family, f):
    v, _ = _single(vertices, None)
    return compute_local_operators(v, family, f=f).b[0]


def weak_gradient(vertices, family, v0, vb):
    """Weak gradient of ``{v0, vb}`` with ``v0``/``vb`` given as callables.

    The boundary pairing is integrated directly, so ``vb`` need not lie in the
    discrete trace space. Returns the gradient-space coefficient vector.
    """
    v = np.asarray(vertices, dtype=float)
    p = len(v)
    _, cen, diam = cell_geometry(v)
    X, W = batch_cell_quadrature(v[None], family.cell_quad_degree + family.degree)
    space = family.gradient_space(cen, diam)
    wv = space.eval(X[0])
    rhs = -np.einsum("q,qi,q->i", W[0], space.div(X[0]), v0(X[0]))
    for i in range(p):
        xe, we, _, normal = _edge_points(v[None], i, np.ones((1, p)), 1, family.edge_quad_degree + family.degree)
        wn = space.eval(xe[0]) @ normal[0]
        rhs += np.einsum("q,qi,q->i", we[0], wn, vb(xe[0]))
    Mg = np.einsum("q,qid,qjd->ij", W[0], wv, wv)
    return np.linalg.solve(Mg, rhs)


def project_Q0(f, vertices, degree, quad_degree=None):
    """L2 projection of ``f`` onto P_k of one cell (centered scaled monomials)."""
    v = np.asarray(vertices, dtype=float)
    _, cen, diam = cell_geometry(v)
    qd = 2 * degree + 2 if quad_degree is None else quad_degree
    X, W = batch_cell_quadrature(v[None], qd)
    phi = scaled_monomials(X[0], cen, diam, degree)
    M = np.einsum("q,qi,qj->ij", W[0], phi, phi)
    return np.linalg.solve(M, phi.T @ (W[0] * f(X[0])))


def project_Qb(g, start, end, degree, quad_degree=None):
    """L2 projection of ``g`` onto P_r of the edge ``start -> end``."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    qd = 2 * degree + 2 if quad_degree is None else quad_degree
    s, w = gauss_rule(qd)
    length = np.hypot(*(end - start))
    xe = start + s[:, None] * (end - start)
    psi = (s - 0.5)[:, None] ** np.arange(degree + 1)
    M = np.einsum("q,ql,qm->lm", w * length, psi, psi)
    return np.linalg.solve(M, psi.T @ (w * length * g(xe)))


class WeakFunction:
    """Discrete weak function over a mesh.

    ``v0`` is ``(n_cells, n0)``; ``vb`` is ``(n_edges, nb)`` as seen from each
    edge's left cell. ``vb_right`` is ``None`` for single-valued (monolithic)
    functions, otherwise the per-side copy seen from the right cell.
    """

    def __init__(self, mesh, family, v0, vb, vb_right=None):
        self.mesh = mesh
        self.family = family
        self.v0 = np.asarray(v0, dtype=float)
        self.vb = np.asarray(vb, dtype=float)
        self.vb_right = None if vb_right is None else np.asarray(vb_right, dtype=float)
        if self.v0.shape != (mesh.n_cells, family.n0):
            raise ValueError("v0 has the wrong shape")
        if self.vb.shape != (mesh.n_edges, family.nb):
            raise ValueError("vb has the wrong shape")
        if self.vb_right is not None and self.vb_right.shape != self.vb.shape:
            raise ValueError("vb_right has the wrong shape")

    @property
    def single_valued(self):
        return self.vb_right is None

    def local(self, cells):
        """Cell-local coefficient vectors ``(C, nloc)`` for same-size cells."""
        cells = np.asarray(cells)
        ce = self.mesh.cell_edge_array(cells)
        vb = self.vb[ce]
        if self.vb_right is not None:
            is_right = self.mesh.edge_cells[ce, 1] == cells[:, None]
            vb = np.where(is_right[..., None], self.vb_right[ce], vb)
        return np.concatenate([self.v0[cells], vb.reshape(len(cells), -1)], axis=1)

    def __sub__(self, other):
        right = None
        if self.vb_right is not None or other.vb_right is not None:
            sr = self.vb if self.vb_right is None else self.vb_right
            orr = other.vb if other.vb_right is None else other.vb_right
            right = sr - orr
        return WeakFunction(self.mesh, self.family, self.v0 - other.v0, self.vb - other.vb, right)

    def __mul__(self, t):
        right = None if self.vb_right is None else t * self.vb_right
        return WeakFunction(self.mesh, self.family, t * self.v0, t * self.vb, right)

    __rmul__ = __mul__


class Discretization:
    """Local operators for every cell of a mesh plus edge data for one problem."""

    def __init__(self, mesh, family, problem):
        self.mesh = mesh
        self.family = family
        self.problem = problem
        self.groups = {}
        for p, cells in mesh.groups.items():
            self.groups[p] = compute_local_operators(
                mesh.cell_vertex_array(cells), family,
                a=problem.a, c=problem.c, f=problem.f,
                signs=mesh.cell_edge_signs(cells), cells=cells,
            )
        self._edge_data()

    def _edge_data(self):
        mesh, nb = self.mesh, self.family.nb
        s, w = gauss_rule(self.family.edge_quad_degree)
        t = s - 0.5
        self._edge_psi = t[:, None] ** np.arange(nb)
        self._edge_w = w
        L = mesh.edge_lengths
        self.edge_mass = L[:, None, None] * np.einsum("q,ql,qm->lm", w, self._edge_psi, self._edge_psi)
        self.dirichlet = np.zeros((mesh.n_edges, nb))
        bnd = mesh.boundary_edges
        if len(bnd):
            self.dirichlet[bnd] = self.project_edges(self.problem.g, bnd)

    def project_edges(self, g, edges, quad_degree=None):
        """Q_b projections of ``g`` onto the trace space of the given edges."""
        mesh = self.mesh
        qd = self.family.edge_quad_degree + 2 if quad_degree is None else quad_degree
        s, w = gauss_rule(qd)
        psi = (s - 0.5)[:, None] ** np.arange(self.family.nb)
        p0 = mesh.vertices[mesh.edges[edges, 0]]
        p1 = mesh.vertices[mesh.edges[edges, 1]]
        xe = p0[:, None, :] + s[None, :, None] * (p1 - p0)[:, None, :]
        mom = np.einsum("q,ql,eq->el", w, psi, g(xe))
        gram = np.einsum("q,ql,qm->lm", w, psi, psi)
        return np.linalg.solve(gram, mom.T).T

    def project_cells(self, u, quad_degree=None):
        """Q_0 projections of ``u`` for all cells, ``(n_cells, n0)``."""
        mesh, fam = self.mesh, self.family
        qd = fam.cell_quad_degree + 2 if quad_degree is None else quad_degree
        out = np.zeros((mesh.n_cells, fam.n0))
        for ops in self.groups.values():
            X, W = batch_cell_quadrature(mesh.cell_vertex_array(ops.cells), qd)
            phi = scaled_monomials(X, ops.centers[:, None, :], ops.diameters[:, None], fam.degree)
            mom = np.einsum("cq,cqi->ci", W * u(X), phi)
            M = np.einsum("cq,cqi,cqj->cij", W, phi, phi)
            out[ops.cells] = np.linalg.solve(M, mom[..., None])[..., 0]
        return out

    def interpolate(self, u):
        """Q_h u = {Q_0 u, Q_b u} as a single-valued weak function."""
        edges = np.arange(self.mesh.n_edges)
        return WeakFunction(self.mesh, self.family, self.project_cells(u), self.project_edges(u, edges))

    @cached_property
    def exact_projection(self):
        if self.problem.u is None:
            raise ValueError("problem has no exact solution")
        return self.interpolate(self.problem.u)

    def zero(self):
        fam = self.family
        return WeakFunction(self.mesh, fam, np.zeros((self.mesh.n_cells, fam.n0)),
                            np.zeros((self.mesh.n_edges, fam.nb)))
