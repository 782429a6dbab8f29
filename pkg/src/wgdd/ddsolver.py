"""Hybridized subdomain formulation and the parallel Robin-transmission iteration.

Interface data is stored per interface edge and side: ``ub[i, s]`` and
``lam[i, s]`` hold the trace and multiplier coefficients of interface edge
``i`` as seen from side ``s`` (0 = subdomain of the edge's left cell,
1 = right cell). Trace and multiplier spaces share the edge basis, so the
pairing <lam, v_b>_e is ``v_b @ Me @ lam``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import Factorization, scatter_symmetric
from .errors import weak_gradient_norm
from .exceptions import DiagnosticError, SolverError
from .wgcore import WeakFunction

__all__ = [
    "default_beta",
    "SubdomainSystem",
    "DomainDecomposition",
    "InterfaceState",
    "IterationLog",
    "StopRule",
    "HybridSolution",
    "build_subdomain_systems",
    "initial_state",
    "iterate_once",
    "run",
    "solve_hybrid_direct",
    "recover_multipliers",
    "energy_diagnostics",
]


def default_beta(family):
    """Relaxation parameter used for the reported experiments."""
    if family.superconvergent:
        return 4.0
    return {4: 32.0, 5: 19.0, 6: 32.0}.get(family.degree, 8.0)


@dataclass(eq=False)
class SubdomainSystem:
    """Local system of one subdomain, factored once.

    Local free unknowns are the v0 coefficients of the subdomain's cells
    followed by trace coefficients of its non-Dirichlet edges.
    """

    index: int
    cells: np.ndarray
    matrix0: sp.csc_matrix
    matrix: sp.csc_matrix
    factor: Factorization
    rhs: np.ndarray
    iface: np.ndarray
    side: np.ndarray
    iface_rows: np.ndarray
    edges: np.ndarray
    edge_rows: np.ndarray
    edge_is_right: np.ndarray

    @property
    def n_dofs(self):
        return self.matrix.shape[0]

    def v0_rows(self, n0):
        return np.arange(len(self.cells) * n0).reshape(-1, n0)


@dataclass(eq=False)
class DomainDecomposition:
    disc: object
    partition: object
    beta: float
    systems: list
    iface_edges: np.ndarray
    iface_sub: np.ndarray
    iface_mass: np.ndarray

    def __len__(self):
        return len(self.systems)

    def __iter__(self):
        return iter(self.systems)

    def __getitem__(self, j):
        return self.systems[j]

    @property
    def n_interfaces(self):
        return len(self.iface_edges)


@dataclass(frozen=True, eq=False)
class InterfaceState:
    """Iterate n. ``local_solve`` is False only for a start that was not
    produced by subdomain solves (the zero start); the energy identities
    are guaranteed only for steps taken from locally solved states."""

    n: int
    ub: np.ndarray
    lam: np.ndarray
    solutions: tuple
    local_solve: bool = True


@dataclass
class IterationLog:
    residuals: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    identity_gaps: list = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0

    @property
    def iterations(self):
        return len(self.residuals)


@dataclass(frozen=True)
class StopRule:
    """``residual`` stops on r^(n) <= tol.

    ``oracle`` stops once the energy error against the exact solution
    decreases by less than ``slack`` relative to the previous iterate, i.e.
    once it has settled at the truncation error of the level. ``tol`` then
    holds that truncation error for reference; it is not a threshold,
    because single iterates can dip below it before the iteration settles.
    """

    mode: str = "residual"
    tol: float = 1e-10
    max_iters: int = 1000
    slack: float = 0.01

    def __post_init__(self):
        if self.mode not in ("residual", "oracle"):
            raise ValueError(f"unknown stop mode {self.mode!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def _group_split(values, M):
    order = np.argsort(values, kind="stable")
    bounds = np.searchsorted(values[order], np.arange(M + 1))
    return [order[bounds[j]:bounds[j + 1]] for j in range(M)]


def build_subdomain_systems(disc, partition, beta):
    """Assemble and factor the beta-augmented local systems of every subdomain."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    beta = float(beta)
    mesh, fam = disc.mesh, disc.family
    n0, nb = fam.n0, fam.nb
    M = partition.n_subdomains
    cs = partition.cell_subdomain
    iface_edges, iface_sub = partition.interface_edges
    iface_of_edge = np.full(mesh.n_edges, -1, dtype=np.int64)
    iface_of_edge[iface_edges] = np.arange(len(iface_edges))
    is_dirichlet = mesh.edge_cells[:, 1] < 0
    split = {p: _group_split(cs[ops.cells], M) for p, ops in disc.groups.items()}
    cells_by_sub = _group_split(cs, M)

    systems = []
    for j in range(M):
        cells = cells_by_sub[j]
        cell_pos = np.full(mesh.n_cells, -1, dtype=np.int64)
        cell_pos[cells] = np.arange(len(cells))
        sub_edges = np.unique(np.concatenate([mesh.cell_edges[c] for c in cells]))
        n_full = len(cells) * n0 + len(sub_edges) * nb
        fixed = np.zeros(n_full, dtype=bool)
        fixed_values = np.zeros(n_full)
        erow = len(cells) * n0 + np.arange(len(sub_edges))[:, None] * nb + np.arange(nb)
        dmask = is_dirichlet[sub_edges]
        fixed[erow[dmask].ravel()] = True
        fixed_values[erow[dmask]] = disc.dirichlet[sub_edges[dmask]]

        def local_index(ops, rows):
            c = ops.cells[rows]
            v0 = cell_pos[c][:, None] * n0 + np.arange(n0)
            le = np.searchsorted(sub_edges, mesh.cell_edge_array(c))
            vb = len(cells) * n0 + le[..., None] * nb + np.arange(nb)
            return np.concatenate([v0, vb.reshape(len(c), -1)], axis=1)

        def blocks():
            for p, ops in disc.groups.items():
                rows = split[p][j]
                if len(rows) == 0:
                    continue
                b = np.zeros((len(rows), ops.A.shape[1]))
                b[:, :n0] = ops.b[rows]
                yield ops.A[rows], b, local_index(ops, rows)

        K0, F, _ = scatter_symmetric(blocks(), fixed, fixed_values)
        pos = np.full(n_full, -1, dtype=np.int64)
        pos[~fixed] = np.arange(int((~fixed).sum()))

        mine = iface_of_edge[sub_edges]
        sel = np.flatnonzero(mine >= 0)
        iface = mine[sel]
        side = (iface_sub[iface, 1] == j).astype(np.int64)
        iface_rows = pos[erow[sel]]
        if len(iface):
            Me = disc.edge_mass[iface_edges[iface]]
            Kb, _, _ = scatter_symmetric(
                [(beta * Me, np.zeros((len(iface), nb)), erow[sel])], fixed, fixed_values
            )
            K = (K0 + Kb).tocsc()
        else:
            K = K0
        free_edges = np.flatnonzero(~dmask)
        edges = sub_edges[free_edges]
        edge_rows = pos[erow[free_edges]]
        right_cells = mesh.edge_cells[edges, 1]
        edge_is_right = (iface_of_edge[edges] >= 0) & (cs[np.maximum(right_cells, 0)] == j)
        try:
            factor = Factorization(K)
        except SolverError as exc:
            raise SolverError(f"subdomain {j}: {exc}") from exc
        systems.append(SubdomainSystem(
            index=j, cells=cells, matrix0=K0, matrix=K, factor=factor, rhs=F,
            iface=iface, side=side, iface_rows=iface_rows,
            edges=edges, edge_rows=edge_rows, edge_is_right=edge_is_right,
        ))
    iface_mass = disc.edge_mass[iface_edges]
    return DomainDecomposition(disc, partition, beta, systems, iface_edges, iface_sub, iface_mass)


def _local_solve(dd, sysj, ub, lam):
    rhs = sysj.rhs.copy()
    if len(sysj.iface):
        other = 1 - sysj.side
        data = dd.beta * ub[sysj.iface, other] - lam[sysj.iface, other]
        rhs[sysj.iface_rows] += np.einsum("ilm,im->il", dd.iface_mass[sysj.iface], data)
    return sysj.factor.solve(rhs)


def iterate_once(state, dd, order=None, n_jobs=1):
    """One Jacobi-style sweep: every subdomain reads only iteration n-1 data.

    ``order`` permutes the subdomain processing order and ``n_jobs`` runs the
    back-solves on a thread pool; neither changes any output bit.
    """
    ub_old, lam_old = state.ub, state.lam
    order = range(len(dd.systems)) if order is None else order
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            futures = {j: pool.submit(_local_solve, dd, dd.systems[j], ub_old, lam_old) for j in order}
            sols = {j: f.result() for j, f in futures.items()}
    else:
        sols = {j: _local_solve(dd, dd.systems[j], ub_old, lam_old) for j in order}
    solutions = tuple(sols[j] for j in range(len(dd.systems)))
    ub = np.zeros_like(ub_old)
    for sysj, x in zip(dd.systems, solutions):
        if len(sysj.iface):
            ub[sysj.iface, sysj.side] = x[sysj.iface_rows]
    lam = dd.beta * (ub_old[:, ::-1] - ub) - lam_old[:, ::-1]
    return InterfaceState(state.n + 1, ub, lam, solutions)


def initial_state(dd, kind="zero"):
    """Starting iterate.

    ``zero``: u = 0 (Q_b g on the outer boundary), lambda = 0.
    ``local``: each subdomain solves its Robin problem with zero interface
    data and lambda_jk = -beta u_{j,b}; this start already satisfies the
    local equations, so the energy identities hold from the first step.
    """
    nb = dd.disc.family.nb
    I = dd.n_interfaces
    zero = InterfaceState(
        0, np.zeros((I, 2, nb)), np.zeros((I, 2, nb)),
        tuple(np.zeros(s.n_dofs) for s in dd.systems), local_solve=False,
    )
    if kind == "zero":
        return zero
    if kind == "local":
        return replace(iterate_once(zero, dd), n=0)
    raise ValueError(f"unknown initial state {kind!r}")


def interface_residual(dd, state):
    """r = (sum_{j,k} |[[u_b]]|^2 + sum_{j,k} |lam_jk + lam_kj|^2)^(1/2) over ordered pairs."""
    if dd.n_interfaces == 0:
        return 0.0
    jump = state.ub[:, 0] - state.ub[:, 1]
    asym = state.lam[:, 0] + state.lam[:, 1]
    Me = dd.iface_mass
    total = 2.0 * (np.einsum("il,ilm,im->", jump, Me, jump) + np.einsum("il,ilm,im->", asym, Me, asym))
    return math.sqrt(max(total, 0.0))


def to_weak_function(dd, state):
    """Assemble per-subdomain solutions into a (two-valued on interfaces) weak function."""
    disc = dd.disc
    mesh, fam = disc.mesh, disc.family
    v0 = np.zeros((mesh.n_cells, fam.n0))
    vb = disc.dirichlet.copy()
    vb_right = vb.copy()
    for sysj, x in zip(dd.systems, state.solutions):
        v0[sysj.cells] = x[: len(sysj.cells) * fam.n0].reshape(-1, fam.n0)
        vals = x[sysj.edge_rows]
        right = sysj.edge_is_right
        vb[sysj.edges[~right]] = vals[~right]
        vb_right[sysj.edges[right]] = vals[right]
    single = np.ones(mesh.n_edges, dtype=bool)
    single[dd.iface_edges] = False
    vb_right[single] = vb[single]
    return WeakFunction(mesh, fam, v0, vb, vb_right)


def from_weak_function(dd, wf):
    """Local free vectors and interface traces of a weak function."""
    fam = dd.disc.family
    right = wf.vb if wf.vb_right is None else wf.vb_right
    sols = []
    for sysj in dd.systems:
        x = np.zeros(sysj.n_dofs)
        x[: len(sysj.cells) * fam.n0] = wf.v0[sysj.cells].ravel()
        vals = np.where(sysj.edge_is_right[:, None], right[sysj.edges], wf.vb[sysj.edges])
        x[sysj.edge_rows] = vals
        sols.append(x)
    ub = np.stack([wf.vb[dd.iface_edges], right[dd.iface_edges]], axis=1)
    return tuple(sols), ub


def run(state0, dd, stop=StopRule(), error_fn=None, reference=None, order=None, n_jobs=1,
        check_identities=False, identity_rtol=1e-9):
    """Iterate until the stop rule fires or ``max_iters`` is reached.

    ``error_fn(state) -> float`` is required in oracle mode. With a
    ``reference`` (:class:`HybridSolution`) the energy functional is logged
    per iterate; ``check_identities`` then raises :class:`DiagnosticError`
    when the dissipation identity fails. Non-convergence is reported through
    ``log.converged``, not raised.
    """
    if stop.mode == "oracle" and error_fn is None:
        raise ValueError("oracle stopping needs an error function")
    log = IterationLog(tol=stop.tol)
    state = state0
    prev = energy_diagnostics(state, dd, reference) if reference is not None else None
    if prev is not None:
        log.energies.append(prev["E"])
    last_err = float(error_fn(state)) if error_fn is not None else None
    for _ in range(stop.max_iters):
        checked = state.local_solve
        state = iterate_once(state, dd, order=order, n_jobs=n_jobs)
        r = interface_residual(dd, state)
        log.residuals.append(r)
        if error_fn is not None:
            log.errors.append(float(error_fn(state)))
        if reference is not None:
            cur = energy_diagnostics(state, dd, reference)
            gap = (prev["E"] - cur["E"]) - 4.0 * dd.beta * prev["energy"]
            log.energies.append(cur["E"])
            log.identity_gaps.append(gap)
            if check_identities and checked:
                scale = max(log.energies[0], np.finfo(float).tiny)
                if abs(gap) > identity_rtol * scale:
                    raise DiagnosticError(f"iteration {state.n}: dissipation identity off by {gap:.3e}")
                if abs(cur["E"] - cur["E_alt"]) > identity_rtol * scale:
                    raise DiagnosticError(f"iteration {state.n}: E^(n) forms disagree")
            prev = cur
        if stop.mode == "residual" and r <= stop.tol:
            log.converged = True
            break
        if stop.mode == "oracle":
            err = log.errors[-1]
            if last_err - err < stop.slack * last_err:
                log.converged = True
                break
            last_err = err
    return state, log


@dataclass(frozen=True, eq=False)
class HybridSolution:
    """Subdomain solutions and multipliers of the coupled hybridized system."""

    solutions: tuple
    ub: np.ndarray
    lam: np.ndarray
    function: WeakFunction

    def as_state(self):
        return InterfaceState(0, self.ub, self.lam, self.solutions)


def solve_hybrid_direct(dd, rtol=1e-10):
    """Solve the saddle-point system coupling all subdomains through multipliers.

    Rows: local equations ``K0_j x_j - sum <lam_jk, v_b> = F_j``; one jump
    constraint ``<mu, u_{j,b} - u_{k,b}> = 0`` and one antisymmetry constraint
    ``lam_jk + lam_kj = 0`` (weighted by the edge mass) per interface edge.
    """
    nb = dd.disc.family.nb
    I = dd.n_interfaces
    offsets = np.cumsum([0] + [s.n_dofs for s in dd.systems])
    n_u = int(offsets[-1])
    lam_index = n_u + np.arange(I * 2 * nb).reshape(I, 2, nb)
    n = n_u + 2 * I * nb
    blocks = [sp.block_diag([s.matrix0 for s in dd.systems], format="coo")] if dd.systems else []
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    trace_index = np.zeros((I, 2, nb), dtype=np.int64)
    for sysj, off in zip(dd.systems, offsets[:-1]):
        rhs[off: off + sysj.n_dofs] = sysj.rhs
        if len(sysj.iface):
            r = off + sysj.iface_rows
            trace_index[sysj.iface, sysj.side] = r
            lc = lam_index[sysj.iface, sysj.side]
            Me = dd.iface_mass[sysj.iface]
            rows.append(np.repeat(r, nb, axis=1).ravel())
            cols.append(np.tile(lc, (1, nb)).ravel())
            vals.append(-Me.ravel())
    if I:
        Me = dd.iface_mass
        jump_rows = lam_index[:, 0]
        asym_rows = lam_index[:, 1]
        for rr, (c0, c1, sign) in (
            (jump_rows, (trace_index[:, 0], trace_index[:, 1], -1.0)),
            (asym_rows, (lam_index[:, 0], lam_index[:, 1], 1.0)),
        ):
            for cc, s in ((c0, 1.0), (c1, sign)):
                rows.append(np.repeat(rr, nb, axis=1).ravel())
                cols.append(np.tile(cc, (1, nb)).ravel())
                vals.append(s * Me.ravel())
    extra = sp.coo_matrix(
        (np.concatenate(vals) if vals else np.empty(0),
         (np.concatenate(rows) if rows else np.empty(0, dtype=np.int64),
          np.concatenate(cols) if cols else np.empty(0, dtype=np.int64))),
        shape=(n, n),
    )
    K = extra.tocsc()
    if blocks:
        Kb = blocks[0]
        K = K + sp.coo_matrix((Kb.data, (Kb.row, Kb.col)), shape=(n, n)).tocsc()
    try:
        x = splu(K.tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"hybridized saddle system is singular: {exc}") from exc
    res = np.linalg.norm(K @ x - rhs)
    if not np.isfinite(res) or res > rtol * max(np.linalg.norm(rhs), 1e-300) and res > 1e-14:
        raise SolverError(f"hybridized solve residual {res:.3e} too large")
    sols = tuple(x[offsets[j]:offsets[j + 1]] for j in range(len(dd.systems)))
    lam = x[n_u:].reshape(I, 2, nb)
    ub = np.zeros((I, 2, nb))
    for sysj, xj in zip(dd.systems, sols):
        if len(sysj.iface):
            ub[sysj.iface, sysj.side] = xj[sysj.iface_rows]
    state = InterfaceState(0, ub, lam, sols)
    return HybridSolution(sols, ub, lam, to_weak_function(dd, state))


def recover_multipliers(dd, wf):
    """Multipliers implied by a single-valued solution through the local equations.

    On each interface edge side, ``Me lam = (K0_j x_j - F_j)`` restricted to the
    edge's trace rows.
    """
    sols, ub = from_weak_function(dd, wf)
    nb = dd.disc.family.nb
    lam = np.zeros((dd.n_interfaces, 2, nb))
    for sysj, x in zip(dd.systems, sols):
        if len(sysj.iface):
            r = sysj.matrix0 @ x - sysj.rhs
            lam[sysj.iface, sysj.side] = np.linalg.solve(
                dd.iface_mass[sysj.iface], r[sysj.iface_rows][..., None]
            )[..., 0]
    state = InterfaceState(0, ub, lam, sols)
    return HybridSolution(sols, ub, lam, to_weak_function(dd, state))


def energy_diagnostics(state, dd, reference):
    """Energy functional of the iteration error against ``reference``.

    Returns a dict with ``E`` (the weighted trace/multiplier/energy sum),
    ``E_alt`` (the sum of |beta e_{j,b} + mu_jk|^2 over interface sides),
    ``energy`` (the WG energy of the error) and the error components.
    """
    beta = dd.beta
    energy = 0.0
    for sysj, xs, x in zip(dd.systems, reference.solutions, state.solutions):
        e = xs - x
        energy += float(e @ (sysj.matrix0 @ e))
    eb = reference.ub - state.ub
    mu = reference.lam - state.lam
    Me = dd.iface_mass
    trace = np.einsum("isl,ilm,ism->", eb, Me, eb) if len(Me) else 0.0
    mult = np.einsum("isl,ilm,ism->", mu, Me, mu) if len(Me) else 0.0
    comb = beta * eb + mu
    alt = np.einsum("isl,ilm,ism->", comb, Me, comb) if len(Me) else 0.0
    E = beta ** 2 * trace + mult + 2.0 * beta * energy
    return {"E": float(E), "E_alt": float(alt), "energy": energy, "trace": float(trace), "mult": float(mult)}


def error_monitor(dd, u=None):
    """Energy error ||grad_w(Q_h u - u^(n))|| of an iterate, for oracle stopping."""
    disc = dd.disc
    ref = disc.exact_projection if u is None else disc.interpolate(u)

    def fn(state):
        return weak_gradient_norm(disc, ref - to_weak_function(dd, state))

    return fn
