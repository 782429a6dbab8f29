"""Monolithic weak Galerkin reference solver with Dirichlet elimination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import SolverError
from .wgcore import Discretization, WeakFunction

__all__ = ["DofMap", "GlobalSystem", "assemble", "solve", "scatter_symmetric", "factorize"]


class DofMap:
    """Global numbering: all v0 coefficients cell by cell, then all edge traces."""

    def __init__(self, mesh, family):
        self.mesh = mesh
        self.family = family
        self.n_cell_dofs = mesh.n_cells * family.n0
        self.n_total = self.n_cell_dofs + mesh.n_edges * family.nb
        fixed = np.zeros(self.n_total, dtype=bool)
        for e in mesh.boundary_edges:
            fixed[self.edge_dofs(e)] = True
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)

    @property
    def n_free(self):
        return len(self.free)

    def edge_dofs(self, e):
        nb = self.family.nb
        start = self.n_cell_dofs + e * nb
        return np.arange(start, start + nb)

    def cell_dofs(self, cells):
        fam = self.family
        cells = np.asarray(cells)
        v0 = cells[:, None] * fam.n0 + np.arange(fam.n0)
        ce = self.mesh.cell_edge_array(cells)
        vb = self.n_cell_dofs + ce[..., None] * fam.nb + np.arange(fam.nb)
        return np.concatenate([v0, vb.reshape(len(cells), -1)], axis=1)

    def to_vector(self, wf):
        x = np.empty(self.n_total)
        x[: self.n_cell_dofs] = wf.v0.ravel()
        x[self.n_cell_dofs:] = wf.vb.ravel()
        return x

    def to_function(self, x):
        fam = self.family
        return WeakFunction(
            self.mesh, fam,
            x[: self.n_cell_dofs].reshape(-1, fam.n0),
            x[self.n_cell_dofs:].reshape(-1, fam.nb),
        )


def scatter_symmetric(blocks, fixed, fixed_values):
    """Assemble local symmetric blocks with elimination of fixed dofs.

    ``blocks`` yields ``(A (C, n, n), rhs (C, n), idx (C, n))`` with indices
    in a numbering of length ``len(fixed)``. Only upper-triangle
    contributions are accumulated, and the matrix is mirrored afterwards, so
    the result is exactly symmetric. Returns ``(matrix, rhs, lifted)`` over
    the free dofs, where ``lifted`` is the Dirichlet contribution already
    subtracted from ``rhs``.
    """
    fixed = np.asarray(fixed, dtype=bool)
    n = int((~fixed).sum())
    pos = np.full(len(fixed), -1, dtype=np.int64)
    pos[~fixed] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    lifted = np.zeros(n)
    for A, b, idx in blocks:
        fi = pos[idx]
        free = fi >= 0
        I = np.broadcast_to(fi[:, :, None], A.shape)
        J = np.broadcast_to(fi[:, None, :], A.shape)
        keep = (I >= 0) & (J >= 0) & (I <= J)
        rows.append(I[keep])
        cols.append(J[keep])
        vals.append(A[keep])
        rhs += np.bincount(fi[free], weights=b[free], minlength=n)
        xd = np.where(free, 0.0, fixed_values[idx])
        if np.any(xd):
            contrib = np.einsum("cij,cj->ci", A, xd)
            lifted += np.bincount(fi[free], weights=contrib[free], minlength=n)
    rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.empty(0)
    U = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    U.sum_duplicates()
    K = (U + sp.triu(U, k=1).T).tocsc()
    return K, rhs - lifted, lifted


class Factorization:
    """Sparse LU of an SPD system with a residual check on every solve."""

    def __init__(self, matrix):
        self.matrix = sp.csc_matrix(matrix)
        self.n = self.matrix.shape[0]
        if self.n == 0:
            self._lu = None
            return
        try:
            # SPD: symmetric ordering on A + A^T and diagonal pivots only
            self._lu = splu(
                self.matrix, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        d = self.matrix.diagonal()
        if np.any(d <= 0):
            raise SolverError("matrix has a non-positive diagonal entry; it is not SPD")

    def solve(self, rhs, rtol=1e-10):
        if self.n == 0:
            return np.zeros(0)
        x = self._lu.solve(rhs)
        r = np.linalg.norm(self.matrix @ x - rhs)
        nb = np.linalg.norm(rhs)
        if not np.all(np.isfinite(x)) or r > rtol * max(nb, np.finfo(float).tiny):
            if nb == 0.0 and r == 0.0:
                return x
            raise SolverError(f"back-solve residual {r:.3e} exceeds {rtol:g} * |rhs| = {rtol * nb:.3e}")
        return x


def factorize(matrix):
    return Factorization(matrix)


@dataclass(frozen=True, eq=False)
class GlobalSystem:
    discretization: Discretization
    dofmap: DofMap
    matrix: sp.csc_matrix
    rhs: np.ndarray
    lifted: np.ndarray
    fixed_values: np.ndarray


def assemble(discretization):
    """Assemble the monolithic system over the free dofs with Q_b g on the boundary."""
    disc = discretization
    mesh, fam = disc.mesh, disc.family
    dm = DofMap(mesh, fam)
    fixed_values = np.zeros(dm.n_total)
    bnd = mesh.boundary_edges
    if len(bnd):
        idx = dm.n_cell_dofs + bnd[:, None] * fam.nb + np.arange(fam.nb)
        fixed_values[idx] = disc.dirichlet[bnd]

    def blocks():
        for ops in disc.groups.values():
            b = np.zeros(ops.A.shape[:2])
            b[:, : fam.n0] = ops.b
            yield ops.A, b, dm.cell_dofs(ops.cells)

    K, rhs, lifted = scatter_symmetric(blocks(), dm.fixed, fixed_values)
    return GlobalSystem(disc, dm, K, rhs, lifted, fixed_values)


def solve(system, rtol=1e-10):
    """Sparse direct solve; raises :class:`SolverError` on failure."""
    x_free = Factorization(system.matrix).solve(system.rhs, rtol=rtol)
    x = system.fixed_values.copy()
    x[system.dofmap.free] = x_free
    return system.dofmap.to_function(x)
