"""Conforming 2D polygonal meshes and non-overlapping subdomain partitions."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import MeshError, PartitionError, RefinementError
from .polybasis import polygon_area_centroid

__all__ = [
    "Mesh",
    "SubdomainPartition",
    "build_uniform_triangle_mesh",
    "refine_uniform",
    "load_mesh",
    "read_mesh",
    "write_mesh",
    "partition_grid",
    "partition_per_element",
]

DEFAULT_SHAPE_BOUND = 10.0


@dataclass(frozen=True, eq=False)
class Mesh:
    """Polygonal mesh with derived edge adjacency.

    Attributes
    ----------
    vertices : ndarray (nv, 2)
    cells : tuple of int arrays, counter-clockwise vertex loops
    edges : ndarray (ne, 2)
        Vertex pairs, always stored with ``edges[e, 0] < edges[e, 1]``; this
        fixes the global orientation of every edge.
    edge_cells : ndarray (ne, 2)
        Left/right cell of each edge; the left cell is the one with the
        smaller index and the right cell is -1 on the domain boundary.
    cell_edges : tuple of int arrays
        Global edge index of local edge i = (loop[i], loop[i+1]).
    """

    vertices: np.ndarray
    cells: tuple
    edges: np.ndarray
    edge_cells: np.ndarray
    cell_edges: tuple
    shape_bound: float = DEFAULT_SHAPE_BOUND
    _cell_lines: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_cells(cls, vertices, cells, shape_bound=DEFAULT_SHAPE_BOUND, cell_lines=None):
        """Build adjacency and validate every invariant."""
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (N, 2) array")
        cells = tuple(np.asarray(c, dtype=np.int64) for c in cells)
        cell_lines = tuple(cell_lines) if cell_lines is not None else None

        def fail(msg, ci):
            line = cell_lines[ci] if cell_lines is not None else None
            raise MeshError(f"cell {ci}: {msg}", lineno=line)

        nv = len(vertices)
        edge_index = {}
        edges = []
        edge_cells = []
        edge_dir = []
        cell_edges = []
        for ci, loop in enumerate(cells):
            p = len(loop)
            if p < 3:
                fail("dangling edge (cell with fewer than 3 vertices)", ci)
            if loop.min() < 0 or loop.max() >= nv:
                fail("vertex index out of range", ci)
            if len(set(loop.tolist())) != p:
                fail("repeated vertex in cell loop", ci)
            area, _ = polygon_area_centroid(vertices[loop])
            if area <= 0.0:
                fail("vertex loop is not counter-clockwise (non-positive area)", ci)
            local = np.empty(p, dtype=np.int64)
            for i in range(p):
                a, b = int(loop[i]), int(loop[(i + 1) % p])
                key = (a, b) if a < b else (b, a)
                e = edge_index.get(key)
                if e is None:
                    e = len(edges)
                    edge_index[key] = e
                    edges.append(key)
                    edge_cells.append([ci, -1])
                    edge_dir.append(a < b)
                else:
                    if edge_cells[e][1] != -1:
                        fail(f"edge {key} shared by more than two cells", ci)
                    if edge_dir[e] == (a < b):
                        fail(f"edge {key} traversed in the same direction by two cells "
                             "(overlap or inconsistent orientation)", ci)
                    edge_cells[e][1] = ci
                local[i] = e
            cell_edges.append(local)
        used = np.zeros(nv, dtype=bool)
        for loop in cells:
            used[loop] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.flatnonzero(~used)[0])} is not used by any cell")
        mesh = cls(
            vertices=vertices,
            cells=cells,
            edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
            edge_cells=np.array(edge_cells, dtype=np.int64).reshape(-1, 2),
            cell_edges=tuple(cell_edges),
            shape_bound=float(shape_bound),
            _cell_lines=cell_lines,
        )
        ratio = mesh.shape_ratios
        bad = np.flatnonzero(ratio > shape_bound)
        if bad.size:
            fail(f"shape-regularity ratio {ratio[bad[0]]:.3g} exceeds {shape_bound}", int(bad[0]))
        for a in (mesh.vertices, mesh.edges, mesh.edge_cells):
            a.setflags(write=False)
        return mesh

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def cell_sizes(self):
        return np.array([len(c) for c in self.cells], dtype=np.int64)

    @cached_property
    def groups(self):
        """Cells grouped by vertex count: ``{p: cell index array}``."""
        sizes = self.cell_sizes
        return {int(p): np.flatnonzero(sizes == p) for p in np.unique(sizes)}

    def cell_vertex_array(self, cells):
        """Stacked vertex coordinates ``(C, p, 2)`` for same-size cells."""
        return self.vertices[np.stack([self.cells[c] for c in cells])]

    def cell_edge_array(self, cells):
        return np.stack([self.cell_edges[c] for c in cells])

    def cell_edge_signs(self, cells):
        """+1 where the local edge direction matches the global orientation."""
        loops = np.stack([self.cells[c] for c in cells])
        return np.where(loops < np.roll(loops, -1, axis=1), 1.0, -1.0)

    @cached_property
    def areas(self):
        return np.array([polygon_area_centroid(self.vertices[c])[0] for c in self.cells])

    @cached_property
    def centroids(self):
        return np.array([polygon_area_centroid(self.vertices[c])[1] for c in self.cells])

    @cached_property
    def diameters(self):
        out = np.empty(self.n_cells)
        for i, c in enumerate(self.cells):
            v = self.vertices[c]
            d = v[:, None, :] - v[None, :, :]
            out[i] = np.sqrt((d ** 2).sum(-1).max())
        return out

    @property
    def h(self):
        return float(self.diameters.max())

    @cached_property
    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_cells[:, 1] < 0)

    @cached_property
    def interior_edges(self):
        return np.flatnonzero(self.edge_cells[:, 1] >= 0)

    @cached_property
    def shape_ratios(self):
        """Diameter over inscribed-circle diameter.

        Exact for triangles; for other polygons the inscribed circle is taken
        centered at the area centroid, which under-estimates the true inradius
        and so makes the check conservative.
        """
        out = np.empty(self.n_cells)
        for i, c in enumerate(self.cells):
            v = self.vertices[c]
            w = np.roll(v, -1, axis=0)
            lens = np.hypot(*(w - v).T)
            if len(c) == 3:
                r = 2.0 * self.areas[i] / lens.sum()
            else:
                x = self.centroids[i]
                t = np.clip(((x - v) * (w - v)).sum(1) / lens ** 2, 0.0, 1.0)
                proj = v + t[:, None] * (w - v)
                r = np.hypot(*(proj - x).T).min()
            out[i] = np.inf if r <= 0 else self.diameters[i] / (2.0 * r)
        return out

    def cell_adjacency(self):
        """Sparse cell-to-cell adjacency through interior edges."""
        ec = self.edge_cells[self.interior_edges]
        n = self.n_cells
        return coo_matrix(
            (np.ones(2 * len(ec)), (np.r_[ec[:, 0], ec[:, 1]], np.r_[ec[:, 1], ec[:, 0]])),
            shape=(n, n),
        ).tocsr()


def build_uniform_triangle_mesh(n):
    """n x n squares on the unit square, each cut by its lower-left to upper-right diagonal."""
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            ll, lr, ur, ul = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((ll, lr, ur))
            cells.append((ll, ur, ul))
    return Mesh.from_cells(vertices, cells)


def refine_uniform(mesh):
    """Split every triangle into four congruent children through edge midpoints."""
    if np.any(mesh.cell_sizes != 3):
        raise RefinementError(
            "uniform refinement is only defined for triangles; load the next "
            "polygonal mesh level from file instead"
        )
    nv = len(mesh.vertices)
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])
    cells = []
    for loop, ce in zip(mesh.cells, mesh.cell_edges):
        v0, v1, v2 = (int(x) for x in loop)
        m01, m12, m20 = (nv + int(e) for e in ce)
        cells.append((v0, m01, m20))
        cells.append((m01, v1, m12))
        cells.append((m20, m12, v2))
        cells.append((m01, m12, m20))
    return Mesh.from_cells(vertices, cells, shape_bound=mesh.shape_bound)


def read_mesh(stream, shape_bound=DEFAULT_SHAPE_BOUND):
    """Parse the ``wgmesh 1`` text format; every error names its line number."""
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(stream)]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise MeshError("unexpected end of file", lineno=last + 1)
        item = lines[pos]
        pos += 1
        return item

    lineno, text = take()
    if text.split() != ["wgmesh", "1"]:
        raise MeshError("expected header 'wgmesh 1'", lineno=lineno)

    def count(keyword):
        ln, t = take()
        parts = t.split()
        if len(parts) != 2 or parts[0] != keyword:
            raise MeshError(f"expected '{keyword} <count>'", lineno=ln)
        try:
            value = int(parts[1])
        except ValueError:
            raise MeshError(f"malformed {keyword} count", lineno=ln) from None
        if value < 0:
            raise MeshError(f"negative {keyword} count", lineno=ln)
        return value

    nv = count("vertices")
    vertices = np.empty((nv, 2))
    for i in range(nv):
        ln, t = take()
        parts = t.split()
        try:
            if len(parts) != 2:
                raise ValueError
            vertices[i] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshError("malformed vertex line, expected 'x y'", lineno=ln) from None
    nc = count("cells")
    cells, cell_lines = [], []
    for _ in range(nc):
        ln, t = take()
        try:
            parts = [int(x) for x in t.split()]
        except ValueError:
            raise MeshError("malformed cell line, expected 'p i1 ... ip'", lineno=ln) from None
        if not parts or parts[0] != len(parts) - 1:
            raise MeshError("cell vertex count does not match the number of indices", lineno=ln)
        cells.append(parts[1:])
        cell_lines.append(ln)
    if pos != len(lines):
        raise MeshError("trailing content after cell block", lineno=lines[pos][0])
    return Mesh.from_cells(vertices, cells, shape_bound=shape_bound, cell_lines=cell_lines)


def load_mesh(source, shape_bound=DEFAULT_SHAPE_BOUND):
    """Load a mesh from a text stream, a path, or a string holding the file body."""
    if hasattr(source, "read"):
        return read_mesh(source, shape_bound)
    text = str(source)
    if "\n" in text:
        return read_mesh(io.StringIO(text), shape_bound)
    with open(text) as fh:
        return read_mesh(fh, shape_bound)


def write_mesh(mesh, stream):
    stream.write("wgmesh 1\n")
    stream.write(f"vertices {len(mesh.vertices)}\n")
    for x, y in mesh.vertices:
        stream.write(f"{float(x)!r} {float(y)!r}\n")
    stream.write(f"cells {mesh.n_cells}\n")
    for c in mesh.cells:
        stream.write(" ".join(str(v) for v in [len(c), *c.tolist()]) + "\n")


@dataclass(frozen=True, eq=False)
class SubdomainPartition:
    """Cell-to-subdomain map with derived interface and boundary edge sets.

    Subdomains are numbered from 0. ``interfaces[(j, k)]`` holds the edges of
    Gamma_jk for every ordered pair with a one-dimensional contact; pairs that
    touch in a single vertex have no entry.
    """

    mesh: Mesh
    n_subdomains: int
    cell_subdomain: np.ndarray
    interfaces: dict
    outer_boundary: tuple
    inner_boundary: tuple

    @classmethod
    def from_assignment(cls, mesh, cell_subdomain, n_subdomains=None):
        cs = np.asarray(cell_subdomain, dtype=np.int64)
        if cs.shape != (mesh.n_cells,):
            raise PartitionError("cell assignment must have one entry per cell")
        M = int(cs.max()) + 1 if n_subdomains is None else int(n_subdomains)
        if cs.min() < 0 or cs.max() >= M:
            raise PartitionError("subdomain index out of range")
        counts = np.bincount(cs, minlength=M)
        if np.any(counts == 0):
            raise PartitionError(f"subdomain {int(np.flatnonzero(counts == 0)[0])} is empty")

        ec = mesh.edge_cells
        left = cs[ec[:, 0]]
        right = np.where(ec[:, 1] >= 0, cs[np.maximum(ec[:, 1], 0)], -1)
        # edge-connectivity of each subdomain
        adj = mesh.cell_adjacency().tocoo()
        keep = cs[adj.row] == cs[adj.col]
        sub_adj = coo_matrix((adj.data[keep], (adj.row[keep], adj.col[keep])), shape=adj.shape)
        _, labels = connected_components(sub_adj, directed=False)
        for j in range(M):
            if len(np.unique(labels[cs == j])) != 1:
                raise PartitionError(f"subdomain {j} is not edge-connected")

        iface = np.flatnonzero((right >= 0) & (left != right))
        interfaces = {}
        for e in iface:
            j, k = int(left[e]), int(right[e])
            interfaces.setdefault((j, k), []).append(int(e))
            interfaces.setdefault((k, j), []).append(int(e))
        interfaces = {key: np.array(v, dtype=np.int64) for key, v in sorted(interfaces.items())}
        bnd = mesh.boundary_edges
        outer = tuple(np.sort(bnd[left[bnd] == j]) for j in range(M))
        inner = []
        for j in range(M):
            parts = [v for (a, _), v in interfaces.items() if a == j]
            inner.append(np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64))
        cs.setflags(write=False)
        return cls(mesh, M, cs, interfaces, outer, tuple(inner))

    def interface(self, j, k):
        return self.interfaces.get((j, k), np.empty(0, dtype=np.int64))

    def cells_of(self, j):
        return np.flatnonzero(self.cell_subdomain == j)

    @cached_property
    def interface_edges(self):
        """Interface edges with the subdomain on each side, ``(edges, (I, 2))``.

        Side 0 is the subdomain of the edge's left cell, side 1 of its right cell.
        """
        ec = self.mesh.edge_cells
        cs = self.cell_subdomain
        inner = ec[:, 1] >= 0
        right = np.where(inner, cs[np.maximum(ec[:, 1], 0)], -1)
        left = cs[ec[:, 0]]
        e = np.flatnonzero(inner & (left != right))
        return e, np.column_stack([left[e], right[e]])

    def subdomain_areas(self):
        return np.bincount(self.cell_subdomain, weights=self.mesh.areas, minlength=self.n_subdomains)


def partition_grid(mesh, m, tol=1e-12):
    """Assign cells to the m x m congruent blocks of the unit square by centroid.

    Block (bx, by) becomes subdomain ``by * m + bx``. A cell whose centroid
    sits on a block line, or whose vertices leave its block, is an error.
    """
    if int(m) != m or m < 1:
        raise ValueError("m must be a positive integer")
    m = int(m)
    cen = mesh.centroids * m
    idx = np.floor(cen).astype(np.int64)
    frac = cen - idx
    for ci in range(mesh.n_cells):
        if np.any(frac[ci] < tol) or np.any(frac[ci] > 1 - tol) or np.any(idx[ci] < 0) or np.any(idx[ci] >= m):
            raise PartitionError(f"cell {ci}: centroid not strictly inside one block of the {m}x{m} grid")
        v = mesh.vertices[mesh.cells[ci]] * m
        if np.any(v < idx[ci] - tol) or np.any(v > idx[ci] + 1 + tol):
            raise PartitionError(f"cell {ci} straddles a block boundary of the {m}x{m} grid")
    return SubdomainPartition.from_assignment(mesh, idx[:, 1] * m + idx[:, 0], m * m)


def partition_per_element(mesh):
    """Every cell is its own subdomain."""
    return SubdomainPartition.from_assignment(mesh, np.arange(mesh.n_cells), mesh.n_cells)
