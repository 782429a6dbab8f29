"""Polynomial spaces, Raviart-Thomas spaces and quadrature on polygons.

Every evaluator here broadcasts over leading axes so that a whole batch of
congruent-topology cells (same vertex count) is processed with one call:
points have shape ``(..., 2)``, centers ``(..., 2)`` and diameters ``(...)``
must broadcast against the point batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .exceptions import MeshError, QuadratureError

__all__ = [
    "QuadratureRule",
    "triangle_rule",
    "gauss_rule",
    "cell_quadrature",
    "batch_cell_quadrature",
    "edge_quadrature",
    "polygon_area_centroid",
    "monomial_exponents",
    "scaled_monomials",
    "scaled_monomial_gradients",
    "CellSpace",
    "EdgeSpace",
    "VectorPolySpace",
    "RTSpace",
    "gram_matrix",
]


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values):
        """Integrate values sampled at ``points`` (leading axis = points)."""
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


def _npoints(degree):
    return max(1, (int(degree) + 2) // 2)


@lru_cache(maxsize=None)
def gauss_rule(degree):
    """Gauss-Legendre rule on [0, 1] exact for polynomials of ``degree``."""
    if degree < 0:
        raise QuadratureError("exactness degree must be non-negative")
    x, w = roots_legendre(_npoints(degree))
    s = 0.5 * (x + 1.0)
    s.setflags(write=False)
    w = 0.5 * w
    w.setflags(write=False)
    return s, w


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Collapsed Gauss rule on the triangle (0,0), (1,0), (0,1).

    Conical product of Gauss-Legendre and Gauss-Jacobi(1, 0) points; all
    weights are positive and the rule is exact for total degree ``degree``.
    Weights sum to 1/2.
    """
    if degree < 0:
        raise QuadratureError("exactness degree must be non-negative")
    n = _npoints(degree)
    u, wu = roots_legendre(n)
    u = 0.5 * (u + 1.0)
    wu = 0.5 * wu
    t, wt = roots_jacobi(n, 1.0, 0.0)
    v = 0.5 * (t + 1.0)
    wv = 0.25 * wt
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([(uu * (1.0 - vv)).ravel(), vv.ravel()])
    wts = np.outer(wu, wv).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def polygon_area_centroid(vertices):
    """Signed area and area centroid of polygons by the shoelace formula.

    ``vertices`` has shape ``(..., p, 2)``; returns ``(area (...), centroid (..., 2))``.
    """
    v = np.asarray(vertices, dtype=float)
    x, y = v[..., 0], v[..., 1]
    xn, yn = np.roll(x, -1, axis=-1), np.roll(y, -1, axis=-1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum(axis=-1)
    cx = ((x + xn) * cross).sum(axis=-1) / (6.0 * area)
    cy = ((y + yn) * cross).sum(axis=-1) / (6.0 * area)
    return area, np.stack([cx, cy], axis=-1)


def _map_triangles(a, b, c, degree):
    """Map the reference rule onto triangles with vertex arrays ``(..., 2)``."""
    ref, wref = triangle_rule(degree)
    e1 = b - a
    e2 = c - a
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    pts = a[..., None, :] + ref[:, 0, None] * e1[..., None, :] + ref[:, 1, None] * e2[..., None, :]
    wts = det[..., None] * wref
    return pts, wts, det


def batch_cell_quadrature(vertices, degree):
    """Quadrature points and weights for a batch of polygons.

    ``vertices`` is ``(C, p, 2)`` with counter-clockwise loops. Triangles use
    the reference rule directly; other polygons are fan-triangulated from the
    area centroid. Returns points ``(C, Q, 2)`` and weights ``(C, Q)``.
    """
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 3:
        raise ValueError("vertices must have shape (C, p, 2)")
    p = v.shape[1]
    if p == 3:
        pts, wts, det = _map_triangles(v[:, 0], v[:, 1], v[:, 2], degree)
        if np.any(det <= 0.0):
            raise QuadratureError("degenerate or clockwise triangle")
        return pts, wts
    _, cen = polygon_area_centroid(v)
    a = np.broadcast_to(cen[:, None, :], v.shape)
    b = v
    c = np.roll(v, -1, axis=1)
    pts, wts, det = _map_triangles(a, b, c, degree)
    if np.any(det <= 0.0):
        raise QuadratureError("zero-area or inverted sub-triangle in fan triangulation")
    C = v.shape[0]
    return pts.reshape(C, -1, 2), wts.reshape(C, -1)


def cell_quadrature(vertices, degree):
    """:class:`QuadratureRule` for a single polygon given its CCW vertex loop."""
    pts, wts = batch_cell_quadrature(np.asarray(vertices, dtype=float)[None], degree)
    return QuadratureRule(pts[0], wts[0], int(degree))


def edge_quadrature(p0, p1, degree):
    """Gauss-Legendre rule on the segment ``p0 -> p1`` (weights sum to its length)."""
    s, w = gauss_rule(degree)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    length = np.hypot(*(p1 - p0))
    pts = p0 + s[:, None] * (p1 - p0)
    return QuadratureRule(pts, w * length, int(degree))


@lru_cache(maxsize=None)
def monomial_exponents(k):
    """Exponent pairs of the 2D monomials of total degree <= k, graded order."""
    return tuple((d - j, j) for d in range(k + 1) for j in range(d + 1))


def _powers(z, k):
    out = np.ones(z.shape + (k + 1,))
    for i in range(1, k + 1):
        out[..., i] = out[..., i - 1] * z
    return out


def scaled_monomials(xy, center, h, k):
    """Values of ((x-xc)/h)^a ((y-yc)/h)^b for a+b <= k, shape (..., n)."""
    xy = np.asarray(xy, dtype=float)
    h = np.asarray(h, dtype=float)
    z = (xy - center) / h[..., None]
    px = _powers(z[..., 0], k)
    py = _powers(z[..., 1], k)
    ex = monomial_exponents(k)
    a = [e[0] for e in ex]
    b = [e[1] for e in ex]
    return px[..., a] * py[..., b]


def scaled_monomial_gradients(xy, center, h, k):
    """Gradients of :func:`scaled_monomials`, shape (..., n, 2)."""
    xy = np.asarray(xy, dtype=float)
    h = np.asarray(h, dtype=float)
    z = (xy - center) / h[..., None]
    px = _powers(z[..., 0], k)
    py = _powers(z[..., 1], k)
    ex = monomial_exponents(k)
    a = np.array([e[0] for e in ex])
    b = np.array([e[1] for e in ex])
    am1 = np.maximum(a - 1, 0)
    bm1 = np.maximum(b - 1, 0)
    hx = h[..., None]
    gx = a * px[..., am1] * py[..., b] / hx
    gy = b * px[..., a] * py[..., bm1] / hx
    return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True)
class CellSpace:
    """P_k on one cell (or a batch of cells) in centered, scaled monomials."""

    center: np.ndarray
    h: np.ndarray
    degree: int

    @property
    def dim(self):
        return (self.degree + 1) * (self.degree + 2) // 2

    def eval(self, xy):
        return scaled_monomials(xy, self.center, self.h, self.degree)

    def grad(self, xy):
        return scaled_monomial_gradients(xy, self.center, self.h, self.degree)


@dataclass(frozen=True)
class EdgeSpace:
    """P_r on an edge in powers of t = (x - mid).tau / |e|, t in [-1/2, 1/2].

    ``start``/``end`` fix the orientation of ``tau``; both cells sharing an
    edge must use the same (global) orientation so the basis is single-valued.
    """

    start: np.ndarray
    end: np.ndarray
    degree: int

    @property
    def dim(self):
        return self.degree + 1

    @property
    def length(self):
        d = np.asarray(self.end) - np.asarray(self.start)
        return np.hypot(d[..., 0], d[..., 1])

    def param(self, xy):
        start = np.asarray(self.start, dtype=float)
        d = np.asarray(self.end, dtype=float) - start
        mid = start + 0.5 * d
        ll = (d * d).sum(axis=-1)
        return ((np.asarray(xy) - mid) * d).sum(axis=-1) / ll

    def eval(self, xy):
        return _powers(self.param(xy), self.degree)


@dataclass(frozen=True)
class VectorPolySpace:
    """[P_r]^2 ordered as all (m, 0) followed by all (0, m)."""

    center: np.ndarray
    h: np.ndarray
    degree: int

    @property
    def dim(self):
        return (self.degree + 1) * (self.degree + 2)

    def eval(self, xy):
        m = scaled_monomials(xy, self.center, self.h, self.degree)
        z = np.zeros_like(m)
        return np.concatenate(
            [np.stack([m, z], axis=-1), np.stack([z, m], axis=-1)], axis=-2
        )

    def div(self, xy):
        g = scaled_monomial_gradients(xy, self.center, self.h, self.degree)
        return np.concatenate([g[..., 0], g[..., 1]], axis=-1)


@dataclass(frozen=True)
class RTSpace:
    """RT_k = [P_k]^2 + x P_k, spanned by [P_k]^2 and z * m for homogeneous m.

    ``z`` is the scaled local coordinate, which spans the same space as x
    because the constant shift lands in [P_k]^2.
    """

    center: np.ndarray
    h: np.ndarray
    degree: int

    @property
    def dim(self):
        return (self.degree + 1) * (self.degree + 3)

    def _homogeneous(self, xy):
        k = self.degree
        m = scaled_monomials(xy, self.center, self.h, k)
        return m[..., k * (k + 1) // 2:]

    def eval(self, xy):
        vec = VectorPolySpace(self.center, self.h, self.degree).eval(xy)
        h = np.asarray(self.h, dtype=float)
        z = (np.asarray(xy, dtype=float) - self.center) / h[..., None]
        mh = self._homogeneous(xy)
        extra = mh[..., :, None] * z[..., None, :]
        return np.concatenate([vec, extra], axis=-2)

    def div(self, xy):
        k = self.degree
        d0 = VectorPolySpace(self.center, self.h, k).div(xy)
        h = np.asarray(self.h, dtype=float)
        extra = (k + 2) * self._homogeneous(xy) / h[..., None]
        return np.concatenate([d0, extra], axis=-1)


def gram_matrix(space, rule, weight=None):
    """L2 Gram matrix of ``space`` under ``rule`` (optionally weighted).

    Raises :class:`MeshError` when the matrix is numerically singular, which
    signals a degenerate cell or an under-resolving rule.
    """
    vals = space.eval(rule.points)
    w = rule.weights if weight is None else rule.weights * weight
    if vals.ndim == 2:
        g = np.einsum("q,qi,qj->ij", w, vals, vals)
    else:
        g = np.einsum("q,qid,qjd->ij", w, vals, vals)
    g = 0.5 * (g + g.T)
    d = np.sqrt(np.diag(g))
    if not np.all(d > 0):
        raise MeshError("numerically singular Gram matrix")
    # judge singularity after diagonal scaling; high-degree monomials are
    # badly scaled but not dependent
    scaled = g / np.outer(d, d)
    try:
        np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError as exc:
        raise MeshError("numerically singular Gram matrix") from exc
    if np.linalg.cond(scaled) > 1e12:
        raise MeshError("numerically singular Gram matrix")
    return g
