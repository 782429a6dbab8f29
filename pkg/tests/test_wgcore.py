import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wgdd.exceptions import ModelError
from wgdd.mesh import build_uniform_triangle_mesh
from wgdd.polybasis import monomial_exponents, scaled_monomials
from wgdd.problems import Problem, get_problem
from wgdd.wgcore import (
    Discretization,
    ElementFamily,
    WeakFunction,
    cell_geometry,
    compute_local_operators,
    local_stiffness,
    project_Q0,
    project_Qb,
    stabilizer_matrix,
    weak_gradient,
    weak_gradient_matrix,
)

from oracles import PENTAGON, REF_TRIANGLE, duffy_rule, edge_rule, polygon_rule

FAMILIES = [ElementFamily("standard", k) for k in (1, 2, 3, 4)] + [
    ElementFamily("superconvergent", k) for k in (1, 2, 3)
]
SQUARE = np.array([[0.1, 0.2], [0.6, 0.2], [0.6, 0.7], [0.1, 0.7]])
CELLS = [REF_TRIANGLE, np.array([[0.2, 0.1], [0.9, 0.3], [0.4, 0.8]]), SQUARE, PENTAGON / 3]


def _poly(coef, k):
    ex = monomial_exponents(k)

    def p(xy):
        return sum(c * xy[..., 0] ** a * xy[..., 1] ** b for c, (a, b) in zip(coef, ex))

    def grad(xy):
        gx = sum(c * a * xy[..., 0] ** max(a - 1, 0) * xy[..., 1] ** b for c, (a, b) in zip(coef, ex))
        gy = sum(c * b * xy[..., 0] ** a * xy[..., 1] ** max(b - 1, 0) for c, (a, b) in zip(coef, ex))
        return np.stack([gx, gy], axis=-1)

    return p, grad


def _interpolate_local(fn, v, fam):
    """{Q_0 p, Q_b p} on one cell in local edge orientation."""
    parts = [project_Q0(fn, v, fam.degree)]
    for i in range(len(v)):
        parts.append(project_Qb(fn, v[i], v[(i + 1) % len(v)], fam.trace_degree))
    return np.concatenate(parts)


def _eval_gradient(coef, v, fam, x):
    _, cen, diam = cell_geometry(v)
    return np.einsum("i,qid->qd", coef, fam.gradient_space(cen, diam).eval(x))


def test_bottom_edge_indicator_example():
    fam = ElementFamily("standard", 1)
    G = weak_gradient_matrix(REF_TRIANGLE, fam)
    v = np.zeros(fam.nloc(3))
    v[fam.n0] = 1.0  # local edge 0 runs (0,0) -> (1,0)
    assert np.allclose(G @ v, [0.0, -2.0], atol=1e-13)
    direct = weak_gradient(REF_TRIANGLE, fam, lambda x: 0 * x[..., 0],
                           lambda x: np.where(np.abs(x[..., 1]) < 1e-14, 1.0, 0.0))
    assert np.allclose(direct, [0.0, -2.0], atol=1e-13)


@pytest.mark.parametrize("fam", FAMILIES, ids=str)
def test_constants_have_zero_weak_gradient(fam):
    for v in CELLS:
        if fam.superconvergent and len(v) != 3:
            continue
        G = weak_gradient_matrix(v, fam)
        c = _interpolate_local(lambda x: np.full(x.shape[:-1], 3.0), v, fam)
        assert np.allclose(G @ c, 0.0, atol=1e-12 * np.abs(G).sum(axis=1).max() * 3.0)


@settings(max_examples=100, deadline=None)
@given(
    fam_index=st.integers(0, len(FAMILIES) - 1),
    cell_index=st.integers(0, len(CELLS) - 1),
    coef=st.lists(st.floats(-3, 3, allow_nan=False), min_size=15, max_size=15),
)
def test_weak_gradient_polynomial_exactness(fam_index, cell_index, coef):
    fam = FAMILIES[fam_index]
    v = CELLS[cell_index]
    if fam.superconvergent and len(v) != 3:
        v = CELLS[1]
    k = fam.degree
    p, grad = _poly(coef[: fam.n0], k)
    G = weak_gradient_matrix(v, fam)
    g = G @ _interpolate_local(p, v, fam)
    x, _ = polygon_rule(v, 4)
    scale = 1.0 + np.abs(grad(x)).max()
    assert np.allclose(_eval_gradient(g, v, fam, x), grad(x), atol=1e-9 * scale)


@pytest.mark.parametrize("fam", FAMILIES, ids=str)
def test_weak_gradient_matches_quadrature_oracle(fam):
    """Random local vector against an independent evaluation of the defining identity."""
    rng = np.random.default_rng(1)
    v = CELLS[1]
    p = len(v)
    coef = rng.standard_normal(fam.nloc(p))
    G = weak_gradient_matrix(v, fam)
    _, cen, diam = cell_geometry(v)
    space = fam.gradient_space(cen, diam)
    x, w = duffy_rule(v, 14)
    wv = space.eval(x)
    Mg = np.einsum("q,qid,qjd->ij", w, wv, wv)
    v0 = scaled_monomials(x, cen, diam, fam.degree) @ coef[: fam.n0]
    rhs = -np.einsum("q,qi,q->i", w, space.div(x), v0)
    for i in range(p):
        a, b = v[i], v[(i + 1) % p]
        xe, we, s = edge_rule(a, b, 14)
        d = b - a
        n = np.array([d[1], -d[0]]) / np.hypot(*d)
        vb = ((s - 0.5)[:, None] ** np.arange(fam.nb)) @ coef[fam.n0 + i * fam.nb: fam.n0 + (i + 1) * fam.nb]
        rhs += np.einsum("q,qi,q->i", we, space.eval(xe) @ n, vb)
    assert np.allclose(G @ coef, np.linalg.solve(Mg, rhs), atol=1e-12 * (1 + np.abs(rhs).max()))


@pytest.mark.parametrize("fam", [f for f in FAMILIES if f.stabilized], ids=str)
def test_stabilizer_psd_with_trace_kernel(fam):
    for v in CELLS:
        S = stabilizer_matrix(v, fam)
        assert np.allclose(S, S.T)
        ev = np.linalg.eigvalsh(S)
        assert ev.min() > -1e-12 * ev.max()
        # kernel = {v_b = Q_b v0}: exactly n0-dimensional
        assert (ev < 1e-10 * ev.max()).sum() == fam.n0
        # and Q_h p lies in it
        rng = np.random.default_rng(2)
        pfun, _ = _poly(rng.standard_normal(fam.n0), fam.degree)
        q = _interpolate_local(pfun, v, fam)
        assert q @ S @ q <= 1e-12 * (q @ q) * ev.max()


def test_superconvergent_has_no_stabilizer():
    fam = ElementFamily("superconvergent", 2)
    assert np.all(stabilizer_matrix(REF_TRIANGLE, fam) == 0)


@pytest.mark.parametrize("fam", FAMILIES, ids=str)
def test_energy_kernel_is_constants(fam):
    """(grad_w v, grad_w v) + s(v, v) and (grad v0, grad v0) + s(v, v) vanish together."""
    v = CELLS[1]
    ops = compute_local_operators(v[None], fam)
    A = ops.A[0]  # a = 1, c = 0
    B = ops.S[0].copy()
    B[: fam.n0, : fam.n0] += ops.K0[0]
    for M in (A, B):
        ev, vec = np.linalg.eigh(M)
        null = vec[:, ev < 1e-10 * ev.max()]
        if fam.superconvergent and M is B:
            continue  # without a stabilizer the v0-seminorm does not see v_b
        assert null.shape[1] == 1
    const = _interpolate_local(lambda x: np.ones(x.shape[:-1]), v, fam)
    assert const @ A @ const < 1e-12


@pytest.mark.parametrize("fam", [f for f in FAMILIES if f.stabilized], ids=str)
def test_norm_equivalence_ratio_stable_under_refinement(fam):
    rng = np.random.default_rng(3)
    parent = CELLS[1]
    child = 0.5 * (parent + parent[0])
    patterns = rng.standard_normal((20, fam.nloc(3)))
    ratios = []
    for v in (parent, child):
        ops = compute_local_operators(v[None], fam)
        A, S, K0 = ops.A[0], ops.S[0], ops.K0[0]
        num = np.einsum("pi,ij,pj->p", patterns, A, patterns)
        B = S.copy()
        B[: fam.n0, : fam.n0] += K0
        den = np.einsum("pi,ij,pj->p", patterns, B, patterns)
        ratios.append(num / den)
    for r in ratios:
        assert np.all((r > 1e-2) & (r < 1e2))
    assert np.allclose(ratios[0], ratios[1], rtol=1e-8)  # similar cells, scaled basis


def test_local_quadratic_form_matches_oracle():
    fam = ElementFamily("standard", 2)
    prob = get_problem("test1")
    v = CELLS[1]
    p = 3
    rng = np.random.default_rng(4)
    x = rng.standard_normal(fam.nloc(p))
    A = local_stiffness(v, fam, a=prob.a, c=prob.c)
    G = weak_gradient_matrix(v, fam)
    _, cen, diam = cell_geometry(v)
    xq, wq = duffy_rule(v, 14)
    g = _eval_gradient(G @ x, v, fam, xq)
    v0 = scaled_monomials(xq, cen, diam, fam.degree) @ x[: fam.n0]
    form = np.sum(wq * prob.a(xq) * (g * g).sum(-1)) + np.sum(wq * prob.c(xq) * v0 ** 2)
    for i in range(p):
        a, b = v[i], v[(i + 1) % p]
        xe, we, s = edge_rule(a, b, 14)
        psi = (s - 0.5)[:, None] ** np.arange(fam.nb)
        trace = scaled_monomials(xe, cen, diam, fam.degree) @ x[: fam.n0]
        qb = psi @ np.linalg.lstsq(np.sqrt(we)[:, None] * psi, np.sqrt(we) * trace, rcond=None)[0]
        vb = psi @ x[fam.n0 + i * fam.nb: fam.n0 + (i + 1) * fam.nb]
        form += np.sum(we * (qb - vb) ** 2) / diam
    assert x @ A @ x == pytest.approx(form, rel=1e-11)


def test_q0_residual_orthogonal():
    k = 3
    f = lambda x: np.exp(x[..., 0]) * np.cos(2 * x[..., 1])
    for v in CELLS:
        c = project_Q0(f, v, k, quad_degree=20)
        _, cen, diam = cell_geometry(v)
        xq, wq = polygon_rule(v, 16)
        phi = scaled_monomials(xq, cen, diam, k)
        resid = f(xq) - phi @ c
        assert np.allclose(phi.T @ (wq * resid), 0.0, atol=1e-11)


def test_q0_sine_matches_least_squares_oracle():
    v = np.array([[0.1, 0.1], [0.3, 0.15], [0.2, 0.3]])
    f = lambda x: np.sin(np.pi * x[..., 0])
    c = project_Q0(f, v, 2, quad_degree=16)
    _, cen, diam = cell_geometry(v)
    xq, wq = duffy_rule(v, 20)
    phi = scaled_monomials(xq, cen, diam, 2)
    ls = np.linalg.lstsq(np.sqrt(wq)[:, None] * phi, np.sqrt(wq) * f(xq), rcond=None)[0]
    assert np.allclose(c, ls, atol=1e-10)


def test_qb_of_x_squared():
    # x^2 on [0,1] x {0} projects to x - 1/6 = t + 1/3 with t = x - 1/2
    c = project_Qb(lambda x: x[..., 0] ** 2, [0, 0], [1, 0], 1)
    assert np.allclose(c, [1 / 3, 1.0], atol=1e-14)


def test_coefficient_bounds_checked():
    fam = ElementFamily("standard", 1)
    with pytest.raises(ModelError):
        compute_local_operators(REF_TRIANGLE[None], fam, a=lambda x: -np.ones(x.shape[:-1]))
    with pytest.raises(ModelError):
        compute_local_operators(REF_TRIANGLE[None], fam, c=lambda x: -np.ones(x.shape[:-1]))


def test_invalid_family():
    with pytest.raises(ValueError):
        ElementFamily("mixed", 1)
    with pytest.raises(ValueError):
        ElementFamily("standard", 0)
    assert ElementFamily("superconvergent", 2).ng == 15
    assert ElementFamily("standard", 3).ng == 12


@pytest.mark.parametrize("fam", [ElementFamily("standard", 2), ElementFamily("superconvergent", 1)], ids=str)
def test_global_interpolation_has_exact_weak_gradient(fam):
    """Shared edges use one orientation, so Q_h of a global polynomial is exact everywhere."""
    m = build_uniform_triangle_mesh(3)
    u = lambda x: 1 + 2 * x[..., 0] - x[..., 1] + 0.5 * x[..., 0] * x[..., 1]
    prob = Problem("p", lambda x: np.ones(x.shape[:-1]), lambda x: np.zeros(x.shape[:-1]),
                   lambda x: np.zeros(x.shape[:-1]), u)
    disc = Discretization(m, fam, prob)
    wf = disc.interpolate(u)
    for ops in disc.groups.values():
        g = np.einsum("cgi,ci->cg", ops.G, wf.local(ops.cells))
        verts = m.cell_vertex_array(ops.cells)
        cen = verts.mean(axis=1)
        space = fam.gradient_space(ops.centers[:, None, :], ops.diameters[:, None])
        got = np.einsum("cg,cqgd->cqd", g, space.eval(cen[:, None, :]))[:, 0]
        want = np.stack([2 + 0.5 * cen[:, 1], -1 + 0.5 * cen[:, 0]], axis=-1)
        assert np.allclose(got, want, atol=1e-12)


def test_weak_function_two_sided_traces():
    m = build_uniform_triangle_mesh(1)
    fam = ElementFamily("standard", 1)
    v0 = np.zeros((2, fam.n0))
    vb = np.arange(m.n_edges, dtype=float)[:, None]
    right = vb.copy()
    shared = m.interior_edges[0]
    right[shared] = -7.0
    wf = WeakFunction(m, fam, v0, vb, right)
    rcell = m.edge_cells[shared, 1]
    lcell = m.edge_cells[shared, 0]
    loc_r = wf.local([rcell])[0, fam.n0:]
    loc_l = wf.local([lcell])[0, fam.n0:]
    assert -7.0 in loc_r and -7.0 not in loc_l
    d = wf - WeakFunction(m, fam, v0, vb)
    assert d.vb_right[shared, 0] == -7.0 - shared
    assert np.all((2 * wf).vb_right == 2 * right)
    with pytest.raises(ValueError):
        WeakFunction(m, fam, v0[:1], vb)
