import numpy as np
import pytest

from wgdd.assembly import assemble, solve
from wgdd.ddsolver import (
    InterfaceState,
    StopRule,
    build_subdomain_systems,
    default_beta,
    energy_diagnostics,
    error_monitor,
    initial_state,
    interface_residual,
    iterate_once,
    recover_multipliers,
    run,
    solve_hybrid_direct,
    to_weak_function,
)
from wgdd.errors import energy_error
from wgdd.exceptions import DiagnosticError
from wgdd.mesh import SubdomainPartition, build_uniform_triangle_mesh, load_mesh, partition_grid, partition_per_element
from wgdd.problems import Problem, get_problem
from wgdd.wgcore import Discretization, ElementFamily, local_load, local_stiffness

from oracles import edge_rule

P1 = ElementFamily("standard", 1)


def _setup(n=4, m=2, fam=P1, test="test1", beta=8.0):
    mesh = build_uniform_triangle_mesh(n)
    disc = Discretization(mesh, fam, get_problem(test))
    part = partition_grid(mesh, m)
    return disc, build_subdomain_systems(disc, part, beta)


def _max_diff(a, b):
    right_a = a.vb if a.vb_right is None else a.vb_right
    right_b = b.vb if b.vb_right is None else b.vb_right
    return max(np.abs(a.v0 - b.v0).max(), np.abs(a.vb - b.vb).max(), np.abs(right_a - right_b).max())


def _zero_problem():
    z = lambda x: np.zeros(x.shape[:-1])
    return Problem("zero", lambda x: np.ones(x.shape[:-1]), z, z, z, z)


@pytest.mark.parametrize("fam", [ElementFamily("standard", 1), ElementFamily("standard", 3),
                                 ElementFamily("superconvergent", 2)], ids=str)
def test_hybrid_direct_matches_monolithic(fam):
    disc, dd = _setup(fam=fam, beta=default_beta(fam))
    ref = solve(assemble(disc))
    hy = solve_hybrid_direct(dd)
    assert _max_diff(hy.function, ref) <= 1e-8
    assert np.abs(hy.lam[:, 0] + hy.lam[:, 1]).max() < 1e-10


def test_single_subdomain_is_monolithic():
    disc, dd = _setup(m=1)
    assert dd.n_interfaces == 0
    ref = solve(assemble(disc))
    assert _max_diff(solve_hybrid_direct(dd).function, ref) < 1e-12
    state, log = run(initial_state(dd), dd, StopRule("residual", 1e-10, 10))
    assert log.iterations == 1 and log.converged and log.residuals == [0.0]
    assert _max_diff(to_weak_function(dd, state), ref) < 1e-12


def test_two_cells_two_subdomains_constraints():
    mesh = load_mesh("wgmesh 1\nvertices 4\n0 0\n1 0\n1 1\n0 1\ncells 2\n3 0 1 2\n3 0 2 3\n")
    disc = Discretization(mesh, P1, get_problem("test1"))
    dd = build_subdomain_systems(disc, partition_per_element(mesh), 8.0)
    hy = solve_hybrid_direct(dd)
    assert np.abs(hy.ub[:, 0] - hy.ub[:, 1]).max() < 1e-12
    assert np.abs(hy.lam[:, 0] + hy.lam[:, 1]).max() < 1e-12


def test_per_element_partition_matches_monolithic():
    mesh = build_uniform_triangle_mesh(3)
    disc = Discretization(mesh, ElementFamily("standard", 2), get_problem("test1"))
    dd = build_subdomain_systems(disc, partition_per_element(mesh), 8.0)
    assert _max_diff(solve_hybrid_direct(dd).function, solve(assemble(disc))) < 1e-9


def test_per_element_interior_triangle_system():
    mesh = build_uniform_triangle_mesh(4)
    disc = Discretization(mesh, P1, get_problem("test1"))
    dd = build_subdomain_systems(disc, partition_per_element(mesh), 8.0)
    interior = [s for s in dd.systems if len(s.iface) == 3]
    assert interior
    K = interior[0].matrix.toarray()
    assert K.shape == (6, 6)  # dim P_1 + 3 dim P_0
    assert np.all(np.linalg.eigvalsh(K) > 0)


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_nonpositive_beta_rejected(beta):
    mesh = build_uniform_triangle_mesh(2)
    disc = Discretization(mesh, P1, get_problem("test2"))
    with pytest.raises(ValueError):
        build_subdomain_systems(disc, partition_grid(mesh, 2), beta)


def test_subdomain_matrix_is_spd_without_reaction():
    disc, dd = _setup(test="test2")
    for s in dd.systems:
        assert np.all(np.linalg.eigvalsh(s.matrix.toarray()) > 0)


def _dense_subdomain(disc, part, j, beta, ub, lam, iface_edges):
    """Local beta-augmented system of subdomain j built cell by cell, solved densely."""
    mesh, fam, prob = disc.mesh, disc.family, disc.problem
    cells = np.flatnonzero(part.cell_subdomain == j)
    edges = sorted({int(e) for c in cells for e in mesh.cell_edges[c]})
    cpos = {int(c): i for i, c in enumerate(cells)}
    epos = {e: i for i, e in enumerate(edges)}
    n = len(cells) * fam.n0 + len(edges) * fam.nb

    def edofs(e):
        s = len(cells) * fam.n0 + epos[e] * fam.nb
        return list(range(s, s + fam.nb))

    K = np.zeros((n, n))
    F = np.zeros(n)
    for c in cells:
        v = mesh.vertices[mesh.cells[c]]
        signs = mesh.cell_edge_signs([c])[0]
        A = local_stiffness(v, fam, a=prob.a, c=prob.c, signs=signs)
        b = local_load(v, fam, prob.f)
        dofs = list(range(cpos[int(c)] * fam.n0, (cpos[int(c)] + 1) * fam.n0))
        for e in mesh.cell_edges[c]:
            dofs += edofs(int(e))
        K[np.ix_(dofs, dofs)] += A
        F[dofs[: fam.n0]] += b
    for i, e in enumerate(iface_edges):
        e = int(e)
        if e not in epos:
            continue
        side = 0 if part.cell_subdomain[mesh.edge_cells[e, 0]] == j else 1
        a, b = mesh.vertices[mesh.edges[e]]
        _, w, s = edge_rule(a, b, 10)
        psi = (s - 0.5)[:, None] ** np.arange(fam.nb)
        Me = np.einsum("q,ql,qm->lm", w, psi, psi)
        d = edofs(e)
        K[np.ix_(d, d)] += beta * Me
        F[d] += Me @ (beta * ub[i, 1 - side] - lam[i, 1 - side])
    fixed = np.zeros(n, dtype=bool)
    xf = np.zeros(n)
    for e in edges:
        if mesh.edge_cells[e, 1] < 0:
            fixed[edofs(e)] = True
            xf[edofs(e)] = disc.dirichlet[e]
    free = ~fixed
    x = xf.copy()
    x[free] = np.linalg.solve(K[np.ix_(free, free)], F[free] - K[np.ix_(free, fixed)] @ xf[fixed])
    v0 = {int(c): x[cpos[int(c)] * fam.n0:(cpos[int(c)] + 1) * fam.n0] for c in cells}
    tr = {e: x[edofs(e)] for e in edges}
    return v0, tr


@pytest.mark.parametrize("fam", [ElementFamily("standard", 2), ElementFamily("superconvergent", 1)], ids=str)
def test_one_iteration_matches_dense_oracle(fam):
    mesh = build_uniform_triangle_mesh(4)
    disc = Discretization(mesh, fam, get_problem("test1"))
    part = SubdomainPartition.from_assignment(mesh, (mesh.centroids[:, 0] > 0.5).astype(int))
    beta = 5.0
    dd = build_subdomain_systems(disc, part, beta)
    rng = np.random.default_rng(6)
    I = dd.n_interfaces
    ub = rng.standard_normal((I, 2, fam.nb))
    lam = rng.standard_normal((I, 2, fam.nb))
    state = InterfaceState(3, ub, lam, tuple(np.zeros(s.n_dofs) for s in dd.systems))
    new = iterate_once(state, dd)
    assert new.n == 4
    wf = to_weak_function(dd, new)
    for j in range(2):
        v0, tr = _dense_subdomain(disc, part, j, beta, ub, lam, dd.iface_edges)
        for c, val in v0.items():
            assert np.allclose(wf.v0[c], val, atol=1e-11)
        for i, e in enumerate(dd.iface_edges):
            side = 0 if part.cell_subdomain[mesh.edge_cells[e, 0]] == j else 1
            assert np.allclose(new.ub[i, side], tr[int(e)], atol=1e-11)
    want_lam = beta * (ub[:, ::-1] - new.ub) - lam[:, ::-1]
    assert np.allclose(new.lam, want_lam, atol=1e-12)


def test_hybrid_solution_is_fixed_point():
    for fam in (P1, ElementFamily("superconvergent", 2)):
        disc, dd = _setup(fam=fam, beta=default_beta(fam))
        hy = solve_hybrid_direct(dd)
        nxt = iterate_once(hy.as_state(), dd)
        assert np.abs(nxt.ub - hy.ub).max() < 1e-11
        assert np.abs(nxt.lam - hy.lam).max() < 1e-11 * max(1.0, np.abs(hy.lam).max())
        for a, b in zip(nxt.solutions, hy.solutions):
            assert np.abs(a - b).max() < 1e-11


def test_recovered_multipliers_match_saddle_solve():
    disc, dd = _setup(fam=ElementFamily("standard", 2))
    rec = recover_multipliers(dd, solve(assemble(disc)))
    hy = solve_hybrid_direct(dd)
    assert np.abs(rec.lam - hy.lam).max() < 1e-8


def test_zero_data_stays_zero():
    mesh = build_uniform_triangle_mesh(4)
    disc = Discretization(mesh, P1, _zero_problem())
    dd = build_subdomain_systems(disc, partition_grid(mesh, 2), 8.0)
    state = initial_state(dd)
    for _ in range(3):
        state = iterate_once(state, dd)
    assert not np.any(state.ub) and not np.any(state.lam)
    assert all(not np.any(x) for x in state.solutions)


def test_order_and_threads_do_not_change_bits():
    _, dd = _setup(n=8, m=4, fam=ElementFamily("standard", 2))
    s0 = iterate_once(initial_state(dd), dd)
    ref = iterate_once(s0, dd)
    rng = np.random.default_rng(7)
    for order, jobs in ((rng.permutation(16), 1), (np.arange(16)[::-1], 4), (None, 8)):
        out = iterate_once(s0, dd, order=order, n_jobs=jobs)
        assert np.array_equal(out.ub, ref.ub)
        assert np.array_equal(out.lam, ref.lam)
        assert all(np.array_equal(a, b) for a, b in zip(out.solutions, ref.solutions))


def test_residual_run_converges_to_hybrid_solution():
    tol = 1e-10
    _, dd = _setup(n=8, m=2, fam=ElementFamily("standard", 2))
    hy = solve_hybrid_direct(dd)
    state, log = run(initial_state(dd), dd, StopRule("residual", tol, 2000))
    assert log.converged and log.residuals[-1] <= tol
    assert _max_diff(to_weak_function(dd, state), hy.function) < 10 * tol
    assert np.abs(state.ub[:, 0] - state.ub[:, 1]).max() < 10 * tol
    assert np.abs(state.lam[:, 0] + state.lam[:, 1]).max() < 10 * tol
    assert interface_residual(dd, state) == log.residuals[-1]


def test_non_convergence_is_reported():
    _, dd = _setup()
    state, log = run(initial_state(dd), dd, StopRule("residual", 1e-14, 3))
    assert not log.converged and log.iterations == 3 and state.n == 3


def test_oracle_mode_needs_error_function():
    _, dd = _setup()
    with pytest.raises(ValueError):
        run(initial_state(dd), dd, StopRule("oracle", 1e-3, 10))
    with pytest.raises(ValueError):
        StopRule("residual", -1.0)


def test_oracle_mode_stops_near_truncation_error():
    disc, dd = _setup(n=8)
    disc_err = energy_error(disc, solve(assemble(disc)))
    state, log = run(initial_state(dd), dd, StopRule("oracle", disc_err, 500), error_fn=error_monitor(dd))
    assert log.converged
    assert len(log.errors) == log.iterations
    assert log.errors[-1] < 1.5 * disc_err


def test_energy_is_zero_at_reference():
    _, dd = _setup()
    hy = solve_hybrid_direct(dd)
    d = energy_diagnostics(hy.as_state(), dd, hy)
    assert d["E"] == 0.0 and d["E_alt"] == 0.0


@pytest.mark.parametrize("start", ["local", "zero"])
def test_energy_identities_hold(start):
    _, dd = _setup(n=8, m=2)
    hy = solve_hybrid_direct(dd)
    state, log = run(initial_state(dd, start), dd, StopRule("residual", 1e-9, 400),
                     reference=hy, check_identities=True)
    E = np.array(log.energies)
    assert np.all(np.diff(E) <= 1e-12 * E[0])
    gaps = np.abs(log.identity_gaps)
    first = 0 if start == "local" else 1  # the zero start does not solve the local problems
    assert np.all(gaps[first:] <= 1e-9 * E[0])


def test_decrement_two_subdomains_computed_independently():
    mesh = build_uniform_triangle_mesh(8)
    disc = Discretization(mesh, ElementFamily("standard", 2), get_problem("test1"))
    part = SubdomainPartition.from_assignment(mesh, (mesh.centroids[:, 1] > 0.5).astype(int))
    dd = build_subdomain_systems(disc, part, 8.0)
    hy = solve_hybrid_direct(dd)
    state = initial_state(dd, "local")
    ref_wf = hy.function
    for _ in range(5):
        before = energy_diagnostics(state, dd, hy)
        # energy of the error from cell-wise local forms (a grad_w e, grad_w e) + s + (c e0, e0)
        err = ref_wf - to_weak_function(dd, state)
        energy = sum(np.einsum("ci,cij,cj->", err.local(ops.cells), ops.A, err.local(ops.cells))
                     for ops in disc.groups.values())
        state = iterate_once(state, dd)
        after = energy_diagnostics(state, dd, hy)
        assert before["E"] - after["E"] == pytest.approx(4 * dd.beta * energy, rel=1e-9)
        assert after["E"] == pytest.approx(after["E_alt"], rel=1e-9)


def test_wrong_reference_trips_diagnostics():
    _, dd = _setup()
    hy = solve_hybrid_direct(dd)
    bad = type(hy)(hy.solutions, hy.ub, hy.lam + 1.0, hy.function)
    with pytest.raises(DiagnosticError):
        run(initial_state(dd, "local"), dd, StopRule("residual", 1e-10, 50), reference=bad, check_identities=True)
