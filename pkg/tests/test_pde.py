import csv
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_gfdm.geometry import GeometryError, ManifoldSpec, PointCloud, boundary_distance, sample_manifold
from manifold_gfdm.gmls import assemble_operator
from manifold_gfdm.pde import (SolveError, check_discrete_max_principle, detect_interior,
                               inv_norm_estimate, restrict_eps, solve_closed, solve_dirichlet,
                               sparse_solve, stencil_closure, write_solution_csv)
from manifold_gfdm.stabilizer import stabilize_operator
from manifold_gfdm.stencil import Frame, build_knn, frames_for, h_K_max

from .oracles import dense_solve


def _operator(spec, N, K, l, seed=0, stabilize=True):
    c = sample_manifold(spec, N, seed)
    t = build_knn(c, K)
    L, wt = assemble_operator(c, t, frames_for(c, "analytic"), l)
    if stabilize:
        L, _, _ = stabilize_operator(wt)
    return c, t, L, wt


@pytest.fixture(scope="module")
def semi():
    return _operator(ManifoldSpec.semitorus(), 3200, 51, 2)


def test_segment_endpoints_flagged():
    x = np.linspace(0.0, 1.0, 41)
    X = np.column_stack([x, np.zeros_like(x)])
    c = PointCloud(X, np.empty((41, 0)), d=1)
    T = np.broadcast_to(np.array([[1.0], [0.0]]), (41, 2, 1)).copy()
    _, wt = assemble_operator(c, build_knn(c, 5), Frame(T), 2)
    split = detect_interior(wt)
    assert 0 in split.complement and 40 in split.complement
    assert split.Y.size + split.complement.size == 41
    assert np.all(wt.w1[split.Y] < 0) and split.eps_star is None


def test_w1_zero_counts_as_boundary():
    split = detect_interior(np.array([-1.0, 0.0, 2.0, -3.0]))
    assert split.Y.tolist() == [0, 3] and split.complement.tolist() == [1, 2]
    assert split.n_w1_zero == 1 and split.mask.tolist() == [True, False, False, True]


def test_torus_flags_few_points():
    _, _, _, wt = _operator(ManifoldSpec.torus(4), 3200, 41, 2, stabilize=False)
    split = detect_interior(wt)
    assert split.complement.size <= 0.01 * 3200 and split.eps_star is None


def test_semitorus_flags_near_boundary(semi):
    c, t, _, wt = semi
    split = detect_interior(wt, c)
    h = np.median(h_K_max(t))
    assert split.complement.size > 0
    assert split.eps_star <= 5 * h
    assert split.eps_star == pytest.approx(boundary_distance(c.spec, c.intrinsic[split.complement]).max())
    # stencil size changes the flagged set only mildly
    wt31 = assemble_operator(c, build_knn(c, 31), frames_for(c, "analytic"), 2)[1]
    other = detect_interior(wt31).complement
    sym = np.setxor1d(split.complement, other).size
    assert sym <= 0.2 * max(split.complement.size, other.size) + 2


def test_closed_solves():
    spec = ManifoldSpec.ellipse()
    _, _, L, _ = _operator(spec, 800, 21, 2)
    s = solve_closed(L, 2.0, np.full(800, 6.0))
    np.testing.assert_allclose(s.U, 3.0, rtol=1e-10)
    s = solve_closed(L, 1.0, np.zeros(800))
    assert np.all(s.U == 0) and s.residual == 0
    with pytest.raises(ValueError):
        solve_closed(L, 0.0, np.zeros(800))


def test_restrict_eps(semi):
    c, _, _, wt = semi
    spec = c.spec
    assert restrict_eps(c, spec, 0.0).size == c.N - np.count_nonzero(boundary_distance(spec, c.intrinsic) == 0)
    assert restrict_eps(c, spec, math.pi * (spec.R + spec.r)).size == 0
    split = detect_interior(wt, c)
    inner = restrict_eps(c, spec, split.eps_star)
    assert np.all(np.isin(inner, split.Y))
    with pytest.raises(GeometryError):
        restrict_eps(c, ManifoldSpec.torus(4), 0.1)


def test_dirichlet_solve_matches_dense(semi):
    c, _, L, wt = semi
    S = detect_interior(wt, c).Y
    f = np.sin(c.intrinsic[:, 0])
    sol = solve_dirichlet(L, S, f)
    ref = dense_solve(L[S][:, S].toarray(), f[S])
    assert np.max(np.abs(sol.U[S] - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())
    off = np.setdiff1d(np.arange(c.N), S)
    assert np.all(sol.U[off] == 0)
    assert solve_dirichlet(L, [], f).U.sum() == 0


def test_sparse_solve_cases():
    x, st_ = sparse_solve(sp.identity(5), np.arange(5.0))
    assert np.array_equal(x, np.arange(5.0)) and st_["residual"] == 0
    # periodic second difference plus a shift
    n = 64
    A = sp.diags([np.full(n, 2.5), -np.ones(n - 1), -np.ones(n - 1)], [0, 1, -1]).tolil()
    A[0, n - 1] = A[n - 1, 0] = -1.0
    b = np.cos(2 * np.pi * np.arange(n) / n)
    x, _ = sparse_solve(A, b)
    np.testing.assert_allclose(x, b / (0.5 + 2 - 2 * np.cos(2 * np.pi / n)), rtol=1e-12, atol=1e-14)
    rng = np.random.default_rng(5)
    M = sp.random(200, 200, density=0.05, random_state=rng).toarray()
    M += np.diag(np.abs(M).sum(axis=1) + 1.0)
    b = rng.normal(size=200)
    x, _ = sparse_solve(sp.csr_matrix(M), b)
    assert np.max(np.abs(x - dense_solve(M, b))) <= 1e-10
    with pytest.raises(SolveError, match="singular"):
        sparse_solve(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])), np.ones(2))
    with pytest.raises(SolveError):
        sparse_solve(sp.csr_matrix(np.ones((2, 3))), np.ones(2))


def test_inv_norm_estimate():
    assert inv_norm_estimate(sp.diags([2.0, 4.0])) == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    M = rng.normal(size=(40, 40)) + 12 * np.eye(40)
    exact = np.abs(np.linalg.inv(M)).sum(axis=1).max()
    est = inv_norm_estimate(sp.csr_matrix(M))
    assert exact / 3 <= est <= exact * (1 + 1e-12)


def test_max_principle_simple_cases(semi):
    c, _, L, wt = semi
    S = detect_interior(wt, c).Y
    rep = check_discrete_max_principle(L, S, np.full(c.N, 2.0))
    assert rep.applicable and rep.passed and rep.violations.size == 0
    assert stencil_closure(L, S).size > 0
    # solution of L_hat v = -1 with zero exterior values is non-negative
    sol = solve_dirichlet(L, S, -np.ones(c.N))
    assert sol.U.min() >= -1e-8
    assert check_discrete_max_principle(L, S, sol.U).passed
    full = check_discrete_max_principle(L, np.arange(c.N), np.ones(c.N))
    assert not full.applicable


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_max_principle_random_fields(seed):
    # a diagonally dominant operator with non-negative off-diagonals satisfies both principles
    rng = np.random.default_rng(seed)
    n = 30
    W = sp.random(n, n, density=0.2, random_state=rng).toarray()
    np.fill_diagonal(W, 0.0)
    L = W - np.diag(W.sum(axis=1))
    S = np.arange(5, n)
    v = np.zeros(n)
    v[:5] = rng.normal(size=5)
    A = L[np.ix_(S, S)]
    if np.linalg.matrix_rank(A) < S.size:
        return
    v[S] = np.linalg.solve(A, -L[np.ix_(S, np.arange(5))] @ v[:5])
    rep = check_discrete_max_principle(sp.csr_matrix(L), S, v, tol=1e-7)
    assert rep.passed


def test_write_solution_csv(tmp_path):
    p = tmp_path / "u.csv"
    write_solution_csv(p, [1.0, 0.1], intrinsic=[[0.5], [1.5]], u_exact=[1.0, 0.2])
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["index", "s1", "U", "u_exact", "abs_error"]
    assert rows[2][:3] == ["1", "1.5", "0.10000000000000001"]
    assert float(rows[2][4]) == abs(0.1 - 0.2)
    write_solution_csv(p, [3.0])
    assert list(csv.reader(open(p))) == [["index", "U"], ["0", "3"]]
