import numpy as np
import pytest

from manifold_gfdm.geometry import FieldSpec, ManifoldSpec, analytic_laplacian, sample_manifold
from manifold_gfdm.gmls import (RankDeficientStencil, _weights_batch, assemble_operator,
                                enumerate_multi_indices, eval_basis, eval_G_basis, forward_error,
                                gmls_row_weights)
from manifold_gfdm.stencil import build_knn, frames_for

from .oracles import gmls_dense, graded_lex


def test_multi_indices():
    s = enumerate_multi_indices(2, 1)
    assert list(s) == [(0,), (1,), (2,)] and s.m == 3
    assert enumerate_multi_indices(2, 2).m == 6
    assert enumerate_multi_indices(5, 2).m == 21
    assert list(enumerate_multi_indices(3, 2)) == graded_lex(3, 2)
    assert list(enumerate_multi_indices(2, 2))[:4] == [(0, 0), (1, 0), (0, 1), (2, 0)]
    with pytest.raises(ValueError):
        enumerate_multi_indices(1, 2)


def test_eval_basis_examples():
    T = np.array([[0.0], [1.0]])
    x0 = np.array([1.0, 1.0])
    assert eval_basis(T, x0, [3.0, 4.0], (0,)) == 1.0
    assert eval_basis(T, x0, x0, (2,)) == 0.0
    assert eval_basis(T, x0, x0 + [0.4, 0.3], (2,)) == pytest.approx(0.09, abs=1e-15)


def test_eval_G_basis_examples():
    rng = np.random.default_rng(0)
    T = np.linalg.qr(rng.normal(size=(3, 2)))[0]
    P = T @ T.T
    x0 = rng.normal(size=3)
    x = x0 + rng.normal(size=3)
    for ell in range(3):
        assert eval_G_basis(T, P, x0, x, (0, 0), ell) == 0.0
        assert eval_G_basis(T, P, x0, x, (1, 0), ell) == pytest.approx((P @ T[:, 0])[ell], abs=1e-15)
    Te = np.array([[0.0], [1.0]])
    assert eval_G_basis(Te, Te @ Te.T, [1.0, 0.0], [1.0, 0.0], (2,), 1) == 0.0


def _stencil(spec, N, K, seed, base=0):
    c = sample_manifold(spec, N, seed)
    t = build_knn(c, K)
    f = frames_for(c, "analytic")
    idx = t.indices[base]
    return c.ambient[idx], f.tangents[base], f.projections(idx)


def test_weights_match_dense_oracle_one_stencil():
    X, T0, P = _stencil(ManifoldSpec.semitorus(), 2000, 25, 3, base=17)
    w = gmls_row_weights(X, T0, P, 2).w
    ref = gmls_dense(X, T0, P, 2)
    assert np.max(np.abs(w - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_weights_match_dense_oracle_50_stencils():
    rng = np.random.default_rng(42)
    specs = [(ManifoldSpec.ellipse(), 21), (ManifoldSpec.torus(4), 41), (ManifoldSpec.semitorus(), 51)]
    worst = 0.0
    for case in range(50):
        spec, K = specs[case % 3]
        l = int(rng.integers(2, 5 if spec.d == 2 else 6))
        X, T0, P = _stencil(spec, 1500, K, int(rng.integers(1 << 30)), base=int(rng.integers(1500)))
        w = gmls_row_weights(X, T0, P, l).w
        ref = gmls_dense(X, T0, P, l)
        worst = max(worst, np.max(np.abs(w - ref)) / np.max(np.abs(ref)))
    assert worst <= 1e-8


def test_rank_deficiency():
    X = np.zeros((8, 2))
    X[:, 0] = np.arange(8.0)
    T0 = np.array([[0.0], [1.0]])  # tangent orthogonal to the data: z = 0 everywhere
    P = np.broadcast_to(T0 @ T0.T, (8, 2, 2))
    with pytest.raises(RankDeficientStencil) as info:
        gmls_row_weights(X, T0, P, 2, base=5)
    assert info.value.rows.tolist() == [5]
    with pytest.raises(RankDeficientStencil):
        gmls_row_weights(X[:3], np.array([[1.0], [0.0]]), P[:3], 2)


def test_scale_covariance():
    X, T0, P = _stencil(ManifoldSpec.torus(4), 1000, 41, 1)
    w1 = gmls_row_weights(X, T0, P, 3).w
    w2 = gmls_row_weights(2.5 * X, T0, P, 3).w
    np.testing.assert_allclose(w2, w1 / 2.5**2, rtol=1e-9, atol=1e-12 * np.abs(w1).max())


def test_basis_reproduction():
    # w applied to the basis columns equals the extracted row of sum G_l G_l applied to them
    X, T0, P = _stencil(ManifoldSpec.semitorus(), 1000, 51, 2)
    l = 3
    w, Phi, _ = _weights_batch(X[None], T0[None], (P @ T0)[None], l, return_phi=True)
    ref = gmls_dense(X, T0, P, l)
    h = np.sqrt(np.max(np.sum((X - X[0]) ** 2, axis=1)))
    Z = (X - X[0]) @ T0 / h
    cols = np.array([[np.prod(z ** np.array(a)) for a in graded_lex(l, 2)] for z in Z])
    np.testing.assert_allclose(Phi[0], cols, atol=1e-13)
    lhs = w[0] @ cols
    rhs = ref @ cols
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * np.abs(ref).sum()


@pytest.mark.parametrize("spec,K,l", [(ManifoldSpec.ellipse(), 21, 5), (ManifoldSpec.torus(4), 41, 4),
                                      (ManifoldSpec.semitorus(), 51, 4)], ids=["ellipse", "torus", "semitorus"])
@pytest.mark.parametrize("where", ["neighbor", "base"])
def test_assembly_constant_annihilation_and_support(spec, K, l, where):
    c = sample_manifold(spec, 1200, 4)
    t = build_knn(c, K)
    L, wt = assemble_operator(c, t, frames_for(c, "analytic"), l, projection_at=where)
    scale = np.max(np.abs(wt.w).sum(axis=1))
    assert np.max(np.abs(L @ np.ones(c.N))) <= 1e-9 * scale
    assert L.nnz == c.N * K
    for i in (0, 7, 999):
        assert sorted(L[i].indices.tolist()) == sorted(t.indices[i].tolist())
    # the caller's neighbour table must be untouched by the CSR build
    assert np.array_equal(t.indices, build_knn(c, K).indices)
    assert np.array_equal(wt.neighbors[:, 0], np.arange(c.N))


def test_assembly_matches_row_recomputation():
    spec = ManifoldSpec.ellipse()
    c = sample_manifold(spec, 1600, 9)
    t = build_knn(c, 21)
    f = frames_for(c, "analytic")
    L, wt = assemble_operator(c, t, f, 2)
    u = FieldSpec.for_manifold(spec).evaluate(spec, c.intrinsic)
    lap = analytic_laplacian(spec, FieldSpec.for_manifold(spec), c.intrinsic)
    rows = np.array([0, 5, 800, 1599])
    for i in rows:
        idx = t.indices[i]
        r = gmls_row_weights(c.ambient[idx], f.tangents[i], f.projections(idx), 2, base=i)
        assert np.array_equal(r.w, wt.w[i])
        # CSR sums in column order, so only the weights themselves are bit-identical
        assert abs(r.w @ u[idx] - (L @ u)[i]) <= 1e-14 * np.abs(r.w).sum()
    fe = forward_error(L, u, lap)
    assert fe == pytest.approx(np.max(np.abs(L @ u - lap)))


def test_ellipse_l3_forward_error_rate():
    spec = ManifoldSpec.ellipse()
    fld = FieldSpec.for_manifold(spec)
    Ns = [800, 1600, 3200, 6400, 12800]
    fe = []
    for N in Ns:
        c = sample_manifold(spec, N, 1)
        L, _ = assemble_operator(c, build_knn(c, 21), frames_for(c, "analytic"), 3)
        fe.append(forward_error(L, fld.evaluate(spec, c.intrinsic), analytic_laplacian(spec, fld, c.intrinsic)))
    slope = np.polyfit(np.log(Ns), np.log(fe), 1)[0]
    assert -2.5 <= slope <= -1.5
