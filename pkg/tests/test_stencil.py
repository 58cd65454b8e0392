import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_gfdm.geometry import ManifoldSpec, PointCloud, analytic_frame, sample_manifold
from manifold_gfdm.stencil import (Frame, StencilError, build_knn, default_kp, estimate_fill_distance,
                                   estimate_tangent, frames_for, h_K_max, principal_angles,
                                   probe_fill_distance)

from .oracles import knn_bruteforce


def _cloud(X, d=1):
    X = np.asarray(X, float)
    return PointCloud(X, np.empty((X.shape[0], 0)), d=d)


def test_knn_k1_and_tie_break():
    X = np.array([[0.0], [1.0], [2.0]])
    t = build_knn(X, 1)
    assert t.indices.ravel().tolist() == [0, 1, 2]
    assert build_knn(X, 2).indices[1].tolist() == [1, 0]
    with pytest.raises(StencilError):
        build_knn(X, 4)


def test_knn_matches_bruteforce():
    X = sample_manifold(ManifoldSpec.torus(4), 300, 11).ambient
    t = build_knn(X, 15)
    idx, dist = knn_bruteforce(X, 15)
    assert np.array_equal(t.indices, idx)
    np.testing.assert_allclose(t.distances, dist, rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 60), st.integers(1, 5))
def test_knn_self_first_and_permutation(seed, N, K):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(N, 2)).astype(float) + rng.random((N, 2)) * 1e-3
    K = min(K, N)
    t = build_knn(X, K)
    assert np.array_equal(t.indices[:, 0], np.arange(N))
    assert np.all(t.distances[:, 0] == 0) and np.all(np.diff(t.distances, axis=1) >= 0)
    perm = rng.permutation(N)
    tp = build_knn(X[perm], K)
    inv = np.argsort(perm)
    # distances are permutation equivariant; index sets too, up to ties
    np.testing.assert_array_equal(tp.distances, t.distances[perm])
    for i in range(N):
        assert set(perm[tp.indices[i]]) == set(t.indices[perm[i]]) or \
            np.any(np.diff(t.distances[perm[i]]) == 0)
    assert inv.size == N


def test_default_kp():
    assert default_kp(800) == 57
    assert default_kp(3200) == 113
    assert all(default_kp(n) % 2 == 1 for n in (10, 100, 1000, 25600))


def test_tangent_exact_subspaces():
    rng = np.random.default_rng(0)
    s = rng.normal(size=10)
    line = np.outer(s, [1.0, 2.0, -2.0]) + [0.5, 0.1, 0.2]
    f = estimate_tangent(_cloud(line, 1), 5)
    v = np.array([1.0, 2.0, -2.0]) / 3.0
    assert np.allclose(np.abs(f.tangents[:, :, 0] @ v), 1.0, atol=1e-12)
    _, sv, _ = np.linalg.svd(line - line.mean(axis=0))
    assert sv[1] <= 1e-12 * sv[0]
    # first non-negligible component positive
    assert np.all(f.tangents[:, 0, 0] > 0)

    P = rng.normal(size=(50, 2))
    basis = np.linalg.qr(rng.normal(size=(3, 2)))[0]
    plane = P @ basis.T
    f = estimate_tangent(_cloud(plane, 2), 8)
    ang = principal_angles(f.tangents, np.broadcast_to(basis, f.tangents.shape))
    assert ang.max() <= 1e-10


def test_tangent_degenerate_flagged():
    X = np.zeros((6, 3))
    X[:, 0] = np.arange(6.0)
    f = estimate_tangent(_cloud(X, 2), 4)
    assert f.flagged.size == 6
    with pytest.raises(StencilError):
        estimate_tangent(_cloud(X, 2), 2)


def test_tangent_ellipse_accuracy():
    spec = ManifoldSpec.ellipse()
    c = sample_manifold(spec, 3200, 2)
    ref = analytic_frame(spec, c.intrinsic)
    for order, tol in ((1, 0.05), (2, 0.01), (3, 0.01)):
        f = estimate_tangent(c, 20, order=order)
        assert principal_angles(f.tangents, ref).max() <= tol


def test_tangent_projection_error_decreases():
    spec = ManifoldSpec.torus(4)
    med = []
    for N in (800, 3200, 12800):
        c = sample_manifold(spec, N, 5)
        f = estimate_tangent(c, default_kp(N))
        ref = Frame(analytic_frame(spec, c.intrinsic))
        med.append(np.median(np.linalg.norm(f.projections() - ref.projections(), axis=(1, 2))))
    assert med[0] > med[1] > med[2]


def test_frame_projection_invariants():
    spec = ManifoldSpec.semitorus()
    c = sample_manifold(spec, 200, 0)
    for f in (frames_for(c, "analytic"), frames_for(c, "estimated", 21)):
        P = f.projections()
        assert np.allclose(P, np.swapaxes(P, 1, 2), atol=1e-12)
        assert np.allclose(P @ P, P, atol=1e-10)
        assert np.allclose(np.trace(P, axis1=1, axis2=2), 2.0, atol=1e-10)
    with pytest.raises(StencilError):
        frames_for(c, "magic")


def test_h_k_max():
    X = np.array([[0.0], [1.0], [3.0]])
    assert np.all(h_K_max(build_knn(X, 1)) == 0)
    assert h_K_max(build_knn(X, 3))[0] == 3.0
    spec = ManifoldSpec.ellipse()
    meds = [np.median(h_K_max(build_knn(sample_manifold(spec, N, 1), 21))) for N in (800, 1600, 3200, 6400, 12800)]
    ratios = np.array(meds[:-1]) / np.array(meds[1:])
    assert np.all(np.abs(ratios - 2.0) <= 0.6)


def test_fill_distance():
    g = np.column_stack([np.arange(10.0), np.zeros(10)])
    assert probe_fill_distance(g, g) == 0.0
    spec = ManifoldSpec.ellipse()
    one = PointCloud(spec.embed([[0.0]]), np.zeros((1, 1)), spec)
    assert estimate_fill_distance(spec, one, 2000, 0) >= 1.9
    h800 = estimate_fill_distance(spec, sample_manifold(spec, 800, 1), 20000, 3)
    h3200 = estimate_fill_distance(spec, sample_manifold(spec, 3200, 1), 20000, 3)
    assert 2.0 <= h800 / h3200 <= 6.0
    assert math.isfinite(h800)
