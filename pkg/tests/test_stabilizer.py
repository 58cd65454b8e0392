import csv

import numpy as np
import pytest

from manifold_gfdm.geometry import ManifoldSpec, sample_manifold
from manifold_gfdm.gmls import RowWeights, assemble_operator
from manifold_gfdm.stabilizer import (C_TOL, diagonal_dominance_gap, stabilize_operator, stabilize_row,
                                      witness_violation, write_c_values)
from manifold_gfdm.stencil import build_knn, frames_for


def _table(spec, N, K, l, seed=0):
    c = sample_manifold(spec, N, seed)
    L, wt = assemble_operator(c, build_knn(c, K), frames_for(c, "analytic"), l)
    return c, L, wt


@pytest.fixture(scope="module")
def ellipse400():
    return {l: _table(ManifoldSpec.ellipse(), 400, 21, l)[2] for l in (2, 3, 4, 5)}


def test_already_dominant_row():
    phi = np.column_stack([np.ones(4), [0.0, 1.0, -1.0, 0.5]])
    w = np.array([-3.0, 1.0, 1.0, 1.0])
    phi[3, 1] = 0.0  # keep sum w_k z_k = 0 so the raw row is consistent with itself
    r = stabilize_row(RowWeights(0, np.arange(4), w), phi)
    assert r.C == 0.0 and r.feasible and r.diagonally_dominant and not r.fallback_used
    assert r.w_hat[0] <= 0 and np.all(r.w_hat[1:] >= 0)
    np.testing.assert_allclose(phi.T @ r.w_hat, phi.T @ w, atol=1e-12)


def test_row_preconditions_and_stall(ellipse400):
    wt = ellipse400[4]
    i = int(np.nonzero(wt.w1 < 0)[0][0])
    with pytest.raises(ValueError):
        stabilize_row(RowWeights(0, np.arange(3), np.array([0.5, -0.25, -0.25])), np.ones((3, 1)))
    r = stabilize_row(wt[i], wt.phi[i], max_iter=1)
    assert r.fallback_used and np.array_equal(r.w_hat, wt.w[i])
    assert r.C == pytest.approx(abs(wt.w[i, 1:].min()))


def test_ellipse_c_values(ellipse400):
    for l in (2, 3):
        _, _, rep = stabilize_operator(ellipse400[l])
        assert rep.max_C <= C_TOL, l
    for l in (4, 5):
        _, _, rep = stabilize_operator(ellipse400[l])
        assert rep.n_nonzero_C > 0, l


@pytest.mark.parametrize("spec,N,K,l", [(ManifoldSpec.ellipse(), 800, 21, 2), (ManifoldSpec.ellipse(), 800, 21, 5),
                                        (ManifoldSpec.torus(4), 1000, 41, 3), (ManifoldSpec.semitorus(), 1500, 51, 4)],
                         ids=["ellipse2", "ellipse5", "torus3", "semitorus4"])
def test_row_invariants(spec, N, K, l):
    _, _, wt = _table(spec, N, K, l, seed=3)
    rows = np.nonzero(wt.w1 < 0)[0]
    assert np.all(witness_violation(wt.w[rows]) <= 1e-9)
    Lh, W, rep = stabilize_operator(wt)
    assert rep.skipped.size == np.count_nonzero(~(wt.w1 < 0))
    ok = rows[~rep.fallback[rows]]
    assert ok.size >= 0.99 * rows.size
    scale = np.max(np.abs(wt.w[ok]), axis=1)
    C = rep.C[ok]
    assert np.all(C >= 0)
    assert np.all(W[ok, 0] <= 0)
    assert np.all(W[ok, 1:] + C[:, None] >= -1e-9 * scale[:, None])
    assert np.all(C <= np.abs(wt.w[ok, 1:].min(axis=1)) + 1e-9 * scale)
    cons = np.einsum("rk,rkm->rm", W[ok] - wt.w[ok], wt.phi[ok])
    assert np.max(np.abs(cons) / scale[:, None]) <= 1e-8
    assert np.max(np.abs(W[ok].sum(axis=1)) / scale) <= 1e-9
    dom = ok[C <= C_TOL]
    gap = diagonal_dominance_gap(W[dom])
    assert np.all(gap >= -1e-9 * np.max(np.abs(W[dom]), axis=1))
    ones = Lh @ np.ones(wt.w.shape[0])
    assert np.max(np.abs(ones)) <= 1e-9 * np.max(np.abs(W).sum(axis=1))
    # identical sparsity to the raw operator
    raw_pattern = sorted(map(tuple, np.sort(wt.neighbors, axis=1).tolist()))
    hat_pattern = sorted(tuple(Lh[i].indices.tolist()) for i in range(Lh.shape[0]))
    assert raw_pattern == hat_pattern


def test_skipped_rows_force_and_attempt_all():
    _, _, wt = _table(ManifoldSpec.semitorus(), 1500, 51, 2, seed=1)
    skip = np.nonzero(~(wt.w1 < 0))[0]
    assert skip.size > 0
    _, W, rep = stabilize_operator(wt)
    assert np.array_equal(W[skip], wt.w[skip]) and not rep.fallback[skip].any()
    _, _, rep = stabilize_operator(wt, force=True)
    assert rep.fallback[skip].all()
    _, W, rep = stabilize_operator(wt, attempt_all=True)
    assert rep.skipped.size == 0 and np.all(rep.status[skip] >= 0)
    solved = skip[~rep.fallback[skip]]
    assert np.all(W[solved, 0] <= 0)


def test_c_csv(tmp_path, ellipse400):
    _, _, rep = stabilize_operator(ellipse400[4])
    p = tmp_path / "c.csv"
    write_c_values(p, rep)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["index", "C", "feasible", "fallback"]
    assert len(rows) == 401
    vals = np.array([float(r[1]) if r[1] else np.nan for r in rows[1:]])
    np.testing.assert_array_equal(vals[np.isfinite(vals)], rep.C[np.isfinite(rep.C)])
    summary = rep.summary()
    assert summary["C_nonzero"] == rep.n_nonzero_C and summary["C_max"] == rep.max_C
