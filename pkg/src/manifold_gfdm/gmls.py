"""Intrinsic-polynomial least-squares weights for the Laplace-Beltrami operator.

For a base point x0 with orthonormal tangent basis T0 (n x d) and a stencil
of K neighbours, the local coordinates are z = T0^T (x - x0) and the fitting
space is spanned by the monomials z^alpha, |alpha| <= l. The tangential
gradient of a fitted polynomial at a stencil point x_k is P(x_k) grad p, and
the Laplacian weights are the first row of sum_l G_l G_l with
G_l = B_l Phi^+ (see ``_weights_batch``).

Internally the monomials are evaluated in the rescaled coordinate z / h,
h being the stencil radius. This spans the same polynomial space, so the
weights are unchanged, but it keeps Phi well conditioned for l up to 5.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
import scipy.sparse as sp

from .geometry import PointCloud
from .stencil import Frame, NeighborTable

RANK_RTOL = 1e-10
ROW_CHUNK = 1024


class RankDeficientStencil(np.linalg.LinAlgError):
    """Phi lost rank on one or more stencils; ``rows`` holds the base indices."""

    def __init__(self, rows, message=None):
        self.rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        super().__init__(message or f"rank-deficient Phi at base points {self.rows[:20].tolist()}"
                         + (" ..." if self.rows.size > 20 else "")
                         + "; retry with a larger K")


@dataclass(frozen=True)
class MultiIndexSet:
    degree: int
    dim: int
    alphas: np.ndarray  # (m, d) int

    @property
    def m(self) -> int:
        return self.alphas.shape[0]

    def __len__(self):
        return self.m

    def __iter__(self):
        return iter(map(tuple, self.alphas))

    @property
    def orders(self) -> np.ndarray:
        return self.alphas.sum(axis=1)


def enumerate_multi_indices(l: int, d: int) -> MultiIndexSet:
    """All alpha with |alpha| <= l in graded lexicographic order.

    Within one total degree the first coordinate varies slowest and the
    largest exponent comes first, e.g. (0,0), (1,0), (0,1), (2,0), (1,1), ...
    """
    if l < 2:
        raise ValueError("the Laplacian needs polynomial degree l >= 2")
    if d < 1:
        raise ValueError("intrinsic dimension must be positive")
    return MultiIndexSet(l, d, _alphas(l, d))


@lru_cache(maxsize=None)
def _alphas(l, d):
    out = []
    for deg in range(l + 1):
        out.extend(_compositions(deg, d))
    arr = np.array(out, dtype=np.int64).reshape(-1, d)
    arr.setflags(write=False)
    assert arr.shape[0] == comb(l + d, d)
    return arr


def _compositions(total, parts):
    if parts == 1:
        return [(total,)]
    res = []
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            res.append((first,) + rest)
    return res


def eval_basis(T0, x0, x, alpha) -> float:
    """Intrinsic monomial prod_i [t_i . (x - x0)]^alpha_i."""
    z = np.asarray(T0).T @ (np.asarray(x, float) - np.asarray(x0, float))
    return float(np.prod(z ** np.asarray(alpha)))


def eval_G_basis(T0, P_eval, x0, x_eval, alpha, ell: int) -> float:
    """Component ``ell`` (0-based) of P(x_eval) grad z^alpha at x_eval."""
    T0 = np.asarray(T0, dtype=float)
    alpha = np.asarray(alpha)
    z = T0.T @ (np.asarray(x_eval, float) - np.asarray(x0, float))
    grad = np.zeros(T0.shape[0])
    for i in range(alpha.size):
        if alpha[i] == 0:
            continue
        a = alpha.copy()
        a[i] -= 1
        grad += alpha[i] * np.prod(z ** a) * T0[:, i]
    return float(np.asarray(P_eval)[ell] @ grad)


# -- batched kernels -----------------------------------------------------------


def _monomials(z, alphas):
    """Phi[..., k, j] = z_k^alpha_j and dPhi[..., k, j, i] = d/dz_i z_k^alpha_j."""
    # powers up to l, with z^-1 never formed: exponent-1 clipped at 0 and masked by alpha
    l = int(alphas.max())
    pw = z[..., None] ** np.arange(l + 1)              # (..., K, d, l+1)
    d = alphas.shape[1]
    m = alphas.shape[0]
    Phi = np.ones(z.shape[:-1] + (m,))
    for i in range(d):
        Phi = Phi * pw[..., i, :][..., alphas[:, i]]
    dPhi = np.empty(z.shape[:-1] + (m, d))
    for i in range(d):
        term = np.ones(z.shape[:-1] + (m,)) * alphas[:, i]
        for r in range(d):
            e = alphas[:, r] - (1 if r == i else 0)
            term = term * pw[..., r, :][..., np.clip(e, 0, None)]
        dPhi[..., i] = term
    return Phi, dPhi


def _weights_batch(coords, T0, PT0, l, return_phi=False):
    """Least-squares Laplacian weights for a batch of stencils.

    Parameters
    ----------
    coords : (B, K, n) stencil coordinates, base point first.
    T0 : (B, n, d) tangent basis at each base point.
    PT0 : (B, K, n, d) projection at each stencil point applied to T0.
    l : polynomial degree.

    Returns
    -------
    w : (B, K) weights, Phi (B, K, m) in scaled coordinates, smin/smax ratio (B,)
    """
    alphas = _alphas(l, T0.shape[2])
    diff = coords - coords[:, :1, :]
    z = np.einsum("bkn,bnd->bkd", diff, T0)
    h = np.sqrt(np.max(np.sum(diff * diff, axis=2), axis=1))
    h = np.where(h > 0, h, 1.0)
    zs = z / h[:, None, None]
    Phi, dPhi = _monomials(zs, alphas)
    # ambient gradient of (z/h)^alpha is (1/h) sum_i dPhi_i T0[:, i]; then project
    Bm = np.einsum("bkmi,bkni->bkmn", dPhi, PT0) / h[:, None, None, None]

    Q, Rm = np.linalg.qr(Phi)
    sv = np.linalg.svd(Rm, compute_uv=False)
    ratio = sv[:, -1] / np.where(sv[:, 0] > 0, sv[:, 0], 1.0)
    ok = ratio >= RANK_RTOL
    Rsafe = np.where(ok[:, None, None], Rm, np.eye(Rm.shape[1]))
    pinv = np.linalg.solve(Rsafe, np.swapaxes(Q, 1, 2))       # (B, m, K)

    a = np.einsum("bjn,bjk->bnk", Bm[:, 0], pinv)              # row 0 of G_l, all l
    c = np.einsum("bnk,bkjn->bj", a, Bm)
    w = np.einsum("bj,bjk->bk", c, pinv)
    w[~ok] = np.nan
    if return_phi:
        return w, Phi, ratio
    return w, ratio


@dataclass(frozen=True)
class RowWeights:
    """Laplacian weights of one stencil (base point first)."""

    base: int
    neighbors: np.ndarray
    w: np.ndarray

    @property
    def w1_negative(self) -> bool:
        return bool(self.w[0] < 0)


@dataclass
class WeightTable:
    """All stencil weights of an assembled operator, stored row-major.

    Indexing returns a :class:`RowWeights`; ``phi`` keeps the scaled basis
    values that the stabilizer needs for its consistency constraints.
    """

    neighbors: np.ndarray   # (N, K)
    w: np.ndarray           # (N, K)
    phi: np.ndarray         # (N, K, m)
    degree: int

    def __len__(self):
        return self.w.shape[0]

    def __getitem__(self, i) -> RowWeights:
        return RowWeights(int(i), self.neighbors[i], self.w[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def w1(self) -> np.ndarray:
        return self.w[:, 0]

    @property
    def w1_negative(self) -> np.ndarray:
        return self.w[:, 0] < 0


def gmls_row_weights(coords, T0, projections, l: int, base: int = 0,
                     neighbors=None) -> RowWeights:
    """Weights of a single stencil.

    Parameters
    ----------
    coords : (K, n) stencil points, base point in row 0.
    T0 : (n, d) orthonormal tangent basis at the base point.
    projections : (K, n, n) tangent projections at the stencil points
        (pass the base projection K times to freeze P at the base).
    l : polynomial degree.

    Raises
    ------
    RankDeficientStencil
        If the smallest singular value of Phi is below 1e-10 times the largest.
    """
    coords = np.asarray(coords, dtype=float)
    K = coords.shape[0]
    m = comb(l + np.asarray(T0).shape[1], l)
    if K <= m:
        raise RankDeficientStencil([base], f"K={K} must exceed m={m} at base point {base}")
    PT0 = np.asarray(projections, float) @ np.asarray(T0, float)
    w, ratio = _weights_batch(coords[None], np.asarray(T0, float)[None], PT0[None], l)
    if ratio[0] < RANK_RTOL:
        raise RankDeficientStencil([base])
    nb = np.arange(K) if neighbors is None else np.asarray(neighbors)
    return RowWeights(base, nb, w[0])


def stencil_projected_tangents(frames: Frame, table: NeighborTable, rows, projection_at="neighbor"):
    """P(x_{i,k}) T(x_i) for the given rows, shape (B, K, n, d)."""
    T0 = frames.tangents[rows]
    if projection_at == "base":
        return np.broadcast_to(T0[:, None], (T0.shape[0], table.K) + T0.shape[1:]).copy()
    if projection_at != "neighbor":
        raise ValueError(f"projection_at must be 'base' or 'neighbor', not {projection_at!r}")
    P = frames.projections(table.indices[rows])                  # (B, K, n, n)
    return P @ T0[:, None]


def assemble_operator(cloud: PointCloud, table: NeighborTable, frames: Frame, l: int,
                      projection_at: str = "neighbor", chunk: int = ROW_CHUNK):
    """Raw GMLS Laplacian L_X and its per-row weights.

    Returns
    -------
    L : scipy.sparse.csr_matrix, N x N with K entries per row.
    table : WeightTable
    """
    X = cloud.ambient
    N, K = table.indices.shape
    d = frames.d
    m = comb(l + d, d)
    if K <= m:
        raise RankDeficientStencil(np.arange(N), f"K={K} must exceed m={m} for l={l}, d={d}")
    W = np.empty((N, K))
    Phi = np.empty((N, K, m))
    bad = []
    for s in range(0, N, chunk):
        rows = np.arange(s, min(s + chunk, N))
        coords = X[table.indices[rows]]
        PT0 = stencil_projected_tangents(frames, table, rows, projection_at)
        w, phi, ratio = _weights_batch(coords, frames.tangents[rows], PT0, l, return_phi=True)
        W[rows] = w
        Phi[rows] = phi
        bad.extend(rows[ratio < RANK_RTOL].tolist())
    if bad:
        raise RankDeficientStencil(bad)
    wt = WeightTable(table.indices, W, Phi, l)
    return to_csr(table.indices, W, N), wt


def to_csr(neighbors: np.ndarray, values: np.ndarray, N: int | None = None) -> sp.csr_matrix:
    """Sparse matrix whose row i holds ``values[i]`` at columns ``neighbors[i]``."""
    rows, K = neighbors.shape
    N = rows if N is None else N
    # copies: sort_indices permutes in place and must not touch the caller's arrays
    L = sp.csr_matrix((np.array(values, dtype=float).ravel(), np.array(neighbors).ravel(),
                       np.arange(0, rows * K + 1, K)), shape=(rows, N))
    L.sort_indices()
    return L


def forward_error(L, u: np.ndarray, lap_u: np.ndarray, rows=None) -> float:
    """max_i |lap_u_i - (L u)_i| over ``rows`` (all rows by default)."""
    r = np.abs(L @ u - lap_u)
    return float(np.max(r if rows is None else r[rows]))
