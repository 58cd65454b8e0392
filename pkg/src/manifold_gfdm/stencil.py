"""K-nearest-neighbour stencils and tangent-space estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ManifoldSpec, PointCloud, analytic_frame

# kd-trees lose their edge over a plain scan in high ambient dimension
KDTREE_MAX_DIM = 20


class StencilError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborTable:
    """Per-point K nearest neighbours, closest first, self in column 0."""

    indices: np.ndarray    # (N, K) int64
    distances: np.ndarray  # (N, K) float

    @property
    def N(self) -> int:
        return self.indices.shape[0]

    @property
    def K(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class Frame:
    """Orthonormal tangent bases, one (n, d) matrix per point."""

    tangents: np.ndarray                 # (N, n, d)
    provenance: str = "analytic"         # "analytic" | "estimated"
    flagged: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def N(self) -> int:
        return self.tangents.shape[0]

    @property
    def d(self) -> int:
        return self.tangents.shape[2]

    def projections(self, idx=None) -> np.ndarray:
        """P = T T^T at the selected points, shape (..., n, n)."""
        T = self.tangents if idx is None else self.tangents[idx]
        return T @ np.swapaxes(T, -1, -2)


def build_knn(cloud: PointCloud | np.ndarray, K: int) -> NeighborTable:
    """Exact K nearest neighbours under the Euclidean norm.

    Ties are broken in favour of the smaller point index, so the table is a
    deterministic function of the coordinates.
    """
    X = cloud.ambient if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    N = X.shape[0]
    if not 1 <= K <= N:
        raise StencilError(f"need 1 <= K <= N, got K={K}, N={N}")
    if X.shape[1] > KDTREE_MAX_DIM:
        return _knn_bruteforce(X, K)

    tree = cKDTree(X)
    kq = min(K + 1, N)
    dist, idx = tree.query(X, k=kq)
    dist = np.atleast_2d(dist).reshape(N, kq)
    idx = np.atleast_2d(idx).reshape(N, kq).astype(np.int64)
    # recompute distances the same way everywhere so tie detection is exact
    dist = np.sqrt(np.sum((X[idx] - X[:, None, :]) ** 2, axis=2))
    order = _batched_lexsort(dist, idx)
    dist = np.take_along_axis(dist, order, 1)
    idx = np.take_along_axis(idx, order, 1)

    if kq > K:
        # a tie straddling the K-th slot may hide equal-distance, smaller-index points
        suspect = np.nonzero(dist[:, K] <= dist[:, K - 1])[0]
        for i in suspect:
            cand = np.array(tree.query_ball_point(X[i], dist[i, K - 1] * (1 + 1e-12) + 1e-300),
                            dtype=np.int64)
            cd = np.sqrt(np.sum((X[cand] - X[i]) ** 2, axis=1))
            o = np.lexsort((cand, cd))[:K]
            idx[i, :K] = cand[o]
            dist[i, :K] = cd[o]
    return NeighborTable(np.ascontiguousarray(idx[:, :K]), np.ascontiguousarray(dist[:, :K]))


def _batched_lexsort(dist, idx):
    # stable argsort by index first, then by distance keeps the index order among ties
    o1 = np.argsort(idx, axis=1, kind="stable")
    d1 = np.take_along_axis(dist, o1, 1)
    o2 = np.argsort(d1, axis=1, kind="stable")
    return np.take_along_axis(o1, o2, 1)


def _knn_bruteforce(X: np.ndarray, K: int, chunk: int = 512) -> NeighborTable:
    N = X.shape[0]
    idx = np.empty((N, K), dtype=np.int64)
    dist = np.empty((N, K))
    cols = np.arange(N)
    for s in range(0, N, chunk):
        D = np.sqrt(np.sum((X[s:s + chunk, None, :] - X[None, :, :]) ** 2, axis=2))
        o = _batched_lexsort(D, np.broadcast_to(cols, D.shape))[:, :K]
        idx[s:s + chunk] = o
        dist[s:s + chunk] = np.take_along_axis(D, o, 1)
    return NeighborTable(idx, dist)


def default_kp(N: int) -> int:
    """2 sqrt(N), rounded to the nearest odd integer."""
    v = 2.0 * math.sqrt(N)
    k = int(round(v))
    if k % 2 == 0:
        k = k + 1 if v >= k else k - 1
    return max(k, 1)


def estimate_tangent(cloud: PointCloud, K_P: int, d: int | None = None,
                     table: NeighborTable | None = None, chunk: int = 2048,
                     order: int = 1) -> Frame:
    """Local SVD tangent estimate.

    For each point the K_P nearest neighbours are centred on their mean and
    the top ``d`` right singular vectors are taken as the tangent basis. Each
    vector is signed so that its first non-negligible component is positive.
    Points whose d-th singular value is below 1e-12 times the largest are
    returned in ``Frame.flagged``.

    With ``order`` p >= 2 the first-order basis is refined by fitting the
    normal offsets of the neighbours as a degree-p polynomial graph over the
    tangent coordinates and taking the tangent of the fitted graph at the
    point, which removes the curvature bias of the plain estimate up to
    O(h^p).
    """
    if int(order) != order or order < 1:
        raise StencilError(f"order must be a positive integer, got {order}")
    d = d if d is not None else cloud.d
    if d is None:
        raise StencilError("intrinsic dimension unknown")
    if K_P < d + 1:
        raise StencilError(f"K_P={K_P} must be at least d+1={d + 1}")
    X = cloud.ambient
    N, n = X.shape
    if table is None or table.K < K_P:
        table = build_knn(cloud, K_P)
    nbr = table.indices[:, :K_P]
    T = np.empty((N, n, d))
    flagged = []
    for s in range(0, N, chunk):
        Y = X[nbr[s:s + chunk]]
        Y = Y - Y.mean(axis=1, keepdims=True)
        _, sv, Vt = np.linalg.svd(Y, full_matrices=False)
        V = np.swapaxes(Vt[:, :d, :], 1, 2)
        if order >= 2:
            V = _graph_fit(X[nbr[s:s + chunk]], V, np.swapaxes(Vt[:, d:, :], 1, 2), order)
        T[s:s + chunk] = V
        if d <= sv.shape[1]:
            bad = sv[:, d - 1] < 1e-12 * sv[:, 0]
        else:
            bad = np.ones(sv.shape[0], dtype=bool)
        flagged.extend((np.nonzero(bad)[0] + s).tolist())
    _fix_signs(T)
    return Frame(T, "estimated", np.array(flagged, dtype=np.int64))


def _graph_fit(Y, T1, N1, order):
    # Y (B, K, n) with the base point in row 0; T1 (B, n, d), N1 (B, n, n-d)
    B, K, n = Y.shape
    d = T1.shape[2]
    if N1.shape[2] == 0:
        return T1
    D = Y - Y[:, :1, :]
    tau = np.einsum("bkn,bnd->bkd", D, T1)
    eta = np.einsum("bkn,bnc->bkc", D, N1)
    h = np.sqrt(np.max(np.sum(tau * tau, axis=2), axis=1))
    h = np.where(h > 0, h, 1.0)
    ts = tau / h[:, None, None]
    cols = [np.ones((B, K))]
    for deg in range(1, order + 1):
        # degree-1 terms land in columns 1..d, which is where the slope is read
        for combo in combinations_with_replacement(range(d), deg):
            cols.append(np.prod([ts[..., i] for i in combo], axis=0))
    A = np.stack(cols, axis=2)
    if K < A.shape[2]:
        return T1
    coef = np.linalg.lstsq(A[0], eta[0], rcond=None)[0] if B == 1 else None
    if coef is None:
        Q, R = np.linalg.qr(A)
        coef = np.linalg.solve(R, np.swapaxes(Q, 1, 2) @ eta)
    else:
        coef = coef[None]
    slope = coef[:, 1:d + 1, :] / h[:, None, None]          # (B, d, n-d)
    J = T1 + np.einsum("bnc,bdc->bnd", N1, slope)
    Q, R = np.linalg.qr(J)
    return Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]


def _fix_signs(T: np.ndarray, tol: float = 1e-12):
    # first component with |v_i| > tol * max|v| made positive, column by column
    big = np.abs(T) > tol * np.max(np.abs(T), axis=1, keepdims=True)
    first = np.argmax(big, axis=1)                          # (N, d)
    lead = np.take_along_axis(T, first[:, None, :], axis=1)  # (N, 1, d)
    T *= np.where(lead < 0, -1.0, 1.0)


def frames_for(cloud: PointCloud, source: str, K_P: int | None = None, order: int = 1) -> Frame:
    """Analytic frames when the manifold is known, otherwise local SVD."""
    if source == "analytic":
        if cloud.spec is None or not cloud.has_intrinsic:
            raise StencilError("analytic frames need a parametrised cloud")
        return Frame(analytic_frame(cloud.spec, cloud.intrinsic), "analytic")
    if source == "estimated":
        return estimate_tangent(cloud, K_P if K_P is not None else default_kp(cloud.N), order=order)
    raise StencilError(f"unknown frame source {source!r}")


def h_K_max(table: NeighborTable) -> np.ndarray:
    """Largest neighbour distance of each stencil."""
    return table.distances[:, -1].copy()


def estimate_fill_distance(spec: ManifoldSpec, cloud: PointCloud, probes: int, seed) -> float:
    """Monte-Carlo lower bound on the ambient fill distance of ``cloud``.

    Draws ``probes`` uniform parameter points and returns the largest
    distance from a probe to its nearest cloud point.
    """
    rng = np.random.default_rng(seed)
    P = spec.embed(spec.sample_parameters(probes, rng))
    return probe_fill_distance(cloud.ambient, P)


def probe_fill_distance(X: np.ndarray, probes: np.ndarray) -> float:
    dist, _ = cKDTree(X).query(probes, k=1)
    return float(np.max(dist))


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles between column spaces of orthonormal A and B (batched)."""
    M = np.swapaxes(A, -1, -2) @ B
    cos = np.linalg.svd(M, compute_uv=False)                     # descending
    sin = np.linalg.svd(B - A @ M, compute_uv=False)[..., ::-1]  # ascending, paired with cos
    # arccos loses half the digits near zero angle, arcsin near pi/2
    return np.where(cos ** 2 < 0.5, np.arccos(np.clip(cos, -1.0, 1.0)), np.arcsin(np.clip(sin, 0.0, 1.0)))
