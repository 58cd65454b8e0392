"""Reference estimators used for comparison: Matern RBF-FD and variable-bandwidth diffusion maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .geometry import PointCloud
from .gmls import RowWeights, to_csr
from .stencil import Frame, NeighborTable, build_knn

RBF_COND_MAX = 1e12


class RbfConditioningError(np.linalg.LinAlgError):
    def __init__(self, rows, conds, s):
        self.rows = np.atleast_1d(rows)
        self.conds = np.atleast_1d(conds)
        super().__init__(f"RBF interpolation matrix condition {self.conds.max():.3e} exceeds "
                         f"{RBF_COND_MAX:.0e} at {self.rows.size} stencil(s), e.g. {self.rows[:10].tolist()}; "
                         f"try a larger shape parameter than s={s}")


class VbdmTuningError(RuntimeError):
    pass


@dataclass(frozen=True)
class RbfConfig:
    s: float = 0.5
    K: int = 41

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("shape parameter s must be positive")


def matern(r, s):
    """(1 + s r) exp(-s r)."""
    sr = s * np.asarray(r, dtype=float)
    return (1.0 + sr) * np.exp(-sr)


def matern_dr_over_r(r, s):
    """phi'(r) / r = -s^2 exp(-s r), finite at r = 0."""
    return -s * s * np.exp(-s * np.asarray(r, dtype=float))


def _rbf_batch(coords, P, s):
    # coords (B, K, n); P (B, K, n, n) projections at the stencil points
    D = coords[:, :, None, :] - coords[:, None, :, :]          # x_j - x_k
    r = np.sqrt(np.sum(D * D, axis=3))
    A = matern(r, s)
    cond = np.linalg.cond(A)
    g = matern_dr_over_r(r, s)
    # B[b, j, k, l] = phi'(r)/r * [P(x_j) (x_j - x_k)]_l
    Bm = g[..., None] * np.einsum("bjln,bjkn->bjkl", P, D)
    Ainv = np.linalg.inv(A)
    a = np.einsum("bkl,bkq->blq", Bm[:, 0], Ainv)               # row 0 of G_l
    c = np.einsum("blq,bqkl->bk", a, Bm)
    w = np.einsum("bk,bkq->bq", c, Ainv)
    return w, cond


def rbf_fd_row_weights(coords, projections, config: RbfConfig, base: int = 0,
                       neighbors=None) -> RowWeights:
    """Matern RBF-FD Laplacian weights for one stencil (base point first)."""
    coords = np.asarray(coords, dtype=float)
    w, cond = _rbf_batch(coords[None], np.asarray(projections, float)[None], config.s)
    if not cond[0] <= RBF_COND_MAX:
        raise RbfConditioningError([base], cond, config.s)
    nb = np.arange(coords.shape[0]) if neighbors is None else np.asarray(neighbors)
    return RowWeights(base, nb, w[0])


def rbf_fd_operator(cloud: PointCloud, table: NeighborTable, frames: Frame, config: RbfConfig,
                    chunk: int = 256):
    """Sparse RBF-FD Laplacian. Returns (L, weights (N, K), condition numbers (N,))."""
    X = cloud.ambient
    N, K = table.indices.shape
    W = np.empty((N, K))
    conds = np.empty(N)
    for s0 in range(0, N, chunk):
        rows = np.arange(s0, min(s0 + chunk, N))
        idx = table.indices[rows]
        W[rows], conds[rows] = _rbf_batch(X[idx], frames.projections(idx), config.s)
    bad = np.nonzero(~(conds <= RBF_COND_MAX))[0]
    if bad.size:
        raise RbfConditioningError(bad, conds[bad], config.s)
    return to_csr(table.indices, W, N), W, conds


# -- variable-bandwidth diffusion maps ---------------------------------------

# neighbour counts for N = 800 * 2^j
VBDM_K2 = (15, 20, 28, 40, 55, 70)
VBDM_K1 = (30, 40, 56, 80, 110, 140)
EPS_GRID = 2.0 ** np.arange(-20.0, 10.0 + 1e-9, 1.0)
EPS_REFINE = 4  # sub-steps per octave around the coarse optimum


@dataclass(frozen=True)
class VbdmConfig:
    k1: int
    k2: int
    d: int
    eps: float | None = None        # None selects by the kernel-sum criterion
    eps0: float | None = None
    beta: float = -0.5

    @property
    def alpha(self) -> float:
        return -self.d / 4.0 + 0.5

    def __post_init__(self):
        if not 2 <= self.k2 <= self.k1:
            raise ValueError(f"need 2 <= k2 <= k1, got k2={self.k2}, k1={self.k1}")

    @classmethod
    def for_size(cls, N: int, d: int) -> "VbdmConfig":
        """Neighbour counts used for the semi-torus sweep, extrapolated geometrically."""
        j = np.log2(N / 800.0)
        if abs(j - round(j)) < 1e-9 and 0 <= round(j) < len(VBDM_K1):
            return cls(VBDM_K1[int(round(j))], VBDM_K2[int(round(j))], d)
        k2 = max(2, int(round(15 * 2 ** (0.5 * j))))
        return cls(2 * k2, k2, d)


@dataclass
class EpsSelection:
    eps: float
    slope: float
    grid: np.ndarray
    slopes: np.ndarray


def kernel_sum_slopes(sqdist: np.ndarray, grid=EPS_GRID, factor: float = 4.0):
    """d log T / d log eps with T(eps) = sum exp(-sqdist / (factor eps)), at grid midpoints."""
    sq = np.asarray(sqdist, dtype=float).ravel()
    logT = np.array([logsumexp(-sq / (factor * e)) for e in grid])
    mid = np.sqrt(grid[1:] * grid[:-1])
    return mid, np.diff(logT) / np.diff(np.log(grid))


def select_eps(sqdist, grid=EPS_GRID, factor: float = 4.0, refine: int = EPS_REFINE) -> EpsSelection:
    """Grid point of steepest kernel-sum growth.

    The coarse grid is scanned first; the octaves on either side of its
    optimum are then rescanned with ``refine`` steps per octave.
    """
    mid, sl = kernel_sum_slopes(sqdist, grid, factor)
    if not np.all(np.isfinite(sl)) or np.ptp(sl) <= 1e-12:
        raise VbdmTuningError("flat kernel-sum criterion over eps grid "
                              f"[{grid[0]:.3e}, {grid[-1]:.3e}] ({grid.size} values)")
    k = int(np.argmax(sl))
    if refine > 1:
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 2, grid.size - 1)]
        fine = lo * 2.0 ** (np.arange(0, round(refine * np.log2(hi / lo)) + 1) / refine)
        mid, sl = kernel_sum_slopes(sqdist, fine, factor)
        k = int(np.argmax(sl))
    return EpsSelection(float(mid[k]), float(sl[k]), mid, sl)


def _knn_graph(cloud, k):
    X = cloud.ambient if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    return build_knn(X, min(k, X.shape[0]))


def vbdm_autotune_eps(cloud, config: VbdmConfig, table: NeighborTable | None = None) -> EpsSelection:
    """Bandwidth for the main kernel by the kernel-sum slope criterion."""
    table = table if table is not None else _knn_graph(cloud, config.k1)
    rho, _ = _bandwidth(table, config)
    E = table.distances ** 2 / (rho[:, None] * rho[table.indices])
    return select_eps(E, factor=4.0)


def _bandwidth(table: NeighborTable, config: VbdmConfig):
    dist, idx = table.distances, table.indices
    rho0 = np.sqrt(np.mean(dist[:, 1:config.k2] ** 2, axis=1))
    E0 = dist ** 2 / (rho0[:, None] * rho0[idx])
    eps0 = config.eps0 if config.eps0 is not None else select_eps(E0, factor=2.0).eps
    Q = np.sum(np.exp(-E0 / (2.0 * eps0)), axis=1) / rho0 ** config.d
    return Q ** config.beta, eps0


def vbdm_laplacian(cloud, config: VbdmConfig, table: NeighborTable | None = None):
    """Variable-bandwidth diffusion-maps estimate of the Laplace-Beltrami operator.

    Returns (L, info) where L is sparse with zero row sums and info holds the
    selected bandwidths and the bandwidth function rho.
    """
    table = table if table is not None else _knn_graph(cloud, config.k1)
    if table.K < config.k1:
        raise ValueError(f"neighbour table has K={table.K} < k1={config.k1}")
    N = table.N
    idx = table.indices[:, :config.k1]
    dist = table.distances[:, :config.k1]
    sub = NeighborTable(idx, dist)
    rho, eps0 = _bandwidth(sub, config)
    E = dist ** 2 / (rho[:, None] * rho[idx])
    if config.eps is not None:
        eps, slope = config.eps, np.nan
    else:
        sel = select_eps(E, factor=4.0)
        eps, slope = sel.eps, sel.slope
    Kt = to_csr(idx, np.exp(-E / (4.0 * eps)), N)
    Kt = Kt.maximum(Kt.T).tocsr()
    Qr = np.asarray(Kt.sum(axis=1)).ravel() / rho ** config.d
    qa = Qr ** (-config.alpha)
    Ka = sp.diags(qa) @ Kt @ sp.diags(qa)
    Dinv = 1.0 / np.asarray(Ka.sum(axis=1)).ravel()
    L = sp.diags(1.0 / (eps * rho ** 2)) @ (sp.diags(Dinv) @ Ka - sp.identity(N))
    L = sp.csr_matrix(L)
    L.sort_indices()
    return L, {"eps": eps, "eps0": eps0, "slope": slope, "rho": rho}
