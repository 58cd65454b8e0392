"""Boundary detection, Poisson solves and sparse linear algebra helpers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from .geometry import GeometryError, ManifoldSpec, PointCloud, boundary_distance

RESIDUAL_RTOL = 1e-10
REFINE_STEPS = 3


class SolveError(RuntimeError):
    def __init__(self, message, residuals=()):
        self.residuals = list(residuals)
        if self.residuals:
            message += "; residual history " + ", ".join(f"{r:.3e}" for r in self.residuals)
        super().__init__(message)


@dataclass
class InteriorSplit:
    """Y = {w1 < 0} and its complement; eps_star when the boundary is known."""

    Y: np.ndarray
    complement: np.ndarray
    eps_star: float | None = None
    n_w1_zero: int = 0

    @property
    def N(self) -> int:
        return self.Y.size + self.complement.size

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.N, dtype=bool)
        m[self.Y] = True
        return m


@dataclass
class Solution:
    U: np.ndarray
    residual: float
    backward_error: float
    stats: dict = field(default_factory=dict)


def detect_interior(w1, cloud: PointCloud | None = None, spec: ManifoldSpec | None = None) -> InteriorSplit:
    """Interior set from the sign of the raw diagonal weights.

    ``w1`` is the array of self-weights (or a WeightTable). A weight of
    exactly zero counts as boundary. For a manifold with boundary and a
    parametrised cloud, eps_star is the largest boundary distance over the
    flagged points.
    """
    w1 = np.asarray(getattr(w1, "w1", w1), dtype=float)
    inside = w1 < 0
    Y = np.nonzero(inside)[0]
    comp = np.nonzero(~inside)[0]
    eps = None
    spec = spec if spec is not None else getattr(cloud, "spec", None)
    if spec is not None and spec.has_boundary and cloud is not None and cloud.has_intrinsic:
        bd = boundary_distance(spec, cloud.intrinsic[comp]) if comp.size else np.zeros(0)
        eps = float(bd.max()) if bd.size else 0.0
    return InteriorSplit(Y, comp, eps, int(np.count_nonzero(w1 == 0)))


def restrict_eps(cloud: PointCloud, spec: ManifoldSpec, eps: float) -> np.ndarray:
    """Indices whose boundary distance exceeds ``eps``."""
    if not spec.has_boundary:
        raise GeometryError("restrict_eps needs a manifold with boundary")
    return np.nonzero(boundary_distance(spec, cloud.intrinsic) > eps)[0]


def sparse_solve(A, b, refine: int = REFINE_STEPS, lu=None):
    """Direct sparse LU solve with a few steps of iterative refinement.

    The residual is accepted when it is below 1e-10 * max(1, |b|_inf) or when
    the normwise backward error |r| / (|A| |x| + |b|) is below 1e-10; the
    second test covers operators whose entries are far above unit size.
    Returns (x, stats).
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise SolveError(f"matrix must be square, got {A.shape}")
    if lu is None:
        try:
            lu = splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolveError(f"sparse LU failed: {exc}") from exc
        piv = np.abs(lu.U.diagonal())
        if piv.size and (not np.all(np.isfinite(piv)) or piv.min() == 0.0):
            k = int(np.argmin(piv))
            raise SolveError(f"numerically singular: pivot {k} = {piv[k]:.3e}, largest {piv.max():.3e}")
    x = lu.solve(b)
    anorm = abs(A).sum(axis=1).max() if n else 0.0
    bnorm = np.max(np.abs(b), initial=0.0)
    hist = []
    for _ in range(refine + 1):
        r = b - A @ x
        rn = float(np.max(np.abs(r), initial=0.0))
        hist.append(rn)
        if rn <= RESIDUAL_RTOL * max(1.0, bnorm):
            break
        x = x + lu.solve(r)
    rn = hist[-1]
    eta = rn / max(anorm * np.max(np.abs(x), initial=0.0) + bnorm, 1e-300)
    if not np.all(np.isfinite(x)) or (rn > RESIDUAL_RTOL * max(1.0, bnorm) and eta > RESIDUAL_RTOL):
        raise SolveError("residual contract not met", hist)
    return x, {"residual": rn, "backward_error": eta, "refinements": len(hist) - 1, "lu": lu}


def solve_closed(L_hat, a, f) -> Solution:
    """Solve (diag(a) - L_hat) U = f on a closed manifold."""
    a = np.broadcast_to(np.asarray(a, dtype=float), (L_hat.shape[0],))
    if np.any(a <= 0):
        raise ValueError("the shift a must be positive at every point")
    A = sp.diags(a) - sp.csr_matrix(L_hat)
    U, st = sparse_solve(A, f)
    return Solution(U, st["residual"], st["backward_error"],
                    {"refinements": st["refinements"], "n": U.size})


def solve_dirichlet(L_hat, S, f) -> Solution:
    """Volume-constrained solve: L_hat[S, S] U_S = f_S and U = 0 off S."""
    L_hat = sp.csr_matrix(L_hat)
    S = np.asarray(S, dtype=np.int64)
    f = np.asarray(f, dtype=float)
    N = L_hat.shape[0]
    U = np.zeros(N)
    if S.size == 0:
        return Solution(U, 0.0, 0.0, {"n": 0})
    A = L_hat[S][:, S]
    try:
        U[S], st = sparse_solve(A, f[S])
    except SolveError as exc:
        raise SolveError(f"restricted system on {S.size} rows failed ({exc}); "
                         "the row set probably contains boundary-adjacent rows") from exc
    return Solution(U, st["residual"], st["backward_error"],
                    {"refinements": st["refinements"], "n": int(S.size)})


def inv_norm_estimate(A) -> float:
    """Estimate of ||A^{-1}||_inf, computed as the 1-norm of A^{-T}.

    Uses the block 1-norm estimator with LU solves; like any such estimate
    it is a lower bound, normally within a factor of 3.
    """
    A = sp.csc_matrix(A)
    n = A.shape[0]
    lu = splu(A, permc_spec="COLAMD")
    op = LinearOperator((n, n), matvec=lambda x: lu.solve(np.asarray(x, float).ravel(), trans="T"),
                        rmatvec=lambda x: lu.solve(np.asarray(x, float).ravel()), dtype=float)
    if n <= 4:
        return float(np.max(np.abs(np.linalg.inv(A.toarray())).sum(axis=1)))
    return float(onenormest(op))


@dataclass
class MaxPrincipleReport:
    applicable: bool
    max_ok: bool
    min_ok: bool
    violations: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_ok and self.min_ok


def stencil_closure(L, S) -> np.ndarray:
    """Columns touched by rows S that lie outside S."""
    L = sp.csr_matrix(L)
    S = np.asarray(S, dtype=np.int64)
    cols = np.unique(L[S].indices)
    return np.setdiff1d(cols, S, assume_unique=True)


def check_discrete_max_principle(L_hat, S, v, tol: float = 1e-9) -> MaxPrincipleReport:
    """Check the discrete maximum and minimum principles for rows S.

    If (L v)_i >= 0 on S the maximum of v over S and its stencil closure must
    be attained on the closure; symmetrically for the minimum when
    (L v)_i <= 0. A principle whose hypothesis fails is reported as holding
    (there is nothing to check). ``violations`` lists points of S exceeding
    the closure extremum.
    """
    L_hat = sp.csr_matrix(L_hat)
    S = np.asarray(S, dtype=np.int64)
    v = np.asarray(v, dtype=float)
    ext = stencil_closure(L_hat, S)
    if ext.size == 0 or S.size == 0:
        return MaxPrincipleReport(False, True, True, np.empty(0, dtype=np.int64))
    Lv = L_hat[S] @ v
    scale = tol * max(1.0, np.max(np.abs(v)))
    lscale = tol * max(1.0, float(abs(L_hat[S]).sum(axis=1).max()) * np.max(np.abs(v)))
    bad = []
    max_ok = min_ok = True
    if np.all(Lv >= -lscale):
        top = v[ext].max()
        over = S[v[S] > top + scale]
        if over.size:
            max_ok = False
            bad.append(over)
    if np.all(Lv <= lscale):
        bot = v[ext].min()
        under = S[v[S] < bot - scale]
        if under.size:
            min_ok = False
            bad.append(under)
    viol = np.unique(np.concatenate(bad)) if bad else np.empty(0, dtype=np.int64)
    return MaxPrincipleReport(True, max_ok, min_ok, viol)


def write_solution_csv(path, U, intrinsic=None, u_exact=None):
    """Columns: index, intrinsic coordinates (if known), U, u_exact and |U - u| (if known)."""
    U = np.asarray(U, dtype=float)
    d = 0 if intrinsic is None else np.asarray(intrinsic).reshape(U.size, -1).shape[1]
    head = ["index"] + [f"s{j + 1}" for j in range(d)] + ["U"]
    if u_exact is not None:
        head += ["u_exact", "abs_error"]
    fmt = lambda x: format(float(x), ".17g")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(head)
        for i in range(U.size):
            row = [i]
            if d:
                row += [fmt(x) for x in np.asarray(intrinsic).reshape(U.size, -1)[i]]
            row.append(fmt(U[i]))
            if u_exact is not None:
                row += [fmt(u_exact[i]), fmt(abs(U[i] - u_exact[i]))]
            wr.writerow(row)
