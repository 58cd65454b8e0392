"""Row-wise linear-programming stabilization of least-squares Laplacian weights.

For a row with raw weights w (base point first) and basis values Phi, the
stabilized weights solve

    min C   s.t.  Phi^T w_hat = Phi^T w,   w_hat_1 <= 0,
                  w_hat_k + C >= 0 (k >= 2),   0 <= C <= |min_{k>=2} w_k|.

Substituting v_k = w_hat_k + C and y = -w_hat_1 puts every variable in
[0, cap], which is the form the simplex core expects. The minimiser is
rarely unique, so a second solve keeps C at its optimum and minimises
y + sum v, which excludes vertices with huge cancelling weights. Rows of the equality
system are scaled by their infinity norm and the unknowns by max|w|.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .gmls import RowWeights, WeightTable, to_csr
from .lp import OPTIMAL, STALLED, STATUS_NAMES, iteration_cap, simplex_std

C_TOL = 1e-6
WITNESS_RTOL = 1e-9


class InfeasibleRowError(RuntimeError):
    """The LP of a w1 < 0 row came back infeasible, which should not happen."""

    def __init__(self, base, w, status):
        self.base = int(base)
        self.w = np.asarray(w)
        super().__init__(f"stabilization LP {STATUS_NAMES.get(status, status)} at base point {base}; "
                         f"raw weights: {np.array2string(self.w, precision=17, max_line_width=200)}")


@dataclass
class StabilizedRow:
    w_hat: np.ndarray
    C: float
    feasible: bool
    diagonally_dominant: bool
    fallback_used: bool
    w1_zero: bool = False


@dataclass
class StabilizationReport:
    C: np.ndarray                 # per row, nan for skipped rows
    status: np.ndarray            # lp status per row, -1 when skipped
    fallback: np.ndarray          # bool per row
    skipped: np.ndarray           # rows with w1 >= 0 that were not solved
    w1_zero: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    iterations: int = 0

    @property
    def n_fallback(self) -> int:
        return int(np.count_nonzero(self.fallback))

    @property
    def max_C(self) -> float:
        c = self.C[np.isfinite(self.C)]
        return float(c.max()) if c.size else 0.0

    @property
    def n_nonzero_C(self) -> int:
        return int(np.count_nonzero(self.C > C_TOL))

    def summary(self) -> dict:
        c = self.C[np.isfinite(self.C)]
        return {
            "C_max": self.max_C,
            "C_mean": float(c.mean()) if c.size else 0.0,
            "C_nonzero": self.n_nonzero_C,
            "fallbacks": self.n_fallback,
            "skipped": int(self.skipped.size),
        }


def witness_violation(w) -> np.ndarray:
    """Constraint violation of the candidate (w_hat = w, C = |min_{k>=2} w_k|) relative to max|w|.

    The equality constraints hold identically for this candidate, so only
    the sign and bound constraints are measured. Accepts one row or a batch.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    scale = np.maximum(np.max(np.abs(w), axis=1), np.finfo(float).tiny)
    Cw = np.abs(np.min(w[:, 1:], axis=1))
    viol = np.maximum(w[:, 0], 0.0)
    viol = np.maximum(viol, -np.min(w[:, 1:] + Cw[:, None], axis=1))
    out = viol / scale
    return out if out.size > 1 else out.reshape(-1)[:1]


@njit(cache=True)
def _row_lp(phi, w, max_iter):
    K, m = phi.shape
    scale = 0.0
    for k in range(K):
        scale = max(scale, abs(w[k]))
    if scale == 0.0:
        scale = 1.0
    cmax = 0.0
    first = True
    for k in range(1, K):
        if first or w[k] < cmax:
            cmax = w[k]
            first = False
    cmax = abs(cmax) / scale
    A = np.empty((m, K + 1))
    b = np.empty(m)
    for j in range(m):
        s = 0.0
        tot = 0.0
        for k in range(1, K):
            s += phi[k, j]
        for k in range(K):
            tot += w[k] * phi[k, j]
        A[j, 0] = -s
        A[j, 1] = -phi[0, j]
        for k in range(1, K):
            A[j, k + 1] = phi[k, j]
        b[j] = tot / scale
        rn = 0.0
        for k in range(K + 1):
            rn = max(rn, abs(A[j, k]))
        if rn > 0.0:
            for k in range(K + 1):
                A[j, k] /= rn
            b[j] /= rn
    c = np.zeros(K + 1)
    c[0] = 1.0
    u = np.full(K + 1, np.inf)
    u[0] = cmax
    y, status, it = simplex_std(A, b, c, u, max_iter)
    if status == OPTIMAL:
        # the optimal set is often a face; among its points take the one
        # with the smallest weights (y + sum v) at the same C
        u[0] = y[0] * (1.0 + 1e-12)
        c2 = np.ones(K + 1)
        c2[0] = 0.0
        y2, st2, it2 = simplex_std(A, b, c2, u, max_iter)
        it += it2
        if st2 == OPTIMAL:
            y = y2
    out = np.empty(K)
    C = y[0] * scale
    out[0] = -y[1] * scale
    for k in range(1, K):
        out[k] = (y[k + 1] - y[0]) * scale
    return out, C, status, it


@njit(cache=True)
def _rows_lp(phi, w, rows, max_iter):
    R = rows.shape[0]
    K = w.shape[1]
    W = np.empty((R, K))
    C = np.empty(R)
    status = np.empty(R, dtype=np.int64)
    its = 0
    for r in range(R):
        i = rows[r]
        out, c, st, it = _row_lp(phi[i], w[i], max_iter)
        W[r] = out
        C[r] = c
        status[r] = st
        its += it
    return W, C, status, its


def _finish_row(phi, w, w_hat, C, status, base) -> StabilizedRow:
    cmax = abs(np.min(w[1:]))
    if status == STALLED:
        return StabilizedRow(w.copy(), cmax, True, cmax <= C_TOL, True)
    if status != OPTIMAL:
        raise InfeasibleRowError(base, w, status)
    return StabilizedRow(w_hat, C, True, C <= C_TOL, False, bool(w_hat[0] == 0.0))


def stabilize_row(raw: RowWeights, phi: np.ndarray, max_iter: int | None = None) -> StabilizedRow:
    """Solve the stabilization LP for one stencil.

    ``phi`` is the K x m matrix of basis values at the stencil points. The
    row must satisfy w1 < 0; the feasible witness is checked before solving.
    """
    w = np.asarray(raw.w, dtype=float)
    phi = np.ascontiguousarray(phi, dtype=float)
    if not w[0] < 0:
        raise ValueError(f"row {raw.base}: stabilization requires w1 < 0, got {w[0]!r}")
    if witness_violation(w)[0] > WITNESS_RTOL:
        raise InfeasibleRowError(raw.base, w, -1)
    cap = max_iter if max_iter is not None else iteration_cap(w.size + 1, phi.shape[1])
    w_hat, C, status, _ = _row_lp(phi, w, cap)
    return _finish_row(phi, w, w_hat, C, status, raw.base)


def stabilize_operator(table: WeightTable, force: bool = False, max_iter: int | None = None,
                       attempt_all: bool = False):
    """Stabilized operator L_hat with the raw sparsity pattern.

    Rows with w1 >= 0 keep their raw weights. They are reported as skipped,
    or as fallbacks when ``force`` is set. With ``attempt_all`` the LP is
    also tried on those rows (it is often still feasible); rows where it is
    not keep their raw weights and are marked as fallbacks.

    Returns
    -------
    L_hat : scipy.sparse.csr_matrix
    W_hat : (N, K) stabilized weights in neighbour order
    report : StabilizationReport
    """
    W = table.w
    N, K = W.shape
    m = table.phi.shape[2]
    solve = np.nonzero(W[:, 0] < 0)[0]
    skip = np.nonzero(~(W[:, 0] < 0))[0]
    if solve.size:
        viol = witness_violation(W[solve])
        if np.any(viol > WITNESS_RTOL):
            i = solve[np.argmax(viol)]
            raise InfeasibleRowError(i, W[i], -1)
    cap = max_iter if max_iter is not None else iteration_cap(K + 1, m)
    Ws, Cs, st, its = _rows_lp(table.phi, W, solve.astype(np.int64), cap)
    extra = np.empty(0, dtype=np.int64)
    if attempt_all and skip.size:
        We, Ce, se, ite = _rows_lp(table.phi, W, skip.astype(np.int64), cap)
        its += ite
        # infeasibility is expected here, so it downgrades to a fallback
        se = np.where(se == OPTIMAL, OPTIMAL, STALLED)
        solve = np.concatenate([solve, skip])
        Ws, Cs, st = np.vstack([Ws, We]), np.concatenate([Cs, Ce]), np.concatenate([st, se])
        extra, skip = skip, np.empty(0, dtype=np.int64)

    W_hat = W.copy()
    C = np.full(N, np.nan)
    status = np.full(N, -1, dtype=np.int64)
    fallback = np.zeros(N, dtype=bool)
    bad = np.nonzero((st != OPTIMAL) & (st != STALLED))[0]
    if bad.size:
        i = solve[bad[0]]
        raise InfeasibleRowError(i, W[i], st[bad[0]])
    ok = st == OPTIMAL
    W_hat[solve[ok]] = Ws[ok]
    C[solve] = np.where(ok, Cs, np.abs(np.min(W[solve, 1:], axis=1)))
    if extra.size:
        # a failed w1 >= 0 row keeps raw weights and has no meaningful C
        failed = extra[~ok[-extra.size:]]
        C[failed] = np.nan
    status[solve] = st
    fallback[solve[~ok]] = True
    if force:
        fallback[skip] = True
    w1_zero = solve[ok][Ws[ok, 0] == 0.0]
    report = StabilizationReport(C, status, fallback, skip, w1_zero, int(its))
    return to_csr(table.neighbors, W_hat, N), W_hat, report


def diagonal_dominance_gap(W_hat: np.ndarray) -> np.ndarray:
    """|w_1| - sum_{k>=2} |w_k| per row (nonnegative means dominant)."""
    return np.abs(W_hat[:, 0]) - np.sum(np.abs(W_hat[:, 1:]), axis=1)


def write_c_values(path, report: StabilizationReport):
    """CSV with columns index, C, feasible, fallback."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "C", "feasible", "fallback"])
        for i in range(report.C.size):
            solved = report.status[i] >= 0
            c = report.C[i]
            wr.writerow([i, "" if not np.isfinite(c) else format(c, ".17g"),
                         int(solved and not report.fallback[i]), int(report.fallback[i])])
