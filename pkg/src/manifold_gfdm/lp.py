"""Dense bounded-variable primal simplex (Bland's rule), compiled with numba.

The core works on the standard form

    min c^T y   s.t.  A y = b,  0 <= y <= u   (u may be +inf)

and :func:`lp_solve` maps general bounds onto it. Problems here are small
(tens of rows and columns) but there are many of them, so the tableau is
dense and the whole solve stays inside compiled code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

OPTIMAL, INFEASIBLE, UNBOUNDED, STALLED = 0, 1, 2, 3
STATUS_NAMES = {OPTIMAL: "optimal", INFEASIBLE: "infeasible", UNBOUNDED: "unbounded",
                STALLED: "stalled"}

DUAL_TOL = 1e-10
PIVOT_TOL = 1e-10


@dataclass
class LpProblem:
    """min c.x subject to A_eq x = b_eq and lower <= x <= upper."""

    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))
        n = self.c.size
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if self.A_eq.shape != (self.b_eq.size, n):
            raise ValueError(f"A_eq has shape {self.A_eq.shape}, expected ({self.b_eq.size}, {n})")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(np.isposinf(self.lower)) or np.any(np.isneginf(self.upper)):
            raise ValueError("bounds must allow a finite value")


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    status: int
    iterations: int

    @property
    def status_name(self) -> str:
        return STATUS_NAMES[self.status]


@njit(cache=True)
def _price(T, cost, basic, nonbasic_ok, atU, u, m, nt):
    # Bland: first improving column
    for j in range(nt):
        if not nonbasic_ok[j]:
            continue
        d = cost[j]
        for i in range(m):
            d -= cost[basic[i]] * T[i, j]
        if (not atU[j]) and d < -DUAL_TOL and u[j] > 0.0:
            return j, 1.0
        if atU[j] and d > DUAL_TOL:
            return j, -1.0
    return -1, 0.0


@njit(cache=True)
def _pivot(T, beta, r, j):
    m, nt = T.shape
    p = T[r, j]
    for k in range(nt):
        T[r, k] /= p
    for i in range(m):
        if i == r:
            continue
        f = T[i, j]
        if f != 0.0:
            for k in range(nt):
                T[i, k] -= f * T[r, k]
            T[i, j] = 0.0
    T[r, j] = 1.0


@njit(cache=True)
def _run_phase(T, beta, basic, isbasic, atU, u, cost, max_iter, it0, allow_unbounded):
    m, nt = T.shape
    it = it0
    nonbasic_ok = np.empty(nt, dtype=np.bool_)
    while True:
        if it >= max_iter:
            return STALLED, it
        for j in range(nt):
            nonbasic_ok[j] = not isbasic[j]
        j, sgn = _price(T, cost, basic, nonbasic_ok, atU, u, m, nt)
        if j < 0:
            return OPTIMAL, it
        it += 1
        # ratio test; a tie with the entering bound keeps the flip, ties between
        # basic rows go to the smallest variable index
        tmin = u[j]
        r = -1
        leave_up = False
        for i in range(m):
            a = sgn * T[i, j]
            if a > PIVOT_TOL:
                t = max(beta[i], 0.0) / a
                up = False
            elif a < -PIVOT_TOL and np.isfinite(u[basic[i]]):
                t = max(u[basic[i]] - beta[i], 0.0) / (-a)
                up = True
            else:
                continue
            eps = 1e-12 * (1.0 + t)
            if t < tmin - eps or (r >= 0 and t <= tmin + eps and basic[i] < basic[r]):
                tmin = t
                r = i
                leave_up = up
        if r < 0 and not np.isfinite(tmin):
            if allow_unbounded:
                return UNBOUNDED, it
            return STALLED, it
        for i in range(m):
            beta[i] -= sgn * tmin * T[i, j]
        if r < 0:
            # bound flip of the entering variable
            atU[j] = not atU[j]
            continue
        entering_val = (u[j] if atU[j] else 0.0) + sgn * tmin
        lv = basic[r]
        _pivot(T, beta, r, j)
        beta[r] = entering_val
        basic[r] = j
        isbasic[j] = True
        isbasic[lv] = False
        atU[lv] = leave_up
        atU[j] = False


@njit(cache=True)
def simplex_std(A, b, c, u, max_iter):
    """Solve min c.y, A y = b, 0 <= y <= u. Returns (y, status, iterations)."""
    m, n = A.shape
    nt = n + m
    T = np.zeros((m, nt))
    beta = np.empty(m)
    for i in range(m):
        s = 1.0 if b[i] >= 0.0 else -1.0
        for k in range(n):
            T[i, k] = s * A[i, k]
        T[i, n + i] = 1.0
        beta[i] = s * b[i]
    uu = np.empty(nt)
    uu[:n] = u
    uu[n:] = np.inf
    basic = np.empty(m, dtype=np.int64)
    isbasic = np.zeros(nt, dtype=np.bool_)
    for i in range(m):
        basic[i] = n + i
        isbasic[n + i] = True
    atU = np.zeros(nt, dtype=np.bool_)
    y = np.zeros(n)

    cost1 = np.zeros(nt)
    cost1[n:] = 1.0
    status, it = _run_phase(T, beta, basic, isbasic, atU, uu, cost1, max_iter, 0, False)
    if status != OPTIMAL:
        return y, status, it
    infeas = 0.0
    bnorm = 1.0
    for i in range(m):
        bnorm = max(bnorm, abs(b[i]))
        if basic[i] >= n:
            infeas += abs(beta[i])
    for j in range(n, nt):
        if atU[j]:
            return y, INFEASIBLE, it
    if infeas > 1e-9 * bnorm:
        return y, INFEASIBLE, it

    # artificials stay pinned at zero for phase 2
    for j in range(n, nt):
        uu[j] = 0.0
    cost2 = np.zeros(nt)
    cost2[:n] = c
    status, it = _run_phase(T, beta, basic, isbasic, atU, uu, cost2, max_iter, it, True)
    if status != OPTIMAL:
        return y, status, it

    for j in range(n):
        if not isbasic[j] and atU[j]:
            y[j] = u[j]
    # refinement: recompute basic values from the original data
    Ab = np.zeros((m, m))
    rhs = b.copy()
    for j in range(n):
        if not isbasic[j] and y[j] != 0.0:
            for i in range(m):
                rhs[i] -= A[i, j] * y[j]
    for k in range(m):
        j = basic[k]
        if j < n:
            for i in range(m):
                Ab[i, k] = A[i, j]
        else:
            Ab[j - n, k] = 1.0 if b[j - n] >= 0.0 else -1.0
    xb = np.linalg.solve(Ab, rhs)
    bnorm = 1.0
    for i in range(m):
        bnorm = max(bnorm, abs(b[i]))
    for k in range(m):
        j = basic[k]
        v = xb[k]
        if j >= n:
            if abs(v) > 1e-9 * bnorm:
                return y, STALLED, it
            continue
        # a basic value well outside its bounds means the basis went numerically singular
        if v < -1e-9 * bnorm or v > u[j] + 1e-9 * bnorm:
            return y, STALLED, it
        y[j] = min(max(v, 0.0), u[j])
    for i in range(m):
        r = -b[i]
        for j in range(n):
            r += A[i, j] * y[j]
        if abs(r) > 1e-9 * bnorm:
            return y, STALLED, it
    return y, OPTIMAL, it


def iteration_cap(n_vars: int, n_rows: int) -> int:
    return 10_000 * (n_vars + n_rows)


def lp_solve(problem: LpProblem, max_iter: int | None = None) -> LpResult:
    """Solve a general bounded LP with the compiled simplex."""
    c, A, b = problem.c, problem.A_eq, problem.b_eq
    lo, hi = problem.lower, problem.upper
    n = c.size
    cols, signs, shifts, caps, src = [], [], [], [], []
    for j in range(n):
        if np.isfinite(lo[j]):
            cols.append(A[:, j]); signs.append(1.0); shifts.append(lo[j]); caps.append(hi[j] - lo[j]); src.append(j)
        elif np.isfinite(hi[j]):
            cols.append(-A[:, j]); signs.append(-1.0); shifts.append(hi[j]); caps.append(np.inf); src.append(j)
        else:
            cols.append(A[:, j]); signs.append(1.0); shifts.append(0.0); caps.append(np.inf); src.append(j)
            cols.append(-A[:, j]); signs.append(-1.0); shifts.append(0.0); caps.append(np.inf); src.append(j)
    As = np.ascontiguousarray(np.column_stack(cols)) if cols else np.zeros((b.size, 0))
    signs = np.array(signs)
    shifts = np.array(shifts)
    src = np.array(src, dtype=np.int64)
    cs = c[src] * signs
    x0 = np.zeros(n)
    x0[src] = shifts  # split free variables carry a zero shift
    bs = b - A @ x0
    cap = max_iter if max_iter is not None else iteration_cap(As.shape[1], b.size)
    y, status, it = simplex_std(As, bs, cs, np.array(caps), cap)
    x = x0.copy()
    np.add.at(x, src, signs * y)
    obj = float(c @ x) if status == OPTIMAL else np.nan
    return LpResult(x if status == OPTIMAL else np.full(n, np.nan), obj, int(status), int(it))
