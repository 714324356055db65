"""Dense two-phase tableau simplex with Bland's anti-cycling rule.

Solves ``min c^T x  s.t.  A x = b, x >= 0``. Meant for the small LP
relaxations inside branch-and-bound, not for large sparse problems.
"""

from dataclasses import dataclass

import numpy as np

TOL = 1e-9


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded" | "iteration_limit"
    x: np.ndarray | None
    fun: float
    nit: int


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    factor = T[:, col].copy()
    factor[row] = 0.0
    T -= np.outer(factor, T[row])


def _run(T: np.ndarray, basis: np.ndarray, n_cols: int, max_iter: int):
    """Iterate on tableau T (last row = reduced costs, last column = rhs)."""
    nit = 0
    m = len(basis)
    while True:
        cost = T[-1, :n_cols]
        entering = np.flatnonzero(cost < -TOL)
        if len(entering) == 0:
            return "optimal", nit
        if nit >= max_iter:
            return "iteration_limit", nit
        col = int(entering[0])
        colv = T[:m, col]
        pos = np.flatnonzero(colv > TOL)
        if len(pos) == 0:
            return "unbounded", nit
        ratios = T[pos, -1] / colv[pos]
        best = ratios.min()
        tied = pos[ratios <= best + TOL * max(1.0, abs(best))]
        row = int(tied[np.argmin(basis[tied])])
        _pivot(T, row, col)
        basis[row] = col
        nit += 1


def simplex(c, A_eq, b_eq, max_iter: int = 50_000) -> LPResult:
    c = np.asarray(c, dtype=np.float64)
    A = np.array(A_eq, dtype=np.float64, ndmin=2)
    b = np.array(b_eq, dtype=np.float64).reshape(-1)
    m, n = A.shape
    if m == 0:
        if np.any(c < -TOL):
            return LPResult("unbounded", None, -np.inf, 0)
        return LPResult("optimal", np.zeros(n), 0.0, 0)
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # Phase I: artificials n..n+m-1.
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = np.arange(n, n + m)
    status, nit = _run(T, basis, n + m, max_iter)
    if status == "iteration_limit":
        return LPResult(status, None, np.nan, nit)
    if -T[-1, -1] > 1e-7 * max(1.0, b.sum()):
        return LPResult("infeasible", None, np.nan, nit)

    # Drive artificial variables out of the basis; drop redundant rows.
    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if basis[r] >= n:
            cand = np.flatnonzero(np.abs(T[r, :n]) > TOL)
            if len(cand):
                _pivot(T, r, int(cand[0]))
                basis[r] = cand[0]
            else:
                keep[r] = False
    rows = np.flatnonzero(keep)
    T2 = np.zeros((len(rows) + 1, n + 1))
    T2[:-1, :n] = T[rows, :n]
    T2[:-1, -1] = T[rows, -1]
    basis = basis[rows]
    T2[-1, :n] = c
    for r, j in enumerate(basis):
        if T2[-1, j] != 0.0:
            T2[-1] -= T2[-1, j] * T2[r]

    status, nit2 = _run(T2, basis, n, max_iter - nit)
    nit += nit2
    if status != "optimal":
        return LPResult(status, None, np.nan if status != "unbounded" else -np.inf, nit)
    x = np.zeros(n)
    x[basis] = T2[:-1, -1]
    x[np.abs(x) < TOL] = 0.0
    return LPResult("optimal", x, float(c @ x), nit)
