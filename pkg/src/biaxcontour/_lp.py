"""Thin linear-programming kernel shared by every set predicate.

All polytope queries route through this module, so the feasibility
tolerance is fixed in one place. :class:`Session` keeps one solver instance
alive so that repeated solves over the same rows are hot-started.
"""

from __future__ import annotations

from dataclasses import dataclass

import highspy
import numpy as np

FEAS_TOL = 1e-9

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

_INF = highspy.kHighsInf
_MS = highspy.HighsModelStatus
_KNOWN = (_MS.kOptimal, _MS.kInfeasible, _MS.kUnbounded, _MS.kUnboundedOrInfeasible)


class LPError(RuntimeError):
    """The LP backend failed for a reason other than infeasibility or unboundedness."""


@dataclass(frozen=True)
class LPResult:
    status: str
    value: float
    x: np.ndarray | None


def _bound_arrays(n, bounds):
    lo = np.full(n, -_INF)
    hi = np.full(n, _INF)
    if bounds is not None:
        for j, (l, u) in enumerate(bounds):
            if l is not None and np.isfinite(l):
                lo[j] = l
            if u is not None and np.isfinite(u):
                hi[j] = u
    return lo, hi


class Session:
    """Persistent LP ``max c.x  s.t.  A x <= b, lower <= x <= upper``.

    Rows can be appended and the trailing row removed; the objective is set
    per solve so consecutive solves warm-start from the previous basis.
    """

    def __init__(self, n: int, bounds=None):
        self.n = int(n)
        self._h = highspy.Highs()
        h = self._h
        h.setOptionValue("output_flag", False)
        h.setOptionValue("primal_feasibility_tolerance", FEAS_TOL)
        h.setOptionValue("presolve", "off")
        lo, hi = _bound_arrays(self.n, bounds)
        h.addVars(self.n, lo, hi)
        self._idx = np.arange(self.n, dtype=np.int32)
        self.rows = 0

    def add_rows(self, A, b) -> None:
        A = np.asarray(A, dtype=float).reshape(-1, self.n)
        b = np.asarray(b, dtype=float).ravel()
        m = A.shape[0]
        if m == 0:
            return
        starts = np.arange(0, m * self.n, self.n, dtype=np.int32)
        idx = np.tile(self._idx, m)
        self._h.addRows(m, np.full(m, -_INF), b, m * self.n, starts, idx, A.ravel())
        self.rows += m

    def pop_row(self) -> None:
        if self.rows == 0:
            raise LPError("no row to remove")
        self._h.deleteRows(1, np.array([self.rows - 1], dtype=np.int32))
        self.rows -= 1

    def _solve(self, c):
        h = self._h
        h.changeColsCost(self.n, self._idx, -c)
        ok = h.run() == highspy.HighsStatus.kOk
        st = h.getModelStatus()
        if not ok or st not in _KNOWN:
            # numerical trouble or a stale basis: retry from scratch with presolve
            h.clearSolver()
            h.setOptionValue("presolve", "on")
            h.run()
            h.setOptionValue("presolve", "off")
            st = h.getModelStatus()
        return st

    def maximize(self, c) -> LPResult:
        c = np.asarray(c, dtype=float).ravel()
        st = self._solve(c)
        if st == _MS.kOptimal:
            x = np.array(self._h.getSolution().col_value)
            return LPResult(OPTIMAL, float(c @ x), x)
        if st == _MS.kInfeasible:
            return LPResult(INFEASIBLE, -np.inf, None)
        if st in (_MS.kUnbounded, _MS.kUnboundedOrInfeasible):
            if st == _MS.kUnboundedOrInfeasible and self._solve(np.zeros(self.n)) == _MS.kInfeasible:
                return LPResult(INFEASIBLE, -np.inf, None)
            return LPResult(UNBOUNDED, np.inf, None)
        raise LPError(f"LP backend failed with status {self._h.modelStatusToString(st)}")


def maximize(c, A, b, bounds=None) -> LPResult:
    """Maximize ``c @ x`` subject to ``A @ x <= b``.

    Variables are free unless ``bounds`` is given as ``(lower, upper)`` pairs
    (``None`` for no bound).
    """
    c = np.asarray(c, dtype=float).ravel()
    s = Session(c.size, bounds)
    s.add_rows(A, b)
    return s.maximize(c)


def feasible_point(A, b) -> np.ndarray | None:
    """Return some point with ``A @ x <= b`` or ``None`` when there is none."""
    A = np.asarray(A, dtype=float)
    res = maximize(np.zeros(A.shape[1]), A, b)
    if res.status == INFEASIBLE:
        return None
    return res.x
