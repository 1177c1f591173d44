"""Dense convex QP solver for small MPC problems.

Solves ``min 0.5 x'Hx + f'x  s.t.  A_in x <= b_in,  A_eq x = b_eq`` with a
dual active-set method (Goldfarb-Idnani). The method starts from the
unconstrained minimizer and adds violated constraints one at a time while
keeping dual feasibility, so it needs no feasible starting point and it
proves infeasibility when a violated constraint cannot be reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"


class QPError(ValueError):
    """The problem data are malformed (shape mismatch, Hessian not positive definite)."""


@dataclass(frozen=True)
class QuadProgram:
    H: np.ndarray
    f: np.ndarray
    A_in: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    A_eq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise QPError("H must be square")
        if not np.allclose(H, H.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise QPError("H must be symmetric")
        f = np.asarray(self.f, dtype=float).ravel()
        if f.size != n:
            raise QPError("f has the wrong length")
        A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n) if np.size(self.A_in) else np.zeros((0, n))
        b_in = np.asarray(self.b_in, dtype=float).ravel()
        A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n) if np.size(self.A_eq) else np.zeros((0, n))
        b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if A_in.shape[0] != b_in.size or A_eq.shape[0] != b_eq.size:
            raise QPError("constraint matrix and vector lengths differ")
        for name, v in (("H", H), ("f", f), ("A_in", A_in), ("b_in", b_in), ("A_eq", A_eq), ("b_eq", b_eq)):
            if not np.all(np.isfinite(v)):
                raise QPError(f"{name} contains non-finite values")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_in", b_in)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", b_eq)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass(frozen=True)
class QPSolution:
    x: np.ndarray
    status: str
    iterations: int
    active: tuple[int, ...]
    lam_in: np.ndarray
    lam_eq: np.ndarray
    kkt_residual: float
    objective: float
    warm_started: bool = False


def kkt_residual(qp: QuadProgram, x, lam_in, lam_eq) -> float:
    """Max-norm of stationarity, primal violation, dual sign and complementarity."""
    g = qp.H @ x + qp.f + qp.A_in.T @ lam_in + qp.A_eq.T @ lam_eq
    parts = [np.abs(g).max(initial=0.0)]
    if qp.b_in.size:
        slack = qp.A_in @ x - qp.b_in
        parts += [max(0.0, slack.max()), max(0.0, -lam_in.min()), np.abs(lam_in * slack).max()]
    if qp.b_eq.size:
        parts.append(np.abs(qp.A_eq @ x - qp.b_eq).max())
    return float(max(parts))


class _Active:
    """Active-set factorization: ``L^{-1} N = Q R`` with ``H = L L'``."""

    def __init__(self, Linv: np.ndarray):
        self.Linv = Linv
        self.n = Linv.shape[0]
        self.cols: list[np.ndarray] = []

    def directions(self, npl: np.ndarray):
        """Primal step ``z`` and dual step ``r`` for adding normal ``npl``."""
        d = self.Linv @ npl
        q = len(self.cols)
        if q == 0:
            return self.Linv.T @ d, np.zeros(0)
        Bm = self.Linv @ np.column_stack(self.cols)
        Q, R = np.linalg.qr(Bm, mode="complete")
        Q1, Q2 = Q[:, :q], Q[:, q:]
        z = self.Linv.T @ (Q2 @ (Q2.T @ d))
        r = sla.solve_triangular(R[:q, :q], Q1.T @ d)
        return z, r


def solve(qp: QuadProgram, warm_start=None, max_iter: int = 25, tol: float = 1e-9) -> QPSolution:
    """Solve ``qp``.

    Args:
        warm_start: indices of inequality rows believed active. They seed the
            active set only if the resulting point is dual feasible.
        max_iter: cap on active-set changes (adds plus drops).
        tol: feasibility tolerance on unit-normalized rows.

    Returns:
        A :class:`QPSolution`; on ``iteration_limit`` it carries the last iterate.
        When several constraints are equally violated the lowest index enters first.
    """
    n = qp.n
    try:
        L = np.linalg.cholesky(qp.H)
    except np.linalg.LinAlgError as err:
        raise QPError("H must be positive definite") from err
    Linv = sla.solve_triangular(L, np.eye(n), lower=True)
    m_in, m_eq = qp.A_in.shape[0], qp.A_eq.shape[0]

    # constraints as n_i' x >= d_i with unit normals; equalities first
    norms_in = np.linalg.norm(qp.A_in, axis=1)
    norms_eq = np.linalg.norm(qp.A_eq, axis=1)
    if np.any(norms_in == 0) or np.any(norms_eq == 0):
        zero_in = norms_in == 0
        if np.any(qp.b_in[zero_in] < -tol) or np.any(np.abs(qp.b_eq[norms_eq == 0]) > tol):
            x0 = -Linv.T @ (Linv @ qp.f)
            return _finish(qp, x0, INFEASIBLE, 0, [], {}, False)
    sin = np.where(norms_in > 0, norms_in, 1.0)
    seq = np.where(norms_eq > 0, norms_eq, 1.0)
    N_in = -qp.A_in / sin[:, None]
    d_in = -qp.b_in / sin
    N_eq = qp.A_eq / seq[:, None]
    d_eq = qp.b_eq / seq
    usable_in = norms_in > 0

    def normal(k):
        return N_eq[k] if k < m_eq else N_in[k - m_eq]

    x = -Linv.T @ (Linv @ qp.f)
    act = _Active(Linv)
    active: list[int] = []  # constraint ids: 0..m_eq-1 eq, m_eq.. inequalities
    u: list[float] = []
    eq_sign = np.ones(m_eq)
    iters = 0
    warm = False

    if warm_start is not None and len(warm_start):
        seeded = _try_warm(qp, Linv, N_in, d_in, N_eq, d_eq, sorted(set(int(i) for i in warm_start)), tol)
        if seeded is not None:
            x, active, u = seeded
            for k in active:
                act.cols.append(normal(k))
            warm = True

    pending_eq = [k for k in range(m_eq) if k not in active]

    while True:
        # choose the entering constraint
        if pending_eq:
            p = pending_eq[0]
            # equalities always enter; orient them so the step length is nonnegative
            s_p = N_eq[p] @ x - d_eq[p]
            if s_p > 0:
                eq_sign[p] = -1.0
            npl = eq_sign[p] * N_eq[p]
            s_p = npl @ x - eq_sign[p] * d_eq[p]
        else:
            if m_in == 0:
                return _finish(qp, x, OPTIMAL, iters, active, dict(zip(active, u)), warm, eq_sign, sin, seq)
            s = N_in @ x - d_in
            s[~usable_in] = np.inf
            for k in active:
                if k >= m_eq:
                    s[k - m_eq] = np.inf
            if s.min() >= -tol:
                return _finish(qp, x, OPTIMAL, iters, active, dict(zip(active, u)), warm, eq_sign, sin, seq)
            j = int(np.argmin(s))  # argmin returns the lowest index on ties
            p = m_eq + j
            npl = N_in[j]
            s_p = s[j]
        u_plus = 0.0
        added = False
        while not added:
            if iters >= max_iter:
                return _finish(qp, x, ITERATION_LIMIT, iters, active, dict(zip(active, u)), warm, eq_sign, sin, seq)
            z, r = act.directions(npl)
            # dual step limit over inequality multipliers only
            t1, k_drop = np.inf, -1
            for idx, k in enumerate(active):
                if k >= m_eq and r[idx] > 1e-14:
                    ratio = u[idx] / r[idx]
                    if ratio < t1:
                        t1, k_drop = ratio, idx
            zn = z @ npl
            if abs(zn) <= 1e-14 * max(1.0, np.abs(npl).max()):
                if not np.isfinite(t1):
                    return _finish(qp, x, INFEASIBLE, iters, active, dict(zip(active, u)), warm, eq_sign, sin, seq)
                # pure dual step then drop
                u = [ui - t1 * ri for ui, ri in zip(u, r)]
                u_plus += t1
                _drop(act, active, u, k_drop)
                iters += 1
                continue
            t2 = -s_p / zn
            t = min(t1, t2)
            x = x + t * z
            u = [ui - t * ri for ui, ri in zip(u, r)]
            u_plus += t
            s_p = s_p + t * zn
            if t2 <= t1:
                active.append(p)
                u.append(u_plus)
                act.cols.append(npl)
                if p < m_eq:
                    pending_eq.remove(p)
                added = True
            else:
                _drop(act, active, u, k_drop)
            iters += 1


def _drop(act: _Active, active: list, u: list, idx: int) -> None:
    active.pop(idx)
    u.pop(idx)
    act.cols.pop(idx)


def _try_warm(qp, Linv, N_in, d_in, N_eq, d_eq, ws, tol):
    """Equality-constrained solve on ``eq ∪ ws``; ``None`` unless dual feasible."""
    m_eq = N_eq.shape[0]
    ws = [i for i in ws if 0 <= i < N_in.shape[0]]
    if not ws:
        return None
    rows = np.vstack([N_eq, N_in[ws]])
    rhs = np.concatenate([d_eq, d_in[ws]])
    if np.linalg.matrix_rank(rows) < rows.shape[0]:
        return None
    n = qp.n
    K = np.block([[qp.H, -rows.T], [rows, np.zeros((rows.shape[0], rows.shape[0]))]])
    try:
        sol = np.linalg.solve(K, np.concatenate([-qp.f, rhs]))
    except np.linalg.LinAlgError:
        return None
    x, mult = sol[:n], sol[n:]
    if np.any(mult[m_eq:] < -tol):
        return None
    # equality multipliers may have either sign; orient them so they are >= 0
    active = list(range(m_eq)) + [m_eq + i for i in ws]
    return x, active, list(mult)


def _finish(qp, x, status, iters, active, mult, warm, eq_sign=None, sin=None, seq=None):
    m_in, m_eq = qp.A_in.shape[0], qp.A_eq.shape[0]
    lam_in = np.zeros(m_in)
    lam_eq = np.zeros(m_eq)
    for k, v in mult.items():
        if k < m_eq:
            sign = 1.0 if eq_sign is None else eq_sign[k]
            lam_eq[k] = -sign * v / seq[k]
        else:
            lam_in[k - m_eq] = v / sin[k - m_eq]
    if status == OPTIMAL and m_eq:
        # recover equality multipliers exactly from stationarity
        g = qp.H @ x + qp.f + qp.A_in.T @ lam_in
        lam_eq = -np.linalg.lstsq(qp.A_eq.T, g, rcond=None)[0]
    act = tuple(sorted(k - m_eq for k in active if k >= m_eq))
    return QPSolution(
        x=x,
        status=status,
        iterations=iters,
        active=act,
        lam_in=lam_in,
        lam_eq=lam_eq,
        kkt_residual=kkt_residual(qp, x, lam_in, lam_eq),
        objective=qp.objective(x),
        warm_started=warm,
    )
