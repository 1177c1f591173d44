"""Halfspace polytopes ``{x | A x <= b}`` and the set algebra used by the
invariant-set iteration and the MPC constraints.

Every predicate (emptiness, containment, support, redundancy) is decided by
linear programming through :mod:`biaxcontour._lp`.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import _lp
from ._lp import FEAS_TOL

# coefficients below this (after row normalization) are treated as zero
_COEF_EPS = 1e-12


class EmptySetError(ValueError):
    """Raised when an operation needs a nonempty set and got an empty one."""


class UnboundedError(ValueError):
    """Raised when a support evaluation is unbounded where a finite value is required."""


class Polytope:
    """Convex polytope in halfspace form.

    Redundant rows are allowed; every query answers by membership, so the
    result does not depend on them. The empty set is represented canonically
    as ``{0 x <= -1}``.
    """

    __slots__ = ("_A", "_b")

    def __init__(self, A, b):
        A = np.array(A, dtype=float, ndmin=2)
        b = np.array(b, dtype=float).ravel()
        if A.ndim != 2:
            raise ValueError("A must be a 2-D array")
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.size} entries")
        if A.shape[1] < 1:
            raise ValueError("ambient dimension must be at least 1")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("polytope data must be finite")
        A.setflags(write=False)
        b.setflags(write=False)
        self._A = A
        self._b = b

    @property
    def A(self) -> np.ndarray:
        return self._A

    @property
    def b(self) -> np.ndarray:
        return self._b

    @property
    def dim(self) -> int:
        return self._A.shape[1]

    @property
    def n_rows(self) -> int:
        return self._A.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "Polytope":
        return cls(np.zeros((1, dim)), [-1.0])

    @classmethod
    def universe(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def __repr__(self) -> str:
        return f"Polytope(dim={self.dim}, rows={self.n_rows})"

    # thin method wrappers so call sites can chain
    def intersect(self, other: "Polytope") -> "Polytope":
        return intersect(self, other)

    def contains(self, x, tol: float = FEAS_TOL) -> bool:
        return contains_point(self, x, tol)

    def is_empty(self) -> bool:
        return is_empty(self)

    def to_record(self) -> dict:
        rows = np.hstack([self._A, self._b[:, None]])
        return {"dim": self.dim, "rows": rows.tolist()}

    @classmethod
    def from_record(cls, record: dict) -> "Polytope":
        dim = int(record["dim"])
        rows = np.asarray(record["rows"], dtype=float).reshape(-1, dim + 1)
        return cls(rows[:, :dim], rows[:, dim])


def from_box(lower, upper) -> Polytope:
    """Axis-aligned box as ``2n`` halfspaces (upper rows first)."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ValueError("lower and upper must be 1-D arrays of equal length")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    n = lower.size
    eye = np.eye(n)
    return Polytope(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))


def _check_same_dim(P: Polytope, Q: Polytope) -> None:
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")


def intersect(P: Polytope, Q: Polytope) -> Polytope:
    _check_same_dim(P, Q)
    return Polytope(np.vstack([P.A, Q.A]), np.concatenate([P.b, Q.b]))


def contains_point(P: Polytope, x, tol: float = FEAS_TOL) -> bool:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != P.dim:
        raise ValueError(f"point has dimension {x.size}, polytope {P.dim}")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return bool(np.all(P.A @ x <= P.b + tol))


def is_empty(P: Polytope) -> bool:
    if P.n_rows == 0:
        return False
    return _lp.feasible_point(P.A, P.b) is None


def box_bounds(P: Polytope) -> tuple[np.ndarray, np.ndarray] | None:
    """Return ``(lower, upper)`` when every row is a signed unit vector, else ``None``.

    Missing sides come back as infinities.
    """
    A = P.A
    if A.shape[0] == 0:
        return None
    nz = np.abs(A) > _COEF_EPS
    if np.any(nz.sum(axis=1) != 1):
        return None
    lower = np.full(P.dim, -np.inf)
    upper = np.full(P.dim, np.inf)
    idx = nz.argmax(axis=1)
    coef = A[np.arange(A.shape[0]), idx]
    bound = P.b / coef
    for j, c, v in zip(idx, coef, bound):
        if c > 0:
            upper[j] = min(upper[j], v)
        else:
            lower[j] = max(lower[j], v)
    return lower, upper


def support(P: Polytope, a) -> float:
    """``max {a.x | x in P}``; ``+inf`` when unbounded in direction ``a``."""
    a = np.asarray(a, dtype=float).ravel()
    if a.size != P.dim:
        raise ValueError("direction dimension mismatch")
    if not np.any(a):
        if is_empty(P):
            raise EmptySetError("support of an empty set")
        return 0.0
    res = _lp.maximize(a, P.A, P.b)
    if res.status == _lp.INFEASIBLE:
        raise EmptySetError("support of an empty set")
    return res.value


def support_many(P: Polytope, directions) -> np.ndarray:
    """Support values for each row of ``directions``.

    Boxes are evaluated in closed form; anything else reuses one warm-started LP.
    """
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    if D.shape[1] != P.dim:
        raise ValueError("direction dimension mismatch")
    bb = box_bounds(P)
    if bb is not None:
        lo, hi = bb
        if np.any(lo > hi + FEAS_TOL):
            raise EmptySetError("support of an empty set")
        out = np.zeros(D.shape[0])
        with np.errstate(invalid="ignore"):
            for j in range(P.dim):
                col = D[:, j]
                term = np.where(col > 0, col * hi[j], np.where(col < 0, col * lo[j], 0.0))
                out += term
        return out
    session = _lp.Session(P.dim)
    session.add_rows(P.A, P.b)
    out = np.empty(D.shape[0])
    for k, d in enumerate(D):
        res = session.maximize(d)
        if res.status == _lp.INFEASIBLE:
            raise EmptySetError("support of an empty set")
        out[k] = res.value
    return out


def erode_ball(P: Polytope, rho: float) -> Polytope:
    """Minkowski difference with the infinity-norm ball of radius ``rho``."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return Polytope(P.A, P.b - rho * np.abs(P.A).sum(axis=1))


def erode_set(P: Polytope, W: Polytope, M=None) -> Polytope:
    """Minkowski difference ``P - M W`` (``M`` defaults to identity).

    Each offset shrinks by the support of ``W`` in direction ``M^T a_i``.
    """
    if M is None:
        _check_same_dim(P, W)
        D = P.A
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape != (P.dim, W.dim):
            raise ValueError(f"map has shape {M.shape}, expected {(P.dim, W.dim)}")
        D = P.A @ M
    if is_empty(W):
        raise EmptySetError("cannot erode by an empty set")
    h = support_many(W, D)
    if np.any(np.isinf(h)):
        raise UnboundedError("eroding set is unbounded along a constrained direction")
    return Polytope(P.A, P.b - h)


def affine_preimage(P: Polytope, M, c=None) -> Polytope:
    """``{z | M z + c in P}``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != P.dim:
        raise ValueError(f"map output dimension {M.shape[0]} != polytope dimension {P.dim}")
    b = P.b.copy()
    if c is not None:
        c = np.asarray(c, dtype=float).ravel()
        if c.size != P.dim:
            raise ValueError("offset dimension mismatch")
        b = b - P.A @ c
    return Polytope(P.A @ M, b)


def contains_set(P: Polytope, Q: Polytope, tol: float = FEAS_TOL) -> bool:
    """True iff ``Q`` is a subset of ``P`` (up to ``tol`` per row)."""
    _check_same_dim(P, Q)
    if is_empty(Q):
        return True
    return bool(np.all(containment_margins(P, Q) <= tol))


def containment_margins(P: Polytope, Q: Polytope) -> np.ndarray:
    """Per-row ``max_{x in Q} a_i x - b_i`` for the rows of ``P``; positive means violation."""
    _check_same_dim(P, Q)
    if P.n_rows == 0:
        return np.zeros(0)
    return support_many(Q, P.A) - P.b


def first_violation(P: Polytope, Q: Polytope, tol: float = FEAS_TOL) -> float:
    """Largest row violation of ``Q`` inside ``P``, stopping at the first row above ``tol``.

    Returns ``-inf`` for an empty ``Q``. A result ``<= tol`` certifies containment.
    """
    _check_same_dim(P, Q)
    if is_empty(Q):
        return -np.inf
    if P.n_rows == 0:
        return -np.inf
    session = _lp.Session(Q.dim)
    session.add_rows(Q.A, Q.b)
    worst = -np.inf
    # newest rows are the likeliest to be violated
    for i in range(P.n_rows - 1, -1, -1):
        res = session.maximize(P.A[i])
        v = res.value - P.b[i]
        worst = max(worst, v)
        if v > tol:
            break
    return worst


def _normalize(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Scale rows to unit 2-norm; drop trivially true rows. Flags trivially false rows."""
    norms = np.linalg.norm(A, axis=1)
    zero = norms <= _COEF_EPS
    infeasible = bool(np.any(b[zero] < -FEAS_TOL))
    A = A[~zero] / norms[~zero, None]
    b = b[~zero] / norms[~zero]
    return A, b, infeasible


def _dedupe(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if A.shape[0] < 2:
        return A, b
    keys = np.round(A, 10)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    best: dict[int, int] = {}
    for i, g in enumerate(inverse):
        j = best.get(g)
        if j is None or b[i] < b[j]:
            best[g] = i
    idx = np.array(sorted(best.values()))
    return A[idx], b[idx]


def _chebyshev(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray | None, float]:
    """Center and radius of the largest inscribed ball (rows must be unit-norm)."""
    n = A.shape[1]
    Aa = np.hstack([A, np.ones((A.shape[0], 1))])
    Aa = np.vstack([Aa, np.eye(n + 1)[-1:]])
    ba = np.concatenate([b, [1.0]])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res = _lp.maximize(c, Aa, ba)
    if res.status != _lp.OPTIMAL:
        return None, -np.inf
    return res.x[:n], res.x[n]


def reduce(P: Polytope, tol: float = FEAS_TOL) -> Polytope:
    """Remove redundant halfspaces; membership is unchanged.

    Rows implied by the bounding box are dropped first. The rest go through
    Clarkson's scheme: each candidate row is tested by one LP against the
    rows already known to be irredundant, and rays from an interior point
    discover new irredundant rows.
    """
    n = P.dim
    if P.n_rows == 0:
        return P
    A, b, infeasible = _normalize(P.A, P.b)
    if infeasible:
        return Polytope.empty(n)
    if A.shape[0] == 0:
        return Polytope.universe(n)
    A, b = _dedupe(A, b)
    center, radius = _chebyshev(A, b)
    if center is None or radius < -FEAS_TOL:
        return Polytope.empty(n)
    if radius <= 1e-7:
        # not full-dimensional: ray shooting is unreliable, test every row plainly
        return Polytope(*_reduce_plain(A, b, tol))
    lo, hi = bounding_box(Polytope(A, b))
    bounded = bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)))
    if bounded:
        box_max = np.where(A > 0, A * hi, A * lo).sum(axis=1)
        keep = box_max > b + tol
        # a box face that is a row of P stays; it is never implied by the box of P itself
        A, b = A[keep | _is_axis_row(A)], b[keep | _is_axis_row(A)]
    return Polytope(*_reduce_clarkson(A, b, center, tol, (lo, hi) if bounded else None))


def _is_axis_row(A: np.ndarray) -> np.ndarray:
    return (np.abs(A) > _COEF_EPS).sum(axis=1) == 1


def _reduce_plain(A, b, tol):
    keep = np.ones(A.shape[0], dtype=bool)
    for i in range(A.shape[0]):
        keep[i] = False
        others = keep.copy()
        Ai = np.vstack([A[others], A[i]])
        bi = np.concatenate([b[others], [b[i] + 1.0]])
        res = _lp.maximize(A[i], Ai, bi)
        if res.status != _lp.OPTIMAL or res.value > b[i] + tol:
            keep[i] = True
    return A[keep], b[keep]


def _reduce_clarkson(A, b, center, tol, box=None):
    m, n = A.shape
    slack = b - A @ center
    irredundant: list[int] = []
    status = np.zeros(m, dtype=int)  # 0 unknown, 1 irredundant, -1 redundant
    if box is not None:
        # the LP over the irredundant rows is capped by a box slightly larger
        # than the set, so no temporary capping row is needed
        pad = 1.0 + 0.1 * np.maximum(box[1] - box[0], 0.0)
        bounds = list(zip(box[0] - pad, box[1] + pad))
    else:
        bounds = None
    session = _lp.Session(n, bounds)

    def mark_irredundant(j):
        status[j] = 1
        irredundant.append(j)
        session.add_rows(A[j], b[j])

    def test(i):
        if bounds is not None:
            return session.maximize(A[i])
        session.add_rows(A[i], b[i] + 1.0)
        res = session.maximize(A[i])
        session.pop_row()
        return res

    queue = list(range(m))
    while queue:
        i = queue.pop(0)
        if status[i] != 0:
            continue
        res = test(i)
        if res.status == _lp.OPTIMAL and res.value <= b[i] + tol:
            status[i] = -1
            continue
        if res.status != _lp.OPTIMAL:
            mark_irredundant(i)
            continue
        d = res.x - center
        rate = A @ d
        live = (status == 0) & (rate > _COEF_EPS)
        if not np.any(live):
            mark_irredundant(i)
            continue
        t = np.full(m, np.inf)
        t[live] = slack[live] / rate[live]
        j = int(np.argmin(t))
        ties = np.flatnonzero(t <= t[j] * (1 + 1e-9) + 1e-12)
        if ties.size == 1:
            mark_irredundant(j)
            if j != i:
                queue.insert(0, i)
        else:
            # ray hit a lower-dimensional face; decide row i against all live rows
            others = np.flatnonzero((status >= 0) & (np.arange(m) != i))
            Ai = np.vstack([A[others], A[i]])
            bi = np.concatenate([b[others], [b[i] + 1.0]])
            res = _lp.maximize(A[i], Ai, bi)
            if res.status == _lp.OPTIMAL and res.value <= b[i] + tol:
                status[i] = -1
            else:
                mark_irredundant(i)
    idx = np.array(sorted(irredundant), dtype=int)
    return A[idx], b[idx]


def project(P: Polytope, keep: Sequence[int]) -> Polytope:
    """Orthogonal projection onto the coordinates ``keep`` (in the given order).

    Fourier-Motzkin elimination, one coordinate at a time, with redundancy
    removal after every step.
    """
    keep = [int(k) for k in keep]
    if not keep:
        raise ValueError("keep must name at least one coordinate")
    if len(set(keep)) != len(keep) or min(keep) < 0 or max(keep) >= P.dim:
        raise ValueError("keep must be distinct valid coordinate indices")
    if is_empty(P):
        return Polytope.empty(len(keep))
    cols = list(range(P.dim))
    A, b = P.A.copy(), P.b.copy()
    eliminate = [c for c in cols if c not in keep]
    while eliminate:
        # cheapest variable first: fewest generated rows
        counts = []
        for c in eliminate:
            j = cols.index(c)
            npos = int(np.sum(A[:, j] > _COEF_EPS))
            nneg = int(np.sum(A[:, j] < -_COEF_EPS))
            counts.append(npos * nneg - npos - nneg)
        c = eliminate.pop(int(np.argmin(counts)))
        j = cols.index(c)
        A, b = _fm_step(A, b, j)
        cols.pop(j)
        red = reduce(Polytope(A, b)) if A.shape[0] else Polytope.universe(len(cols))
        A, b = red.A.copy(), red.b.copy()
        if A.shape[0] == 1 and not np.any(A) and b[0] < 0:
            return Polytope.empty(len(keep))
    order = [cols.index(k) for k in keep]
    return Polytope(A[:, order], b)


def _fm_step(A: np.ndarray, b: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray]:
    col = A[:, j]
    pos = col > _COEF_EPS
    neg = col < -_COEF_EPS
    zero = ~(pos | neg)
    cp = col[pos]
    cn = -col[neg]
    # |c_n| a_p + c_p a_n cancels column j without dividing by small pivots
    newA = (cn[None, :, None] * A[pos][:, None, :] + cp[:, None, None] * A[neg][None, :, :]).reshape(-1, A.shape[1])
    newb = (cn[None, :] * b[pos][:, None] + cp[:, None] * b[neg][None, :]).ravel()
    newA[:, j] = 0.0
    A2 = np.vstack([A[zero], newA])
    b2 = np.concatenate([b[zero], newb])
    return np.delete(A2, j, axis=1), b2


def bounding_box(P: Polytope) -> tuple[np.ndarray, np.ndarray]:
    """Tightest axis-aligned box around ``P`` (entries may be infinite)."""
    eye = np.eye(P.dim)
    h = support_many(P, np.vstack([eye, -eye]))
    return -h[P.dim:], h[:P.dim]


def chebyshev_center(P: Polytope) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed Euclidean ball."""
    A, b, infeasible = _normalize(P.A, P.b)
    if infeasible:
        raise EmptySetError("empty polytope has no center")
    if A.shape[0] == 0:
        return np.zeros(P.dim), np.inf
    center, radius = _chebyshev(A, b)
    if center is None or radius < -FEAS_TOL:
        raise EmptySetError("empty polytope has no center")
    return center, radius


def cartesian(*sets: Polytope) -> Polytope:
    """Cartesian product of polytopes, coordinates concatenated in order."""
    n = sum(S.dim for S in sets)
    blocks_A, blocks_b = [], []
    offset = 0
    for S in sets:
        blk = np.zeros((S.n_rows, n))
        blk[:, offset:offset + S.dim] = S.A
        blocks_A.append(blk)
        blocks_b.append(S.b)
        offset += S.dim
    return Polytope(np.vstack(blocks_A), np.concatenate(blocks_b))


def lift(P: Polytope, dim: int, coords: Iterable[int]) -> Polytope:
    """Embed ``P`` as a cylinder in ``R^dim`` acting on ``coords``."""
    coords = list(coords)
    if len(coords) != P.dim:
        raise ValueError("coords must list one target index per polytope coordinate")
    A = np.zeros((P.n_rows, dim))
    A[:, coords] = P.A
    return Polytope(A, P.b)


def scale(P: Polytope, factors) -> Polytope:
    """``{D x | x in P}`` for the diagonal map ``D = diag(factors)``."""
    factors = np.asarray(factors, dtype=float)
    return Polytope(P.A / factors[None, :], P.b)
