"""Brute-force reference implementations shared by the tests."""

import itertools

import numpy as np
from scipy.spatial import ConvexHull, HalfspaceIntersection

from biaxcontour.polytope import Polytope, chebyshev_center


def random_hull(rng, dim, n_points=None, scale=1.0, center=None):
    """Random full-dimensional polytope as ``(Polytope, vertices)``."""
    n_points = n_points or rng.integers(dim + 2, 4 * dim + 4)
    pts = rng.normal(size=(n_points, dim)) * scale
    if center is not None:
        pts = pts + center
    hull = ConvexHull(pts)
    P = Polytope(hull.equations[:, :-1], -hull.equations[:, -1])
    return P, pts[hull.vertices]


def hull_of(points):
    hull = ConvexHull(points)
    return Polytope(hull.equations[:, :-1], -hull.equations[:, -1]), hull


def erosion_offsets(P, W_vertices):
    """``P - W`` kept in P's rows: each offset minus the largest vertex projection."""
    return P.b - np.max(P.A @ W_vertices.T, axis=1)


def polytope_vertices(P):
    """Vertices of a bounded full-dimensional polytope by halfspace intersection."""
    c, _ = chebyshev_center(P)
    hs = HalfspaceIntersection(np.hstack([P.A, -P.b[:, None]]), c)
    return hs.intersections[ConvexHull(hs.intersections).vertices]


def box_vertices(lo, hi):
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def enumerate_qp(H, f, A, b, tol=1e-9):
    """Exact minimum of a strictly convex QP by trying every active set."""
    n, m = H.shape[0], A.shape[0]
    best = None
    for k in range(0, min(n, m) + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            K = np.zeros((n + k, n + k))
            K[:n, :n] = H
            K[:n, n:] = A[S].T
            K[n:, :n] = A[S]
            rhs = np.concatenate([-f, b[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if np.all(A @ x <= b + tol):
                val = 0.5 * x @ H @ x + f @ x
                if best is None or val < best[0]:
                    best = (val, x)
    return best


def random_qp(rng, n, m, feasible=True):
    """Random strictly convex QP; feasible instances contain a known interior point."""
    from biaxcontour.qpsolver import QuadProgram

    G = rng.normal(size=(n, n))
    H = G @ G.T + 0.1 * np.eye(n)
    f = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    if feasible:
        x0 = rng.normal(size=n) * 0.3
        b = A @ x0 + rng.uniform(0.0, 1.0, size=m)
    else:
        b = rng.normal(size=m)
    return QuadProgram(H, f, A, b)


def kkt_check(qp, x, lam):
    """Independent first-order conditions: stationarity, dual sign, complementarity."""
    g = qp.H @ x + qp.f + qp.A_in.T @ lam
    slack = qp.b_in - qp.A_in @ x
    return max(np.abs(g).max(), max(0.0, -lam.min(initial=0.0)), np.abs(lam * slack).max(initial=0.0))


def delay_twin_ok(sys, Td, steps, rng):
    """Augmented model against the plain model fed through a FIFO; bit-exact comparison."""
    from biaxcontour.plantmodel import augment_delay

    us = rng.normal(size=(steps, sys.nu))
    ds = rng.normal(size=(steps, sys.nd))
    aug = augment_delay(sys, Td, sys.nu)
    x = rng.normal(size=sys.nx)
    z = np.concatenate([x, np.zeros(sys.nu * Td)])
    hist = [np.zeros(sys.nu)] * Td
    for k in range(steps):
        hist.append(us[k])
        x = sys.step(x, hist.pop(0), ds[k])
        z = aug.step(z, us[k], ds[k])
        if not np.array_equal(z[:sys.nx], x):
            return False
    return True


def hil_twin_ok(p, rig, Ts, steps, rng):
    """HIL X update against its delay-augmented linear twin; bit-exact comparison."""
    from biaxcontour.plantmodel import DiscreteLTI, augment_delay
    from biaxcontour.simloop import DelayLine, hil_x_step

    A = np.array([[1.0, Ts], [0.0, 1.0 - Ts * rig.b_A / rig.M_A]])
    twin = augment_delay(DiscreteLTI(A, [[0.0], [Ts * p.kx / p.Me]], [[0.0], [1.0]], Ts), 1)
    line = DelayLine(1, 1)
    x = np.array([0.02, -0.01])
    z = np.concatenate([x, [0.0]])
    for _ in range(steps):
        i, F_N = rng.uniform(-2, 2), rng.uniform(-1e-4, 1e-4)
        x = hil_x_step(x, line.push_pop([i])[0], F_N, p, rig, Ts)
        z = twin.step(z, [i], [F_N])
        if not np.array_equal(z[:2], x):
            return False
    return True


def rk4_order(p, s0, u, T=0.4, h=0.02):
    """Observed convergence order of the plant integrator from three step sizes."""
    from biaxcontour.simloop import PlantState, step_plant

    def run(step):
        s = PlantState(*s0)
        for _ in range(int(round(T / step))):
            s = step_plant(s, u, p, step)
        return s.as_array()

    a, b, c = run(h), run(h / 2), run(h / 4)
    return np.log2(np.linalg.norm(a - b) / np.linalg.norm(b - c))
