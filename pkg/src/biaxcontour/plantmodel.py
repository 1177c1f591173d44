"""Gantry dynamics: the nonlinear Lagrangian model, the switched
control-oriented LTI models, input-delay augmentation, the reference model
and the lumped-disturbance boxes.

Generalized coordinates are ``(x_h, y_n, theta)``; the full state vector is
ordered ``(x_h, xd_h, y_n, yd_n, theta, thetad)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .polytope import Polytope, box_bounds, from_box


class PlantError(RuntimeError):
    """The plant left the region where its mass matrix is positive definite."""


@dataclass(frozen=True)
class GantryParams:
    """Physical constants of the dual-drive gantry.

    ``kr`` is a torsional constant (N m/rad); everything else is SI.
    """

    M1: float = 50.0
    M2: float = 50.0
    Me: float = 20.0
    Mn: float = 120.0
    L: float = 1.5
    W: float = 0.1
    D: float = 0.2
    kx: float = 30.0
    ky: float = 30.0
    bx: float = 50.0
    by: float = 50.0
    kr: float = 8000.0
    ks: float = 1.0e6

    def __post_init__(self):
        for name in ("M1", "M2", "Me", "Mn", "L", "W", "D", "kx", "ky"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        for name in ("bx", "by", "kr", "ks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def Mt(self) -> float:
        return self.M1 + self.M2 + self.Me + self.Mn

    @property
    def Md(self) -> float:
        return self.M1 - self.M2

    def gamma(self, x_h, theta):
        return self.Me * self.D * np.sin(theta) - self.Md * self.L * np.cos(theta) + self.Me * x_h * np.cos(theta)

    def lam(self, x_h):
        return (
            (self.M1 + self.M2) * self.L**2
            + self.Mn * (self.L**2 + self.W**2) / 3.0
            + self.Me * (self.D**2 + x_h**2)
        )

    @classmethod
    def from_dict(cls, data: dict) -> "GantryParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown gantry parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class DiscreteLTI:
    """``x+ = A x + B u + E d`` sampled at ``Ts``."""

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    Ts: float
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        E = np.asarray(self.E, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        if self.labels and len(self.labels) != A.shape[0]:
            raise ValueError("one label per state required")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def nd(self) -> int:
        return self.E.shape[1]

    def step(self, x, u, d=None):
        x_next = self.A @ x + self.B @ np.atleast_1d(u)
        if d is not None:
            x_next = x_next + self.E @ np.atleast_1d(d)
        return x_next

    def to_record(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "E": self.E.tolist(),
            "Ts": self.Ts,
            "labels": list(self.labels),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DiscreteLTI":
        return cls(np.array(rec["A"]), np.array(rec["B"]), np.array(rec["E"]), float(rec["Ts"]), tuple(rec["labels"]))


@dataclass(frozen=True)
class ModelBank:
    """Y-axis models linearized at increasing beam positions.

    Each point owns the cell ``(p - s/2, p + s/2]`` (``s`` = point spacing);
    positions outside the covered range clamp to the end cells.
    """

    points: tuple[float, ...]
    spacing: float
    models: tuple[DiscreteLTI, ...] = field(default=())

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise ValueError("bank needs at least one point")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("bank points must be strictly increasing")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if self.models:
            if len(self.models) != pts.size:
                raise ValueError("one model per point required")
            m0 = self.models[0]
            for m in self.models[1:]:
                if m.Ts != m0.Ts or m.A.shape != m0.A.shape or m.B.shape != m0.B.shape:
                    raise ValueError("bank models must share Ts and dimensions")

    @property
    def edges(self) -> np.ndarray:
        """Interior cell boundaries (midpoints between adjacent points)."""
        pts = np.asarray(self.points)
        return 0.5 * (pts[:-1] + pts[1:])

    def cells(self, lo: float, hi: float) -> list[tuple[float, float]]:
        """Closed beam-position range each model is responsible for.

        The end cells stretch to ``lo`` and ``hi`` because positions outside
        the covered range clamp to them.
        """
        e = self.edges
        left = np.concatenate([[min(lo, self.points[0])], e])
        right = np.concatenate([e, [max(hi, self.points[-1])]])
        return [(float(a), float(b)) for a, b in zip(left, right)]


# --- nonlinear model -------------------------------------------------------


def mass_matrix(x_h: float, theta: float, p: GantryParams) -> np.ndarray:
    """Symmetric inertia matrix multiplying ``(xdd_h, ydd_n, thetadd)``."""
    s = np.sin(theta)
    g = p.gamma(x_h, theta)
    return np.array(
        [
            [p.Me, p.Me * s, p.Me * p.D],
            [p.Me * s, p.Mt, g],
            [p.Me * p.D, g, p.lam(x_h)],
        ]
    )


def generalized_forces(state, currents, p: GantryParams) -> np.ndarray:
    """Every non-acceleration term of the three equations of motion, moved to the right-hand side."""
    x, xd, _y, yd, th, thd = state
    ix, i1, i2 = currents
    s, c = np.sin(th), np.cos(th)
    f_x = p.kx * ix - p.bx * xd + p.Me * x * thd**2
    f_y = (
        p.ky * (i1 + i2)
        - 2.0 * p.by * yd
        - p.Me * (-x * s * thd**2 + 2.0 * xd * c * thd + p.D * thd**2 * c)
        - p.Md * p.L * thd**2 * s
    )
    f_th = (
        (p.ky * (i2 - i1) - 2.0 * p.by * p.L * thd) * p.L * c
        - 2.0 * p.kr * th
        - 2.0 * p.L**2 * p.ks * s * (1.0 - c)
        - 2.0 * p.Me * thd * xd * x
    )
    return np.array([f_x, f_y, f_th])


def nonlinear_accel(state, currents, p: GantryParams) -> np.ndarray:
    """Solve the equations of motion for ``(xdd_h, ydd_n, thetadd)``."""
    M = mass_matrix(state[0], state[4], p)
    rhs = generalized_forces(state, currents, p)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as err:
        raise PlantError(f"mass matrix not positive definite at state {list(state)}") from err
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


def y_theta_accel(state, xdd_h: float, currents, p: GantryParams) -> np.ndarray:
    """``(ydd_n, thetadd)`` from the Y and theta equations with ``xdd_h`` prescribed.

    Used when the X motion comes from an external source (the HIL rig).
    """
    M = mass_matrix(state[0], state[4], p)
    rhs = generalized_forces(state, currents, p)
    rhs = rhs[1:] - M[1:, 0] * xdd_h
    return np.linalg.solve(M[1:, 1:], rhs)


def energy(state, p: GantryParams) -> float:
    """Kinetic plus spring energy (conserved with zero friction and zero currents)."""
    M = mass_matrix(state[0], state[4], p)
    qd = np.array([state[1], state[3], state[5]])
    th = state[4]
    potential = p.kr * th**2 + 2.0 * p.L**2 * p.ks * (1.0 - np.cos(th)) ** 2 / 2.0
    return 0.5 * qd @ M @ qd + potential


# --- control-oriented models ----------------------------------------------


def x_axis_lti(p: GantryParams, Ts: float) -> DiscreteLTI:
    """Euler-discretized X model with state ``(x_h, xd_h)``, input ``i_x``, disturbance ``d_x``."""
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    A = np.array([[1.0, Ts], [0.0, 1.0 - Ts * p.bx / p.Me]])
    B = np.array([[0.0], [Ts * p.kx / p.Me]])
    E = np.array([[0.0], [Ts]])
    return DiscreteLTI(A, B, E, Ts, ("x_h", "xd_h"))


def y_axis_continuous(p: GantryParams, x_bar: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous-time ``(Ac, Bc, Ec)`` of the coupled Y/theta model at ``x_bar``."""
    if p.M1 != p.M2:
        raise ValueError("the Y control-oriented model assumes M1 == M2")
    Mb = np.array([[p.Mt, p.Me * x_bar], [p.Me * x_bar, p.lam(x_bar)]])
    if abs(np.linalg.det(Mb)) < 1e-12:
        raise ValueError("Y inertia block is singular")
    Minv = np.linalg.inv(Mb)
    # forces as linear maps of state (y, yd, th, thd) and inputs (i1, i2)
    F = np.array(
        [
            [0.0, -2.0 * p.by, 0.0, 0.0],
            [0.0, 0.0, -2.0 * p.kr, -2.0 * p.by * p.L**2],
        ]
    )
    G = np.array([[p.ky, p.ky], [-p.ky * p.L, p.ky * p.L]])
    acc_x = Minv @ F
    acc_u = Minv @ G
    Ac = np.zeros((4, 4))
    Ac[0, 1] = 1.0
    Ac[2, 3] = 1.0
    Ac[1] = acc_x[0]
    Ac[3] = acc_x[1]
    Bc = np.zeros((4, 2))
    Bc[1] = acc_u[0]
    Bc[3] = acc_u[1]
    Ec = np.zeros((4, 2))
    Ec[1] = Minv[0]
    Ec[3] = Minv[1]
    return Ac, Bc, Ec


def y_axis_lti(p: GantryParams, x_bar: float, Ts: float) -> DiscreteLTI:
    """Euler-discretized Y/theta model with state ``(y_n, yd_n, theta, thetad)``,
    inputs ``(i_1, i_2)`` and disturbances ``(d_1, d_2)``."""
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    Ac, Bc, Ec = y_axis_continuous(p, x_bar)
    return DiscreteLTI(np.eye(4) + Ts * Ac, Ts * Bc, Ts * Ec, Ts, ("y_n", "yd_n", "theta", "thetad"))


@dataclass(frozen=True)
class DelayedLTI(DiscreteLTI):
    """Delay-augmented model that also remembers its base model.

    The matrices describe the whole augmented state; :meth:`step` runs the
    base model on the plant part and shifts the registers, so a simulation
    matches the base model driven by delayed inputs bit for bit.
    """

    base: DiscreteLTI | None = None
    Td: int = 0

    def step(self, x, u, d=None):
        x = np.asarray(x, dtype=float)
        n, m = self.base.nx, self.base.nu
        regs = x[n:]
        plant = self.base.step(x[:n], regs[(self.Td - 1) * m:], d)
        return np.concatenate([plant, np.atleast_1d(np.asarray(u, dtype=float)), regs[:(self.Td - 1) * m]])


def augment_delay(sys: DiscreteLTI, Td: int, input_dim: int | None = None) -> DiscreteLTI:
    """Append ``Td`` input registers ``(u(k-1), ..., u(k-Td))`` to the state.

    The current input enters the first register and the plant sees the oldest one.
    """
    if Td < 0:
        raise ValueError("Td must be nonnegative")
    m = sys.nu if input_dim is None else int(input_dim)
    if m != sys.nu:
        raise ValueError(f"input_dim {m} does not match model input count {sys.nu}")
    if Td == 0:
        return sys
    n = sys.nx
    N = n + m * Td
    A = np.zeros((N, N))
    A[:n, :n] = sys.A
    A[:n, N - m:] = sys.B
    for k in range(1, Td):
        r0 = n + k * m
        c0 = n + (k - 1) * m
        A[r0:r0 + m, c0:c0 + m] = np.eye(m)
    B = np.zeros((N, m))
    B[n:n + m] = np.eye(m)
    E = np.zeros((N, sys.nd))
    E[:n] = sys.E
    labels = ()
    if sys.labels:
        labels = sys.labels + tuple(f"u{j}(k-{k})" for k in range(1, Td + 1) for j in range(m))
    return DelayedLTI(A, B, E, sys.Ts, labels, base=sys, Td=Td)


def reference_model(Ts: float) -> DiscreteLTI:
    """Double integrator for one reference axis: state (position, velocity), input acceleration."""
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    A = np.array([[1.0, Ts], [0.0, 1.0]])
    B = np.array([[0.0], [Ts]])
    return DiscreteLTI(A, B, np.zeros((2, 0)), Ts, ("pos", "vel"))


def build_bank(p: GantryParams, points, spacing: float, Ts: float, Td: int = 0) -> ModelBank:
    models = tuple(augment_delay(y_axis_lti(p, xb, Ts), Td, 2) for xb in points)
    return ModelBank(tuple(float(x) for x in points), float(spacing), models)


# --- lumped disturbances ---------------------------------------------------
#
# Printed small-angle forms (x_h replaced by the linearization point).


def d_x_expr(x_h, thd, thdd, ydd, th, p: GantryParams):
    return x_h * thd**2 - p.D * thdd - ydd * np.sin(th)


def d1_expr(x_bar, th, thd, xdd, thdd, xd, p: GantryParams):
    return p.Me * (x_bar * th * thd**2 - th * xdd - p.D * th * thdd - 2.0 * xd * thd - p.D * thd**2)


def d2_expr(x_bar, th, thd, xd, ydd, xdd, p: GantryParams):
    return -p.Me * (2.0 * thd * xd * x_bar + p.D * th * ydd + p.D * xdd)


# Exact residuals between the nonlinear equations and the linear models. They
# reduce to the printed forms when sin(th) ~ th, cos(th) ~ 1 and x_h = x_bar.


def d1_exact(x_bar, x_h, xd, th, thd, xdd, thdd, p: GantryParams):
    s, c = np.sin(th), np.cos(th)
    gamma = p.gamma(x_h, th)
    return (
        -p.Me * s * xdd
        - (gamma - p.Me * x_bar) * thdd
        - p.Me * (-x_h * s * thd**2 + 2.0 * xd * c * thd + p.D * thd**2 * c)
        - p.Md * p.L * thd**2 * s
    )


def d2_exact(x_bar, x_h, xd, th, thd, xdd, ydd, thdd, di, p: GantryParams):
    """``di`` is the differential current ``i_2 - i_1``."""
    s, c = np.sin(th), np.cos(th)
    gamma = p.gamma(x_h, th)
    return (
        -p.Me * p.D * xdd
        - (gamma - p.Me * x_bar) * ydd
        - (p.lam(x_h) - p.lam(x_bar)) * thdd
        - 2.0 * p.L**2 * p.ks * s * (1.0 - c)
        - 2.0 * p.Me * thd * xd * x_h
        + (p.ky * p.L * di - 2.0 * p.by * p.L**2 * thd) * (c - 1.0)
    )


def inflate_interval(lo: np.ndarray, hi: np.ndarray, rel: float = 0.1, abs_: float = 1e-6):
    """Widen ``[lo, hi]`` by ``rel`` of its width (split evenly) plus ``abs_`` per side."""
    w = hi - lo
    return lo - 0.5 * rel * w - abs_, hi + 0.5 * rel * w + abs_


def _grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.unique(np.linspace(lo, hi, n))


def disturbance_box(
    p: GantryParams,
    state_box: Polytope,
    accel_box: Polytope,
    grid: int = 5,
    axis: str = "y",
    x_bar: float | None = None,
    cell: tuple[float, float] | None = None,
    di_range: tuple[float, float] = (0.0, 0.0),
    margin: tuple[float, float] = (0.1, 1e-6),
) -> Polytope:
    """Interval box enclosing the lumped disturbance over a gridded operating region.

    ``state_box`` is a box over ``(x_h, xd_h, y_n, yd_n, theta, thetad)`` and
    ``accel_box`` a box over ``(xdd_h, ydd_n, thetadd)``. For ``axis="y"`` the
    result bounds ``(d_1, d_2)`` at linearization point ``x_bar`` with the
    beam position ranging over ``cell`` (default: the point itself); for
    ``axis="x"`` it bounds ``d_x``. Grid extremes are inflated by ``margin``
    = (relative, absolute).
    """
    if grid < 3:
        raise ValueError("grid needs at least 3 points per axis")
    sb = box_bounds(state_box)
    ab = box_bounds(accel_box)
    if sb is None or ab is None or state_box.dim != 6 or accel_box.dim != 3:
        raise ValueError("state_box and accel_box must be 6-D and 3-D boxes")
    lo = np.concatenate([sb[0], ab[0]])
    hi = np.concatenate([sb[1], ab[1]])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("operating region must be bounded")
    g = {name: _grid(lo[i], hi[i], grid) for i, name in enumerate(
        ("x_h", "xd", "y_n", "yd", "th", "thd", "xdd", "ydd", "thdd"))}
    if axis == "x":
        X, THD, THDD, YDD, TH = np.meshgrid(g["x_h"], g["thd"], g["thdd"], g["ydd"], g["th"], indexing="ij")
        vals = [d_x_expr(X, THD, THDD, YDD, TH, p)]
    elif axis == "y":
        if x_bar is None:
            raise ValueError("x_bar required for the Y disturbance")
        cell = (x_bar, x_bar) if cell is None else cell
        xg = _grid(cell[0], cell[1], grid)
        dig = _grid(di_range[0], di_range[1], grid)
        args1 = np.meshgrid(xg, g["xd"], g["th"], g["thd"], g["xdd"], g["thdd"], indexing="ij")
        d1 = d1_exact(x_bar, *args1, p)
        lo2, hi2 = np.inf, -np.inf
        # chunk over beam position to keep memory flat
        for xv in xg:
            XD, TH, THD, XDD, YDD, THDD, DI = np.meshgrid(
                g["xd"], g["th"], g["thd"], g["xdd"], g["ydd"], g["thdd"], dig, indexing="ij")
            d2 = d2_exact(x_bar, xv, XD, TH, THD, XDD, YDD, THDD, DI, p)
            lo2, hi2 = min(lo2, d2.min()), max(hi2, d2.max())
        vals = [d1, np.array([lo2, hi2])]
    else:
        raise ValueError("axis must be 'x' or 'y'")
    lows = np.array([v.min() for v in vals])
    highs = np.array([v.max() for v in vals])
    lows, highs = inflate_interval(lows, highs, *margin)
    return from_box(lows, highs)



# --- operating envelope ----------------------------------------------------


def euler_error_bound(Ac: np.ndarray, rates: np.ndarray, Ts: float) -> np.ndarray:
    """Per-state bound on the one-step error of the Euler model.

    Over one sample the exact increment differs from ``Ts * xdot(k)`` by
    ``Ac @ (integral of x(t) - x(k))``; with ``|xdot_j| <= rates_j`` each
    coordinate of that integral is at most ``rates_j Ts^2 / 2``. Lumped
    disturbances enter through their interval average, which stays in the
    disturbance box, so they add nothing here.
    """
    return 0.5 * Ts**2 * (np.abs(Ac) @ np.asarray(rates, dtype=float))


@dataclass(frozen=True)
class Envelope:
    """Acceleration bounds and lumped-disturbance boxes that are mutually consistent.

    ``accel`` holds half-widths for ``(xdd_h, ydd_n, thetadd)``; ``W_y`` has
    one box per bank point.
    """

    accel: np.ndarray
    W_x: Polytope
    W_y: tuple[Polytope, ...]
    iterations: int


def _maxabs(box: Polytope) -> np.ndarray:
    lo, hi = box_bounds(box)
    return np.maximum(np.abs(lo), np.abs(hi))


def operating_envelope(
    p: GantryParams,
    state_box: Polytope,
    i_x_max: float,
    i_y_vertices: np.ndarray,
    bank: ModelBank,
    accel_guess,
    grid: int = 5,
    margin: tuple[float, float] = (0.1, 1e-6),
    max_iter: int = 100,
    tol: float = 1e-9,
) -> Envelope:
    """Fixed point of accelerations and lumped disturbances over the operating region.

    The accelerations bound the disturbances (which contain acceleration
    terms) and the disturbances, states and inputs bound the accelerations
    through the control-oriented models. Starting from ``accel_guess`` the
    two maps are alternated until the acceleration bounds stop moving; the
    result never undercuts ``accel_guess``.
    """
    sb = box_bounds(state_box)
    if sb is None or state_box.dim != 6:
        raise ValueError("state_box must be a 6-D box")
    smax = np.maximum(np.abs(sb[0]), np.abs(sb[1]))
    i_y_vertices = np.atleast_2d(np.asarray(i_y_vertices, dtype=float))
    di = i_y_vertices[:, 1] - i_y_vertices[:, 0]
    di_range = (float(di.min()), float(di.max()))
    cells = bank.cells(sb[0][0], sb[1][0])
    acc = np.asarray(accel_guess, dtype=float).copy()
    floor = acc.copy()
    for it in range(1, max_iter + 1):
        ab = from_box(-acc, acc)
        W_x = disturbance_box(p, state_box, ab, grid, "x", margin=margin)
        W_y = tuple(
            disturbance_box(p, state_box, ab, grid, "y", xb, cell, di_range, margin)
            for xb, cell in zip(bank.points, cells)
        )
        new = np.zeros(3)
        new[0] = p.kx / p.Me * i_x_max + p.bx / p.Me * smax[1] + _maxabs(W_x)[0]
        for xb, W in zip(bank.points, W_y):
            Ac, Bc, Ec = y_axis_continuous(p, xb)
            y_state = smax[2:]
            drive = np.abs(i_y_vertices @ Bc[[1, 3]].T).max(axis=0)
            yt = np.abs(Ac[[1, 3]]) @ y_state + drive + np.abs(Ec[[1, 3]]) @ _maxabs(W)
            new[1:] = np.maximum(new[1:], yt)
        new = np.maximum(new, floor)
        if np.all(np.abs(new - acc) <= tol * np.maximum(1.0, np.abs(acc))):
            return Envelope(new, W_x, W_y, it)
        acc = new
    raise RuntimeError(f"operating envelope did not settle in {max_iter} iterations")
