"""Robust control invariant (RCI) sets for joint plant/reference systems.

The joint state is ``z = (xi_bar, r)``: the delay-augmented plant state
followed by the reference state of one axis. The joint update is

    z+ = Aj z + Bj u + Ej d + Fj u_r

with ``Aj = blkdiag(A_bar, A_r)``, ``Bj = [B_bar; 0]``, ``Ej = [E_bar; 0]``
and ``Fj = [0; B_r]``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _lp
from .plantmodel import DiscreteLTI
from .polytope import (
    Polytope,
    EmptySetError,
    bounding_box,
    box_bounds,
    cartesian,
    chebyshev_center,
    first_violation,
    erode_ball,
    erode_set,
    from_box,
    affine_preimage,
    intersect,
    is_empty,
    lift,
    project,
    reduce,
    support_many,
)

log = logging.getLogger(__name__)


class RCIEmptyError(RuntimeError):
    """An iterate of the set recursion became empty."""


class RCIConvergenceError(RuntimeError):
    """The recursion hit its iteration cap before the termination test passed."""

    def __init__(self, message: str, margin: float, log_: "IterationLog"):
        super().__init__(message)
        self.margin = margin
        self.log = log_


@dataclass
class IterationLog:
    """Per-iteration diagnostics of a set recursion."""

    rows: list[int] = field(default_factory=list)
    margins: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    reason: str = ""

    def record(self, rows: int, margin: float, seconds: float) -> None:
        self.rows.append(int(rows))
        self.margins.append(float(margin))
        self.seconds.append(float(seconds))

    def to_record(self) -> dict:
        return {"rows": self.rows, "margins": self.margins, "seconds": self.seconds, "reason": self.reason}

    @classmethod
    def from_record(cls, rec: dict) -> "IterationLog":
        return cls(list(rec["rows"]), list(rec["margins"]), list(rec["seconds"]), rec["reason"])


@dataclass(frozen=True)
class JointSystem:
    """A delay-augmented plant model paired with one reference axis.

    ``ref`` may be ``None`` for a subsystem that tracks nothing; the joint
    state is then the plant state alone.
    """

    plant: DiscreteLTI
    ref: DiscreteLTI | None = None

    def __post_init__(self):
        if self.ref is not None and self.plant.Ts != self.ref.Ts:
            raise ValueError("plant and reference must share the sample time")

    @property
    def n_plant(self) -> int:
        return self.plant.nx

    @property
    def n_ref(self) -> int:
        return 0 if self.ref is None else self.ref.nx

    @property
    def n_ref_input(self) -> int:
        return 0 if self.ref is None else self.ref.nu

    @property
    def dim(self) -> int:
        return self.n_plant + self.n_ref

    @property
    def A(self) -> np.ndarray:
        n, m = self.n_plant, self.n_ref
        A = np.zeros((n + m, n + m))
        A[:n, :n] = self.plant.A
        if m:
            A[n:, n:] = self.ref.A
        return A

    @property
    def B(self) -> np.ndarray:
        return np.vstack([self.plant.B, np.zeros((self.n_ref, self.plant.nu))])

    @property
    def E(self) -> np.ndarray:
        return np.vstack([self.plant.E, np.zeros((self.n_ref, self.plant.nd))])

    @property
    def F(self) -> np.ndarray:
        if self.ref is None:
            return np.zeros((self.n_plant, 0))
        return np.vstack([np.zeros((self.n_plant, self.ref.nu)), self.ref.B])

    def to_record(self) -> dict:
        return {"plant": self.plant.to_record(), "ref": None if self.ref is None else self.ref.to_record()}

    @classmethod
    def from_record(cls, rec: dict) -> "JointSystem":
        ref = rec.get("ref")
        return cls(DiscreteLTI.from_record(rec["plant"]), None if ref is None else DiscreteLTI.from_record(ref))


@dataclass(frozen=True)
class RCISet:
    """An RCI set with everything needed to use and re-certify it."""

    set: Polytope
    lin_point: float | None
    rho: float
    iterations: int
    joint: JointSystem
    U: Polytope
    W: Polytope
    Ur: Polytope | None
    ref_ci: Polytope | None
    log: IterationLog = field(default_factory=IterationLog)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.joint.n_plant, self.joint.n_ref)

    def to_record(self) -> dict:
        return {
            "set": self.set.to_record(),
            "lin_point": self.lin_point,
            "rho": self.rho,
            "iterations": self.iterations,
            "joint": self.joint.to_record(),
            "U": self.U.to_record(),
            "W": self.W.to_record(),
            "Ur": None if self.Ur is None else self.Ur.to_record(),
            "ref_ci": None if self.ref_ci is None else self.ref_ci.to_record(),
            "log": self.log.to_record(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RCISet":
        return cls(
            Polytope.from_record(rec["set"]),
            rec["lin_point"],
            float(rec["rho"]),
            int(rec["iterations"]),
            JointSystem.from_record(rec["joint"]),
            Polytope.from_record(rec["U"]),
            Polytope.from_record(rec["W"]),
            None if rec["Ur"] is None else Polytope.from_record(rec["Ur"]),
            None if rec["ref_ci"] is None else Polytope.from_record(rec["ref_ci"]),
            IterationLog.from_record(rec["log"]),
        )


# --- helpers ---------------------------------------------------------------


def _half_widths(P: Polytope) -> np.ndarray:
    lo, hi = bounding_box(P)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("set must be bounded to be normalized")
    w = 0.5 * (hi - lo)
    return np.where(w > 1e-12, w, 1.0)


def _to_scaled(P: Polytope, s: np.ndarray) -> Polytope:
    """``{zh | s * zh in P}``."""
    return Polytope(P.A * s[None, :], P.b)


def _from_scaled(P: Polytope, s: np.ndarray) -> Polytope:
    return Polytope(P.A / s[None, :], P.b)


def _pre(T: Polytope, A, B, U: Polytope, rho: float, erosions=(), within: Polytope | None = None) -> Polytope:
    """``{z in within | exists u in U: A z + B u + (every erosion term) in T - B(rho)}``.

    Intersecting with ``within`` before eliminating ``u`` gives the same set as
    intersecting afterwards but keeps every intermediate polytope bounded.
    """
    S = erode_ball(T, rho)
    for M, W in erosions:
        if W is None:
            continue
        S = erode_set(S, W, M)
    n, m = A.shape[1], B.shape[1]
    L = affine_preimage(S, np.hstack([A, B]))
    L = intersect(L, lift(U, n + m, range(n, n + m)))
    if within is not None:
        L = intersect(L, lift(within, n + m, range(n)))
    return project(L, range(n))


def pre_robust(target: Polytope, joint: "JointSystem", U: Polytope, W: Polytope | None,
               Ur: Polytope | None = None, rho: float = 0.0, within: Polytope | None = None) -> Polytope:
    """Joint states from which some ``u in U`` keeps the successor in ``target - B(rho)``
    for every disturbance in ``W`` and every reference input in ``Ur``.

    ``None`` for ``W`` or ``Ur`` means that channel is absent.
    """
    return reduce(_pre(target, joint.A, joint.B, U, rho, ((joint.E, W), (joint.F, Ur)), within))


def _ref_part(Rs: Polytope, joint: JointSystem) -> Polytope | None:
    if joint.n_ref == 0:
        return None
    return project(Rs, range(joint.n_plant, joint.dim))


def _max_margin(outer: Polytope, inner: Polytope) -> float:
    """Row violation of ``inner`` inside ``outer``: the largest one when contained,
    otherwise the first one found above tolerance (``-inf`` when ``inner`` is empty)."""
    return float(first_violation(outer, inner))


# --- reference set ---------------------------------------------------------


def reference_ci(ref: DiscreteLTI, Xr: Polytope, Ur: Polytope, rho: float = 1e-4,
                 max_iter: int = 200) -> tuple[Polytope, IterationLog]:
    """Control invariant subset of ``Xr`` for the reference model under inputs ``Ur``.

    Iterates ``C+ = C ∩ Pre(C - B(rho))`` in normalized coordinates and stops once
    ``C - B(rho)`` fits inside the next iterate.
    """
    s = _half_widths(Xr)
    su = _half_widths(Ur) if Ur.dim else np.ones(0)
    A = ref.A * s[None, :] / s[:, None]
    B = ref.B * su[None, :] / s[:, None]
    Uh = _to_scaled(Ur, su)
    C = reduce(_to_scaled(Xr, s))
    lg = IterationLog()
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        C_next = reduce(_pre(C, A, B, Uh, rho, within=C))
        if is_empty(C_next):
            lg.reason = "empty"
            raise RCIEmptyError(f"reference set empty at iteration {it}")
        margin = _max_margin(C_next, erode_ball(C, rho))
        lg.record(C_next.n_rows, margin, time.perf_counter() - t0)
        C = C_next
        if margin <= _lp.FEAS_TOL:
            lg.reason = "converged"
            return reduce(_from_scaled(C, s)), lg
    lg.reason = "max_iter"
    raise RCIConvergenceError(f"reference set did not converge in {max_iter} iterations",
                              lg.margins[-1], lg)


# --- joint recursion -------------------------------------------------------


def rci_algorithm1(
    R0_bar: Polytope,
    Rs: Polytope,
    joint: JointSystem,
    U: Polytope,
    W: Polytope,
    Ur: Polytope | None,
    rho: float = 1e-4,
    max_iter: int = 200,
    lin_point: float | None = None,
    ref_ci: Polytope | None = None,
) -> RCISet:
    """Robust invariant set for the joint plant/reference system.

    With ``P(T)`` the set of joint states from which some admissible input
    keeps the successor in ``T - B(rho)`` for every disturbance and every
    reference input, the recursion is

        Rb_{m+1} = P(Rb_m) ∩ Rb_m,    R_{m+1} = Rs ∩ Rb_{m+1}

    and stops when ``Rs ∩ (Rb_m - B(rho))`` lies inside ``R_{m+1}``. The
    ball lives in the full joint space and all coordinates are normalized by
    the half-widths of ``R0_bar ∩ Rs``.

    Raises:
        RCIEmptyError: an iterate became empty.
        RCIConvergenceError: ``max_iter`` reached.
    """
    lp = [lin_point] if lin_point is not None else None
    return rci_switched(R0_bar, Rs, [joint], U, [W], Ur, rho, max_iter, lp, ref_ci)[0]


def rci_switched(
    R0_bar: Polytope,
    Rs: Polytope,
    joints,
    U: Polytope,
    Ws,
    Ur: Polytope | None,
    rho: float = 1e-4,
    max_iter: int = 200,
    lin_points=None,
    ref_ci: Polytope | None = None,
) -> list[RCISet]:
    """One set that is robustly invariant for every model of a switched family.

    The pre-set of each iteration is the intersection of the pre-sets of all
    models, each with its own input, so the set stays invariant whatever
    model is active at each step as long as the controller knows which one
    it is. Returns one :class:`RCISet` per model, all sharing the same polytope.
    """
    joints, Ws = list(joints), list(Ws)
    if not joints or len(joints) != len(Ws):
        raise ValueError("need one disturbance set per model")
    n = joints[0].dim
    if R0_bar.dim != n or Rs.dim != n:
        raise ValueError(f"R0_bar and Rs must live in the {n}-D joint space")
    for joint, W in zip(joints, Ws):
        if joint.dim != n:
            raise ValueError("all models must share the joint dimension")
        if U.dim != joint.plant.nu or W.dim != joint.plant.nd or (0 if Ur is None else Ur.dim) != joint.n_ref_input:
            raise ValueError("U, W, Ur dimensions do not match the joint system")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    lin_points = list(lin_points) if lin_points is not None else [None] * len(joints)
    s = _half_widths(intersect(R0_bar, Rs))
    su = _half_widths(U)
    scaled = [
        (j.A * s[None, :] / s[:, None], j.B * su[None, :] / s[:, None], j.E / s[:, None], j.F / s[:, None])
        for j in joints
    ]
    Uh = _to_scaled(U, su)
    Rb = reduce(_to_scaled(R0_bar, s))
    Rsh = reduce(_to_scaled(Rs, s))
    if is_empty(Rb) or is_empty(intersect(Rb, Rsh)):
        raise RCIEmptyError("initial set is empty")
    lg = IterationLog()
    t_start = time.perf_counter()
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        Rb_next = Rb
        for (A, B, E, F), W in zip(scaled, Ws):
            Rb_next = intersect(Rb_next, _pre(Rb, A, B, Uh, rho, erosions=((E, W), (F, Ur)), within=Rb))
        Rb_next = reduce(Rb_next)
        R_next = reduce(intersect(Rsh, Rb_next))
        if is_empty(R_next):
            lg.reason = "empty"
            raise RCIEmptyError(f"iterate empty at iteration {it}")
        margin = _max_margin(R_next, intersect(Rsh, erode_ball(Rb, rho)))
        lg.record(R_next.n_rows, margin, time.perf_counter() - t0)
        log.debug("rci iteration %d: %d rows, margin %.3e", it, R_next.n_rows, margin)
        Rb = Rb_next
        if margin <= _lp.FEAS_TOL:
            lg.reason = "converged"
            log.info("rci converged after %d iterations (%.1f s)", it, time.perf_counter() - t_start)
            S = reduce(_from_scaled(R_next, s))
            rc = ref_ci if ref_ci is not None else _ref_part(Rs, joints[0])
            return [
                RCISet(set=S, lin_point=lp, rho=rho, iterations=it, joint=j, U=U, W=W, Ur=Ur,
                       ref_ci=rc, log=lg)
                for j, W, lp in zip(joints, Ws, lin_points)
            ]
    lg.reason = "max_iter"
    raise RCIConvergenceError(f"no convergence in {max_iter} iterations (margin {lg.margins[-1]:.3e})",
                              lg.margins[-1], lg)


# --- initial sets ----------------------------------------------------------


def _register_box(U: Polytope, Td: int) -> list[Polytope]:
    return [U] * Td


def inflate_box(box: Polytope, factor: float) -> Polytope:
    """Scale a box about its center."""
    lo, hi = bounding_box(box)
    c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return from_box(c - factor * h, c + factor * h)


def build_R0_x(X_x: Polytope, U_x: Polytope, Td: int, eps_bar_x: float,
               ref_box: Polytope | None = None) -> Polytope:
    """Admissible joint set for the X axis over ``(x_h, xd_h, regs..., x*, xd*)``.

    The band ``|x* - x_h| <= eps_bar_x`` couples plant and reference.
    ``ref_box`` optionally bounds the reference coordinates; pass a box well
    outside the reference invariant set so it never binds there.
    """
    if eps_bar_x <= 0:
        raise ValueError("band half-width must be positive")
    rb = Polytope.universe(2) if ref_box is None else ref_box
    base = cartesian(X_x, *_register_box(U_x, Td), rb)
    n = base.dim
    a = np.zeros(n)
    a[0], a[n - 2] = -1.0, 1.0
    band = Polytope(np.vstack([a, -a]), np.array([eps_bar_x, eps_bar_x]))
    return reduce(intersect(base, band))


def build_R0_y(X_y: Polytope, U_y: Polytope, Td: int, x_bar: float, D: float, eps_y: float,
               ref_box: Polytope | None = None) -> Polytope:
    """Admissible joint set for the Y axis over ``(y_n, yd_n, theta, thetad, regs..., y*, yd*)``.

    The band bounds the linearized end-effector error
    ``y* - (y_n + x_bar theta - D)`` by ``eps_y``. ``ref_box`` is as in
    :func:`build_R0_x`.
    """
    if eps_y <= 0:
        raise ValueError("band half-width must be positive")
    rb = Polytope.universe(2) if ref_box is None else ref_box
    base = cartesian(X_y, *_register_box(U_y, Td), rb)
    n = base.dim
    a = np.zeros(n)
    a[0], a[2], a[n - 2] = -1.0, -x_bar, 1.0
    band = Polytope(np.vstack([a, -a]), np.array([eps_y - D, eps_y + D]))
    return reduce(intersect(base, band))


def band(dim: int, coeffs: dict[int, float], half_width: float, offset: float = 0.0) -> Polytope:
    """``{z : |sum_i c_i z_i + offset| <= half_width}``."""
    if half_width <= 0:
        raise ValueError("band half-width must be positive")
    a = np.zeros(dim)
    for i, c in coeffs.items():
        a[i] = c
    return Polytope(np.vstack([a, -a]), np.array([half_width - offset, half_width + offset]))


def lift_reference(ref_ci: Polytope, joint: JointSystem) -> Polytope:
    """The reference invariant set as a cylinder in joint space."""
    return lift(ref_ci, joint.dim, range(joint.n_plant, joint.dim))


# --- certificate -----------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    samples: int
    failures: int
    worst_margin: float
    sampler: str

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_record(self) -> dict:
        return {"samples": self.samples, "failures": self.failures,
                "worst_margin": self.worst_margin, "sampler": self.sampler}


def sample_points(P: Polytope, n: int, rng: np.random.Generator,
                  max_candidates: int = 2_000_000) -> tuple[np.ndarray, str]:
    """Points of ``P``: rejection sampling over the bounding box, topped up
    by hit-and-run from the Chebyshev center when acceptance is too low."""
    lo, hi = bounding_box(P)
    got = []
    total = 0
    batch = 20_000
    while total < max_candidates and sum(len(g) for g in got) < n:
        cand = rng.uniform(lo, hi, size=(batch, P.dim))
        ok = np.all(cand @ P.A.T <= P.b, axis=1)
        got.append(cand[ok])
        total += batch
    pts = np.vstack(got)[:n] if got else np.zeros((0, P.dim))
    if len(pts) == n:
        return pts, "rejection"
    need = n - len(pts)
    return np.vstack([pts, hit_and_run(P, need, rng)]), "rejection+hit-and-run"


def hit_and_run(P: Polytope, n: int, rng: np.random.Generator, thin: int = 10) -> np.ndarray:
    """Approximately uniform points of a bounded full-dimensional polytope."""
    x, _ = chebyshev_center(P)
    out = np.empty((n, P.dim))
    for i in range(n * thin):
        d = rng.normal(size=P.dim)
        d /= np.linalg.norm(d)
        ad = P.A @ d
        slack = P.b - P.A @ x
        with np.errstate(divide="ignore"):
            t = slack / ad
        t_hi = np.min(t[ad > 1e-14], initial=np.inf)
        t_lo = np.max(t[ad < -1e-14], initial=-np.inf)
        x = x + rng.uniform(t_lo, t_hi) * d
        if (i + 1) % thin == 0:
            out[(i + 1) // thin - 1] = x
    return out


def admissible_ref_inputs(rci: RCISet, r: np.ndarray) -> Polytope:
    """Reference inputs that keep the reference inside its invariant set."""
    ref = rci.joint.ref
    S = affine_preimage(rci.ref_ci, ref.B, ref.A @ r)
    return intersect(S, rci.Ur)


def one_step_margin(rci: RCISet, z: np.ndarray) -> float:
    """Best worst-case slack, over admissible inputs, of the successor of ``z``.

    Nonnegative means some input keeps the successor inside the set for every
    disturbance and every admissible reference input. Each row of the set is
    checked against its own worst case (a support function), which is the
    same condition as checking every vertex of ``W x Ur`` jointly.
    """
    j = rci.joint
    n_p = j.n_plant
    A_R, b_R = rci.set.A, rci.set.b
    worst = _box_support(rci.W, A_R @ j.E)
    if j.n_ref:
        Ur_r = admissible_ref_inputs(rci, z[n_p:])
        if is_empty(Ur_r):
            return -np.inf
        AF = A_R @ j.F
        bb = box_bounds(reduce(Ur_r))
        if bb is not None and np.all(np.isfinite(bb[0])) and np.all(np.isfinite(bb[1])):
            worst = worst + _box_support(from_box(*bb), AF)
        else:
            worst = worst + support_many(Ur_r, AF)
    rhs = b_R - A_R @ (j.A @ z) - worst
    m = j.plant.nu
    A_lp = np.vstack([
        np.hstack([A_R @ j.B, np.ones((len(b_R), 1))]),
        np.hstack([rci.U.A, np.zeros((rci.U.n_rows, 1))]),
    ])
    b_lp = np.concatenate([rhs, rci.U.b])
    c = np.zeros(m + 1)
    c[-1] = 1.0
    res = _lp.maximize(c, A_lp, b_lp, bounds=[(None, None)] * m + [(None, 1.0)])
    if res.status != _lp.OPTIMAL:
        return -np.inf
    return res.value


def _box_support(box: Polytope, M: np.ndarray) -> np.ndarray:
    """``max over w in box of M w`` row by row."""
    if M.shape[1] == 0:
        return np.zeros(M.shape[0])
    bb = box_bounds(box)
    if bb is None:
        return support_many(box, M)
    lo, hi = bb
    return np.where(M > 0, M * hi, M * lo).sum(axis=1)


def verify_invariance(rci: RCISet, n_samples: int = 1000, seed: int = 0,
                      tol: float = _lp.FEAS_TOL) -> Certificate:
    """Sample the set and check the one-step robust invariance condition at each point."""
    rng = np.random.default_rng(seed)
    pts, sampler = sample_points(rci.set, n_samples, rng)
    worst = np.inf
    failures = 0
    for z in pts:
        m = one_step_margin(rci, z)
        worst = min(worst, m)
        if m < -tol:
            failures += 1
    return Certificate(len(pts), failures, float(worst), sampler)


def slice_box(P: Polytope, fixed: dict[int, float]) -> Polytope:
    """Restrict ``P`` by fixing some coordinates; the result keeps the other coordinates."""
    keep = [i for i in range(P.dim) if i not in fixed]
    idx = np.array(list(fixed.keys()), dtype=int)
    val = np.array(list(fixed.values()), dtype=float)
    b = P.b - P.A[:, idx] @ val if idx.size else P.b
    return Polytope(P.A[:, keep], b)


def state_box(lower, upper) -> Polytope:
    return from_box(lower, upper)


__all__ = [
    "Certificate",
    "EmptySetError",
    "IterationLog",
    "JointSystem",
    "RCIConvergenceError",
    "RCIEmptyError",
    "RCISet",
    "admissible_ref_inputs",
    "build_R0_x",
    "build_R0_y",
    "band",
    "inflate_box",
    "lift_reference",
    "one_step_margin",
    "pre_robust",
    "rci_algorithm1",
    "rci_switched",
    "reference_ci",
    "sample_points",
    "slice_box",
    "verify_invariance",
]
