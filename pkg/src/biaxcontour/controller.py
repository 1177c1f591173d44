"""RCI-constrained MPC for both axes, model-bank switching and the error budget.

Each axis solves a condensed QP over its future currents. Predictions use
the nominal delay-augmented model; the predicted states at steps
``1..N-1`` must lie in the slice of the axis RCI set at the known future
reference, shrunk by the disturbance image so that the realized successor
stays in the set whatever the disturbance turns out to be.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .invariance import RCISet
from .plantmodel import ModelBank
from .polytope import Polytope, erode_set

log = logging.getLogger(__name__)


class BudgetError(ValueError):
    """The error split and rotation bound are inconsistent."""


class InfeasibleStart(RuntimeError):
    """The measured state is outside the RCI slice of the current reference."""


@dataclass(frozen=True)
class ErrorBudget:
    """Split of the contouring tolerance into per-axis tracking bounds."""

    eps_c: float
    eps_x: float
    eps_y: float
    theta_max: float
    eps_x_bar: float
    D: float

    def __post_init__(self):
        if self.eps_x + self.eps_y > self.eps_c * (1 + 1e-12):
            raise BudgetError("eps_x + eps_y must not exceed eps_c")
        if not self.eps_x_bar > 0:
            raise BudgetError("theta_max leaves no X tracking margin (eps_x - D theta_max <= 0)")


def error_budget(eps_c: float, D: float, theta_max: float, split: float = 0.5) -> ErrorBudget:
    """Split ``eps_c`` between the axes and reserve ``D theta_max`` of the X share for rotation."""
    if not eps_c > 0:
        raise BudgetError("eps_c must be positive")
    if not 0 < split < 1:
        raise BudgetError("split must lie strictly between 0 and 1")
    if theta_max < 0 or D <= 0:
        raise BudgetError("theta_max must be nonnegative and D positive")
    eps_x = split * eps_c
    eps_y = (1.0 - split) * eps_c
    eps_x_bar = eps_x - D * theta_max
    if not eps_x_bar > 0:
        raise BudgetError(
            f"theta_max={theta_max} too large: needs theta_max < split*eps_c/D = {eps_x / D:.6g}")
    return ErrorBudget(eps_c, eps_x, eps_y, theta_max, eps_x_bar, D)


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights and solver limits shared by both axes."""

    N: int = 10
    Qx: float = 1e5
    Qy: float = 1e5
    Rx: float = 0.1
    Ry: tuple[tuple[float, float], tuple[float, float]] = ((0.1, 0.0), (0.0, 0.1))
    Ts: float = 0.002
    max_iter: int = 25
    slack_penalty: float = 1e8

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.Qx < 0 or self.Qy < 0:
            raise ValueError("error weights must be nonnegative")
        if not self.Rx > 0:
            raise ValueError("Rx must be positive")
        Ry = np.asarray(self.Ry, dtype=float)
        if Ry.shape != (2, 2) or not np.allclose(Ry, Ry.T) or np.linalg.eigvalsh(Ry).min() <= 0:
            raise ValueError("Ry must be a symmetric positive definite 2x2 matrix")

    @property
    def Ry_matrix(self) -> np.ndarray:
        return np.asarray(self.Ry, dtype=float)


TUNINGS = {
    "A": dict(Qx=1e5, Qy=1e5, Rx=0.1, Ry=((0.1, 0.0), (0.0, 0.1))),
    "B": dict(Qx=1e3, Qy=1e3, Rx=0.5, Ry=((0.5, 0.0), (0.0, 0.5))),
}


def tuning(name: str, **overrides) -> MpcConfig:
    """Named weight set ``"A"`` or ``"B"``; other fields come from ``overrides``."""
    try:
        weights = TUNINGS[name]
    except KeyError:
        raise ValueError(f"unknown tuning {name!r}; choose from {sorted(TUNINGS)}") from None
    return MpcConfig(**{**weights, **overrides})


# --- model selection and slices -------------------------------------------


def select_model(x_h: float, bank: ModelBank) -> int:
    """Index of the bank cell containing ``x_h``; boundaries belong to the lower cell."""
    pts = bank.points
    lo, hi = pts[0] - 0.5 * bank.spacing, pts[-1] + 0.5 * bank.spacing
    if x_h < lo or x_h > hi:
        log.warning("beam position %.4f outside the bank range [%.4f, %.4f]; clamped", x_h, lo, hi)
    return int(np.searchsorted(bank.edges, x_h, side="left"))


class EmptySliceError(ValueError):
    """The reference lies outside the class the RCI set was built for."""


def rci_slice(rci: RCISet, r) -> Polytope:
    """Constraints on the plant part once the reference state is fixed."""
    n = rci.joint.n_plant
    r = np.asarray(r, dtype=float)
    A = rci.set.A[:, :n]
    b = rci.set.b - rci.set.A[:, n:] @ r
    plant_rows = np.abs(A).max(axis=1) > 1e-14
    if np.any(b[~plant_rows] < -1e-9):
        raise EmptySliceError(f"reference {r.tolist()} is outside the certified reference set")
    S = Polytope(A[plant_rows], b[plant_rows])
    from .polytope import is_empty

    if is_empty(S):
        raise EmptySliceError(f"RCI slice at reference {r.tolist()} is empty")
    return S


# --- condensed prediction --------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """``xi(i) = Phi[i] xi(0) + Gamma[i] U`` for ``i = 0..N``."""

    Phi: np.ndarray
    Gamma: np.ndarray

    @classmethod
    def build(cls, A: np.ndarray, B: np.ndarray, N: int) -> "Prediction":
        n, m = B.shape
        Phi = np.zeros((N + 1, n, n))
        Gamma = np.zeros((N + 1, n, N * m))
        Phi[0] = np.eye(n)
        for i in range(1, N + 1):
            Phi[i] = A @ Phi[i - 1]
            Gamma[i] = A @ Gamma[i - 1]
            Gamma[i][:, (i - 1) * m:i * m] += B
        return cls(Phi, Gamma)


@dataclass
class AxisLaw:
    """Static data for one axis and one model: tightened set, prediction, output map."""

    rci: RCISet
    tight: Polytope
    pred: Prediction
    C: np.ndarray
    c0: float
    Q: float
    R: np.ndarray
    N: int

    @classmethod
    def build(cls, rci: RCISet, C, c0: float, Q: float, R, N: int) -> "AxisLaw":
        j = rci.joint
        # successor must stay in the set for every disturbance: shrink by its image
        tight = erode_set(rci.set, rci.W, j.E)
        plant = j.plant
        return cls(rci, tight, Prediction.build(plant.A, plant.B, N), np.asarray(C, dtype=float),
                   float(c0), float(Q), np.atleast_2d(np.asarray(R, dtype=float)), N)

    @property
    def n(self) -> int:
        return self.rci.joint.n_plant

    @property
    def m(self) -> int:
        return self.rci.joint.plant.nu

    def rows_per_step(self) -> int:
        return self.tight.n_rows

    def membership_margin(self, xi: np.ndarray, r: np.ndarray) -> float:
        """Largest row violation of ``(xi, r)`` in the RCI set (``<= 0`` means inside)."""
        z = np.concatenate([xi, r])
        return float(np.max(self.rci.set.A @ z - self.rci.set.b))

    def qp(self, xi: np.ndarray, refs: np.ndarray) -> qpsolver.QuadProgram:
        """Condensed QP; ``refs`` holds reference states for ticks ``k..k+N``."""
        N, n, m = self.N, self.n, self.m
        P = self.pred
        H = np.kron(np.eye(N), self.R)
        f = np.zeros(N * m)
        for i in range(1, N + 1):
            g = self.C @ P.Gamma[i]
            e0 = self.C @ (P.Phi[i] @ xi) + self.c0 - refs[i][0]
            H = H + self.Q * np.outer(g, g)
            f = f + self.Q * e0 * g
        A_T, b_T = self.tight.A[:, :n], self.tight.b
        A_r = self.tight.A[:, n:]
        rows_A, rows_b = [], []
        for i in range(1, N):
            rows_A.append(A_T @ P.Gamma[i])
            rows_b.append(b_T - A_r @ refs[i] - A_T @ (P.Phi[i] @ xi))
        U = self.rci.U
        for i in range(N):
            blk = np.zeros((U.n_rows, N * m))
            blk[:, i * m:(i + 1) * m] = U.A
            rows_A.append(blk)
            rows_b.append(U.b)
        return qpsolver.QuadProgram(2.0 * H, 2.0 * f, np.vstack(rows_A), np.concatenate(rows_b))

    def shift_active(self, active) -> list[int]:
        """Map active rows of the previous QP to the rows of the next one."""
        mr = self.rows_per_step()
        n_state = mr * (self.N - 1)
        nu_rows = self.rci.U.n_rows
        out = []
        for k in active:
            if k < n_state:
                step, row = divmod(k, mr)
                if step >= 1:
                    out.append((step - 1) * mr + row)
            else:
                step, row = divmod(k - n_state, nu_rows)
                if step >= 1:
                    out.append(n_state + (step - 1) * nu_rows + row)
        return out


def _slacked(qp: qpsolver.QuadProgram, n_state_rows: int, penalty: float) -> qpsolver.QuadProgram:
    """Same QP with one nonnegative slack relaxing every state row."""
    n = qp.n
    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = qp.H
    H[n, n] = 2.0 * penalty
    f = np.concatenate([qp.f, [0.0]])
    col = np.zeros((qp.A_in.shape[0], 1))
    col[:n_state_rows] = -1.0
    A = np.vstack([np.hstack([qp.A_in, col]), np.eye(n + 1)[-1:] * -1.0])
    b = np.concatenate([qp.b_in, [0.0]])
    return qpsolver.QuadProgram(H, f, A, b)


@dataclass
class StepResult:
    u: np.ndarray
    status: str
    kkt: float
    iterations: int
    fallback: bool
    margin: float


def solve_axis(law: AxisLaw, xi: np.ndarray, refs: np.ndarray, cfg: MpcConfig, warm=None):
    """Solve one axis QP with the slack fallback. Returns ``(StepResult, active set)``."""
    margin = law.membership_margin(xi, refs[0])
    qp = law.qp(xi, refs)
    sol = qpsolver.solve(qp, warm_start=warm, max_iter=cfg.max_iter)
    if sol.status == qpsolver.OPTIMAL:
        u = sol.x[:law.m].copy()
        return StepResult(u, sol.status, sol.kkt_residual, sol.iterations, False, margin), sol.active
    n_state = law.rows_per_step() * (law.N - 1)
    sq = _slacked(qp, n_state, cfg.slack_penalty)
    fb = qpsolver.solve(sq, max_iter=max(200, 10 * sq.A_in.shape[0]))
    if fb.status != qpsolver.OPTIMAL:
        raise RuntimeError(f"slacked QP failed with status {fb.status}")
    u = fb.x[:law.m].copy()
    return StepResult(u, sol.status, fb.kkt_residual, sol.iterations + fb.iterations, True, margin), ()


# --- two-axis controller ---------------------------------------------------


@dataclass
class Incident:
    tick: int
    axis: str
    status: str
    margin: float


@dataclass
class ControllerState:
    """Mutable per-run controller data."""

    x_law: AxisLaw
    y_laws: list[AxisLaw]
    bank: ModelBank
    Tdx: int
    Tdy: int
    cfg: MpcConfig
    reg_x: np.ndarray = field(default=None)
    reg_y: np.ndarray = field(default=None)
    j: int = -1
    warm_x: tuple = ()
    warm_y: tuple = ()
    incidents: list[Incident] = field(default_factory=list)
    tick: int = 0

    def __post_init__(self):
        if self.reg_x is None:
            self.reg_x = np.zeros(self.Tdx)
        if self.reg_y is None:
            self.reg_y = np.zeros(2 * self.Tdy)

    def xi_x(self, fb) -> np.ndarray:
        return np.concatenate([[fb[0], fb[1]], self.reg_x])

    def xi_y(self, fb) -> np.ndarray:
        return np.concatenate([[fb[2], fb[3], fb[4], fb[5]], self.reg_y])


def make_controller(x_set: RCISet, y_sets, bank: ModelBank, D: float, cfg: MpcConfig) -> ControllerState:
    """Precompute the laws of both axes for every bank point."""
    Tdx = x_set.joint.n_plant - 2
    Tdy = (y_sets[0].joint.n_plant - 4) // 2
    C_x = np.zeros(2 + Tdx)
    C_x[0] = 1.0
    x_law = AxisLaw.build(x_set, C_x, 0.0, cfg.Qx, [[cfg.Rx]], cfg.N)
    y_laws = []
    for rci, xb in zip(y_sets, bank.points):
        C_y = np.zeros(4 + 2 * Tdy)
        C_y[0], C_y[2] = 1.0, xb
        y_laws.append(AxisLaw.build(rci, C_y, -D, cfg.Qy, cfg.Ry_matrix, cfg.N))
    return ControllerState(x_law, y_laws, bank, Tdx, Tdy, cfg)


def _push(reg: np.ndarray, u: np.ndarray) -> np.ndarray:
    if reg.size == 0:
        return reg
    return np.concatenate([u, reg[:-u.size]])


def mpc_step(ctrl: ControllerState, fb, refs_x: np.ndarray, refs_y: np.ndarray):
    """One control tick. ``fb`` is ``(x_h, xd_h, y_n, yd_n, theta, thetad)``.

    Returns the currents ``(i_x, i_1, i_2)`` and per-axis :class:`StepResult`.
    """
    fb = np.asarray(fb, dtype=float)
    j = select_model(fb[0], ctrl.bank)
    if j != ctrl.j:
        ctrl.warm_y = ()
        ctrl.j = j
    xi_x, xi_y = ctrl.xi_x(fb), ctrl.xi_y(fb)
    law_y = ctrl.y_laws[j]
    rx, act_x = solve_axis(ctrl.x_law, xi_x, refs_x, ctrl.cfg, ctrl.x_law.shift_active(ctrl.warm_x) or None)
    ry, act_y = solve_axis(law_y, xi_y, refs_y, ctrl.cfg, law_y.shift_active(ctrl.warm_y) or None)
    for axis, res in (("x", rx), ("y", ry)):
        if res.fallback:
            ctrl.incidents.append(Incident(ctrl.tick, axis, res.status, res.margin))
            log.warning("tick %d: %s-axis QP %s, slack fallback used (membership margin %.3e)",
                        ctrl.tick, axis, res.status, res.margin)
    ctrl.warm_x, ctrl.warm_y = act_x, act_y
    ctrl.reg_x = _push(ctrl.reg_x, rx.u)
    ctrl.reg_y = _push(ctrl.reg_y, ry.u)
    ctrl.tick += 1
    return np.array([rx.u[0], ry.u[0], ry.u[1]]), rx, ry
