"""Closed-loop engine: plant integration, input delay, HIL emulation and traces.

Per tick ``k`` the controller reads the plant state, computes the currents
``u(k)``, pushes them into the per-axis delay lines and the plant integrates
one sample with the oldest queued input held constant.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import controller as ctl
from .pathkit import ContourPath, ReferenceTrace, end_effector, tracking_contour_error
from .plantmodel import GantryParams, PlantError, nonlinear_accel, x_axis_lti, y_axis_lti, y_theta_accel

log = logging.getLogger(__name__)

TRACE_SCHEMA = "biaxcontour-trace/1"
TRACE_COLUMNS = (
    "tick", "t", "x_h", "xd_h", "y_n", "yd_n", "theta", "thetad",
    "i_x", "i_1", "i_2", "i_x_applied", "i_1_applied", "i_2_applied",
    "x_ref", "y_ref", "e_x", "e_y", "eps", "j",
    "qp_status_x", "qp_status_y", "kkt_x", "kkt_y", "margin_x", "margin_y", "fallback",
)
PLANT_MODES = ("nonlinear", "linear", "hil")


class StartError(RuntimeError):
    """The initial state violates the RCI membership the guarantee needs."""


# --- plant -----------------------------------------------------------------


@dataclass(frozen=True)
class PlantState:
    """``(x_h, xd_h, y_n, yd_n, theta, thetad)`` in SI units."""

    x_h: float = 0.0
    xd_h: float = 0.0
    y_n: float = 0.0
    yd_n: float = 0.0
    theta: float = 0.0
    thetad: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise PlantError(f"non-finite plant state {self.as_array().tolist()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_h, self.xd_h, self.y_n, self.yd_n, self.theta, self.thetad])

    @classmethod
    def from_array(cls, s) -> "PlantState":
        return cls(*(float(v) for v in s))


def _deriv(s: np.ndarray, currents, p: GantryParams) -> np.ndarray:
    acc = nonlinear_accel(s, currents, p)
    return np.array([s[1], acc[0], s[3], acc[1], s[5], acc[2]])


def rk4_step(f, s: np.ndarray, Ts: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``s' = f(s)``."""
    k1 = f(s)
    k2 = f(s + 0.5 * Ts * k1)
    k3 = f(s + 0.5 * Ts * k2)
    k4 = f(s + Ts * k3)
    return s + Ts / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_plant(state: PlantState, currents, p: GantryParams, Ts: float) -> PlantState:
    """Advance the nonlinear plant by ``Ts`` with the currents held constant."""
    currents = np.asarray(currents, dtype=float)
    s = rk4_step(lambda z: _deriv(z, currents, p), state.as_array(), Ts)
    return PlantState.from_array(s)


class DelayLine:
    """FIFO of depth ``Td`` that starts filled with zeros; ``Td=0`` passes through."""

    def __init__(self, Td: int, width: int):
        if Td < 0:
            raise ValueError("Td must be nonnegative")
        self.Td = Td
        self.width = width
        self._q = deque(np.zeros(width) for _ in range(Td))

    def push_pop(self, u) -> np.ndarray:
        u = np.array(u, dtype=float).reshape(self.width)
        if self.Td == 0:
            return u
        self._q.append(u)
        return self._q.popleft()

    def contents(self) -> list[np.ndarray]:
        """Queued inputs, newest first (the controller's register order)."""
        return [q.copy() for q in reversed(self._q)]


# --- HIL emulation ---------------------------------------------------------


@dataclass(frozen=True)
class RigParams:
    """Back-to-back motor rig: inertia ``M_A``, torque constant ``k_A``, friction ``b_A``.

    ``coulomb`` and ``noise`` set the rig nonlinearity ``F_n`` (in force
    units) as ``coulomb*sign(v) + uniform(-noise, noise)``.
    """

    M_A: float = 2.0
    k_A: float = 1.5
    b_A: float = 5.0
    coulomb: float = 0.1
    noise: float = 0.1

    def __post_init__(self):
        for name in ("M_A", "k_A", "b_A"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.coulomb < 0 or self.noise < 0:
            raise ValueError("coulomb and noise must be nonnegative")

    @property
    def fn_bound(self) -> float:
        return self.coulomb + self.noise


def hil_torque(i_x: float, xd_h: float, d_x: float, p: GantryParams, rig: RigParams) -> float:
    """Load command that makes the rig reproduce the machine X dynamics."""
    return rig.M_A * ((rig.k_A / rig.M_A - p.kx / p.Me) * i_x - (rig.b_A / rig.M_A - p.bx / p.Me) * xd_h - d_x)


def rig_accel(i_x: float, xd_h: float, F_L: float, F_n: float, rig: RigParams) -> float:
    """Rig acceleration under drive current, load command and nonlinearity."""
    return (rig.k_A * i_x - rig.b_A * xd_h - F_L - F_n) / rig.M_A


def hil_x_step(x, i_x_delayed: float, F_N: float, p: GantryParams, rig: RigParams, Ts: float) -> np.ndarray:
    """Discrete rig update for ``(x_h, xd_h)``; ``F_N`` is the velocity disturbance of one tick."""
    x_h, xd = float(x[0]), float(x[1])
    xd_next = Ts * p.kx / p.Me * i_x_delayed + (1.0 - Ts * rig.b_A / rig.M_A) * xd + F_N
    return np.array([x_h + Ts * xd, xd_next])


def rig_nonlinearity(xd_h: float, rig: RigParams, rng: np.random.Generator) -> float:
    return rig.coulomb * float(np.sign(xd_h)) + rng.uniform(-rig.noise, rig.noise)


# --- traces ----------------------------------------------------------------


@dataclass
class Trace:
    """One closed-loop run, one row per control tick."""

    Ts: float
    rows: list[dict] = field(default_factory=list)
    incidents: list[ctl.Incident] = field(default_factory=list)
    solve_times: list[float] = field(default_factory=list)
    config_hash: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={TRACE_SCHEMA} config_hash={self.config_hash} Ts={self.Ts!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in TRACE_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> str:
        """Write the CSV and return its SHA-256."""
        text = self.to_csv()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return hashlib.sha256(text.encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class TraceFormatError(ValueError):
    """A trace file has the wrong schema version or columns."""


def read_trace(path) -> Trace:
    """Load a trace written by :meth:`Trace.write_csv`."""
    try:
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().strip()
            if not head.startswith("#"):
                raise TraceFormatError(f"{path}: missing trace header line")
            meta = dict(item.split("=", 1) for item in head[1:].split() if "=" in item)
            if meta.get("schema") != TRACE_SCHEMA:
                raise TraceFormatError(f"{path}: schema {meta.get('schema')!r}, expected {TRACE_SCHEMA!r}")
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise TraceFormatError(f"{path}: unexpected columns")
            rows = []
            for rec in reader:
                row = {}
                for c in TRACE_COLUMNS:
                    v = rec[c]
                    if c in ("tick", "j", "fallback"):
                        row[c] = int(v)
                    elif c.startswith("qp_status"):
                        row[c] = v
                    else:
                        row[c] = float(v)
                rows.append(row)
            Ts = float(meta["Ts"])
    except OSError as err:
        raise TraceFormatError(f"cannot read trace {path}: {err}") from err
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, TraceFormatError):
            raise
        raise TraceFormatError(f"{path}: malformed trace ({err})") from err
    return Trace(Ts, rows, config_hash=meta.get("config_hash", ""))


# --- closed loop -----------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Everything a run needs besides the controller."""

    path: ContourPath
    reference: ReferenceTrace
    params: GantryParams
    Ts: float
    mode: str = "nonlinear"
    rig: RigParams = field(default_factory=RigParams)
    seed: int = 0
    quantum: float = 0.0

    def __post_init__(self):
        if self.mode not in PLANT_MODES:
            raise ValueError(f"plant mode must be one of {PLANT_MODES}")
        if abs(self.reference.Ts - self.Ts) > 1e-15:
            raise ValueError("reference and scenario sample times differ")


def initial_state(sc: Scenario) -> PlantState:
    """At rest on the reference start with zero rotation."""
    return PlantState(sc.reference.x[0], 0.0, sc.reference.y[0] + sc.params.D, 0.0, 0.0, 0.0)


def _check_start(c: ctl.ControllerState, fb: np.ndarray, rx, ry) -> None:
    j = ctl.select_model(fb[0], c.bank)
    mx = c.x_law.membership_margin(c.xi_x(fb), rx)
    my = c.y_laws[j].membership_margin(c.xi_y(fb), ry)
    if mx > 1e-9 or my > 1e-9:
        raise StartError(f"initial state outside the RCI sets (x margin {mx:.3e}, y margin {my:.3e})")


def _linear_step(s: np.ndarray, u: np.ndarray, p: GantryParams, Ts: float, x_bar: float) -> np.ndarray:
    sx = x_axis_lti(p, Ts).step(s[:2], u[:1])
    sy = y_axis_lti(p, x_bar, Ts).step(s[2:], u[1:])
    return np.concatenate([sx, sy])


def _hil_step(s: np.ndarray, u: np.ndarray, p: GantryParams, rig: RigParams, Ts: float,
              rng: np.random.Generator) -> np.ndarray:
    # the rig sees the lumped machine disturbance as zero; F_n is the only X perturbation
    F_n = rig_nonlinearity(s[1], rig, rng)
    F_N = -Ts * F_n / rig.M_A
    sx = hil_x_step(s[:2], u[0], F_N, p, rig, Ts)
    a = (sx[1] - s[1]) / Ts

    def f(z):
        t = z[4]
        xs = np.array([s[0] + s[1] * t + 0.5 * a * t * t, s[1] + a * t, z[0], z[1], z[2], z[3]])
        yt = y_theta_accel(xs, a, u, p)
        return np.array([z[1], yt[0], z[3], yt[1], 1.0])

    # integrate Y/theta with the rig's X motion prescribed; the last entry is time
    z = rk4_step(f, np.array([s[2], s[3], s[4], s[5], 0.0]), Ts)
    return np.array([sx[0], sx[1], z[0], z[1], z[2], z[3]])


def run_closed_loop(sc: Scenario, c: ctl.ControllerState, config_hash: str = "") -> Trace:
    """Simulate until the reference is exhausted and return the trace.

    ``c`` must be a fresh controller; its register mirrors are the delay lines.
    """
    p, Ts, N = sc.params, sc.Ts, c.cfg.N
    rng = np.random.default_rng(sc.seed)
    ref = sc.reference
    dx, dy = DelayLine(c.Tdx, 1), DelayLine(c.Tdy, 2)
    s = initial_state(sc).as_array()
    trace = Trace(Ts, config_hash=config_hash)
    _check_start(c, s, ref.state("x", 0), ref.state("y", 0))
    for k in range(len(ref)):
        fb = s.copy()
        if sc.quantum > 0:
            fb = np.round(fb / sc.quantum) * sc.quantum
        rx, ry = ref.states("x", k, N + 1), ref.states("y", k, N + 1)
        t0 = time.perf_counter()
        u, res_x, res_y = ctl.mpc_step(c, fb, rx, ry)
        trace.solve_times.append(time.perf_counter() - t0)
        applied = np.concatenate([dx.push_pop(u[:1]), dy.push_pop(u[1:])])
        x_e, y_e = end_effector(s[0], s[2], s[4], p.D)
        e_x, e_y = ref.x[k] - x_e, ref.y[k] - y_e
        trace.rows.append({
            "tick": k, "t": k * Ts,
            "x_h": s[0], "xd_h": s[1], "y_n": s[2], "yd_n": s[3], "theta": s[4], "thetad": s[5],
            "i_x": u[0], "i_1": u[1], "i_2": u[2],
            "i_x_applied": applied[0], "i_1_applied": applied[1], "i_2_applied": applied[2],
            "x_ref": ref.x[k], "y_ref": ref.y[k], "e_x": e_x, "e_y": e_y,
            "eps": tracking_contour_error((x_e, y_e), (ref.x[k], ref.y[k]), sc.path), "j": c.j,
            "qp_status_x": res_x.status, "qp_status_y": res_y.status,
            "kkt_x": res_x.kkt, "kkt_y": res_y.kkt,
            "margin_x": res_x.margin, "margin_y": res_y.margin,
            "fallback": int(res_x.fallback) + 2 * int(res_y.fallback),
        })
        if sc.mode == "nonlinear":
            s = step_plant(PlantState.from_array(s), applied, p, Ts).as_array()
        elif sc.mode == "linear":
            s = _linear_step(s, applied, p, Ts, c.bank.points[c.j])
        else:
            s = _hil_step(s, applied, p, sc.rig, Ts, rng)
        if not np.all(np.isfinite(s)):
            raise PlantError(f"plant state became non-finite at tick {k}")
    trace.incidents = list(c.incidents)
    return trace


__all__ = [
    "DelayLine",
    "PLANT_MODES",
    "PlantState",
    "RigParams",
    "Scenario",
    "StartError",
    "TRACE_COLUMNS",
    "TRACE_SCHEMA",
    "Trace",
    "TraceFormatError",
    "hil_torque",
    "hil_x_step",
    "initial_state",
    "read_trace",
    "rig_accel",
    "rk4_step",
    "run_closed_loop",
    "step_plant",
]
