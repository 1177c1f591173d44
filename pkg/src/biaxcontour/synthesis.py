"""Offline construction of every set the controllers need.

The pipeline is:

1. an operating envelope: acceleration bounds and lumped-disturbance boxes
   that are consistent with the state and current limits;
2. a control invariant set per reference axis;
3. the X-axis RCI set from the joint recursion;
4. one Y/theta RCI set shared by every bank model, so switching between
   models never leaves it.

The Y/theta model is split with the current transform
``(i_1, i_2) = ((u_s - u_d)/2, (u_s + u_d)/2)`` into a translational part
driven by the sum ``u_s`` and a torsional part driven by the difference
``u_d``. Each part gets its own recursion with the other part's influence
bounded as an extra disturbance, and the two results are intersected in
the full coordinates. The composed set is then certified against the full
coupled model of each bank point, which is the only check that matters for
the controller.

All models carry an additional identity disturbance channel on the plant
states that bounds the one-step error of the Euler discretization.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .controller import ErrorBudget
from .invariance import (
    JointSystem,
    RCISet,
    band,
    inflate_box,
    lift_reference,
    rci_algorithm1,
    rci_switched,
    reference_ci,
    verify_invariance,
)
from .plantmodel import (
    DiscreteLTI,
    Envelope,
    GantryParams,
    ModelBank,
    augment_delay,
    euler_error_bound,
    operating_envelope,
    reference_model,
    x_axis_lti,
    y_axis_continuous,
    y_axis_lti,
)
from .polytope import (
    Polytope,
    affine_preimage,
    bounding_box,
    cartesian,
    from_box,
    intersect,
    is_empty,
    reduce,
)

log = logging.getLogger(__name__)

# (i_1, i_2) = T (u_s, u_d)
SUM_DIFF = np.array([[0.5, -0.5], [0.5, 0.5]])


@dataclass(frozen=True)
class SynthesisSetup:
    """Everything the offline build depends on (and nothing else)."""

    params: GantryParams
    budget: ErrorBudget
    Ts: float
    Tdx: int
    Tdy: int
    rho: float
    bank_points: tuple[float, ...]
    bank_spacing: float
    x_box: tuple[tuple[float, float], tuple[float, float]]
    y_box: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    i_x: float
    i_sum: float
    i_diff: float
    rel_velocity: tuple[float, float]
    ref_x: tuple[tuple[float, float], tuple[float, float]]
    ref_y: tuple[tuple[float, float], tuple[float, float]]
    a_max: float
    grid: int = 5
    max_iter: int = 200

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["params"] = asdict(self.params)
        rec["budget"] = asdict(self.budget)
        return rec

    @property
    def bank(self) -> ModelBank:
        return ModelBank(tuple(self.bank_points), self.bank_spacing)

    def state_box(self) -> Polytope:
        """6-D box over ``(x_h, xd_h, y_n, yd_n, theta, thetad)``."""
        (xl, xh), (vl, vh) = self.x_box
        (yl, yh), (wl, wh), (tl, th) = self.y_box
        t = self.budget.theta_max
        return from_box([xl, vl, yl, wl, -t, tl], [xh, vh, yh, wh, t, th])

    def y_inputs(self) -> Polytope:
        """Admissible ``(i_1, i_2)``: bounded sum and bounded difference."""
        A = np.array([[1.0, 1.0], [-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0]])
        b = np.array([self.i_sum, self.i_sum, self.i_diff, self.i_diff])
        return Polytope(A, b)

    def y_input_vertices(self) -> np.ndarray:
        v = np.array([[s, d] for s in (-self.i_sum, self.i_sum) for d in (-self.i_diff, self.i_diff)])
        return v @ SUM_DIFF.T

    def ref_box(self, axis: str) -> Polytope:
        (pl, ph), (vl, vh) = self.ref_x if axis == "x" else self.ref_y
        return from_box([pl, vl], [ph, vh])

    def ref_inputs(self) -> Polytope:
        return from_box([-self.a_max], [self.a_max])


@dataclass(frozen=True)
class SetBundle:
    """Result of the offline build."""

    ref_ci_x: Polytope
    ref_ci_y: Polytope
    x: RCISet
    y: tuple[RCISet, ...]
    accel: np.ndarray
    report: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "ref_ci_x": self.ref_ci_x.to_record(),
            "ref_ci_y": self.ref_ci_y.to_record(),
            "x": self.x.to_record(),
            "y": [r.to_record() for r in self.y],
            "accel": self.accel.tolist(),
            "report": self.report,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SetBundle":
        return cls(
            Polytope.from_record(rec["ref_ci_x"]),
            Polytope.from_record(rec["ref_ci_y"]),
            RCISet.from_record(rec["x"]),
            tuple(RCISet.from_record(r) for r in rec["y"]),
            np.array(rec["accel"], dtype=float),
            rec.get("report", {}),
        )


# --- envelope and models ---------------------------------------------------


def compute_envelope(setup: SynthesisSetup) -> Envelope:
    guess = [1.5 * setup.a_max, 1.5 * setup.a_max, 0.0]
    return operating_envelope(setup.params, setup.state_box(), setup.i_x, setup.y_input_vertices(),
                              setup.bank, guess, setup.grid)


def _maxabs(pair) -> float:
    return float(max(abs(pair[0]), abs(pair[1])))


def x_model(setup: SynthesisSetup, env: Envelope) -> tuple[DiscreteLTI, Polytope]:
    """X model with disturbances ``(d_x, e_pos, e_vel)`` and their box."""
    p = setup.params
    base = x_axis_lti(p, setup.Ts)
    Ac = np.array([[0.0, 1.0], [0.0, -p.bx / p.Me]])
    delta = euler_error_bound(Ac, [_maxabs(setup.x_box[1]), env.accel[0]], setup.Ts)
    model = DiscreteLTI(base.A, base.B, np.hstack([base.E, np.eye(2)]), setup.Ts, base.labels)
    lo, hi = bounding_box(env.W_x)
    W = from_box(np.concatenate([lo, -delta]), np.concatenate([hi, delta]))
    return model, W


def y_euler_error(setup: SynthesisSetup, env: Envelope, x_bar: float) -> np.ndarray:
    Ac, _, _ = y_axis_continuous(setup.params, x_bar)
    rates = [_maxabs(setup.y_box[1]), env.accel[1], _maxabs(setup.y_box[2]), env.accel[2]]
    return euler_error_bound(Ac, rates, setup.Ts)


def y_model(setup: SynthesisSetup, env: Envelope, j: int) -> tuple[DiscreteLTI, Polytope]:
    """Y/theta model at bank point ``j`` with disturbances ``(d_1, d_2, e_y, e_yd, e_th, e_thd)``."""
    xb = setup.bank_points[j]
    base = y_axis_lti(setup.params, xb, setup.Ts)
    delta = y_euler_error(setup, env, xb)
    model = DiscreteLTI(base.A, base.B, np.hstack([base.E, np.eye(4)]), setup.Ts, base.labels)
    lo, hi = bounding_box(env.W_y[j])
    W = from_box(np.concatenate([lo, -delta]), np.concatenate([hi, delta]))
    return model, W


# --- reference sets --------------------------------------------------------


def build_reference_sets(setup: SynthesisSetup) -> tuple[Polytope, Polytope, dict]:
    ref = reference_model(setup.Ts)
    Ur = setup.ref_inputs()
    out = {}
    sets = []
    for axis in ("x", "y"):
        C, lg = reference_ci(ref, setup.ref_box(axis), Ur, setup.rho, setup.max_iter)
        sets.append(C)
        out[axis] = lg.to_record()
    return sets[0], sets[1], out


# --- X axis ----------------------------------------------------------------


def _registers(bound: float, Td: int, width: int = 1) -> list[Polytope]:
    return [from_box([-bound] * width, [bound] * width)] * Td


def x_band(setup: SynthesisSetup) -> float:
    """Half-width of ``|x* - x_h|`` that keeps ``|e_x| <= eps_x`` for any rotation up to ``theta_max``."""
    x_max = _maxabs(setup.x_box[0])
    return setup.budget.eps_x_bar - x_max * (1.0 - np.cos(setup.budget.theta_max))


def build_x_set(setup: SynthesisSetup, env: Envelope, C_x: Polytope) -> RCISet:
    model, W = x_model(setup, env)
    joint = JointSystem(augment_delay(model, setup.Tdx), reference_model(setup.Ts))
    n = joint.dim
    (xl, xh), (vl, vh) = setup.x_box
    base = cartesian(from_box([xl, vl], [xh, vh]), *_registers(setup.i_x, setup.Tdx),
                     inflate_box(setup.ref_box("x"), 2.0))
    R0 = intersect(base, band(n, {0: -1.0, n - 2: 1.0}, x_band(setup)))
    R0 = reduce(intersect(R0, band(n, {1: -1.0, n - 1: 1.0}, setup.rel_velocity[0])))
    U = from_box([-setup.i_x], [setup.i_x])
    return rci_algorithm1(R0, lift_reference(C_x, joint), joint, U, W, setup.ref_inputs(),
                          setup.rho, setup.max_iter, None, C_x)


# --- Y axis ----------------------------------------------------------------


def y_band(setup: SynthesisSetup, j: int) -> float:
    """Half-width of ``|y* - y_n + D|`` that keeps ``|e_y| <= eps_y`` over cell ``j``."""
    cells = setup.bank.cells(*setup.x_box[0])
    x_max = max(abs(cells[j][0]), abs(cells[j][1]))
    t = setup.budget.theta_max
    return setup.budget.eps_y - x_max * np.sin(t) - setup.params.D * (1.0 - np.cos(t))


def _coord_maps(Td: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear maps from the full Y joint state to the translational and torsional coordinates."""
    n = 4 + 2 * Td + 2
    Mt = np.zeros((2 + Td + 2, n))
    Mr = np.zeros((2 + Td, n))
    Mt[0, 0] = Mt[1, 1] = 1.0
    Mr[0, 2] = Mr[1, 3] = 1.0
    for k in range(Td):
        c = 4 + 2 * k
        Mt[2 + k, c] = Mt[2 + k, c + 1] = 1.0
        Mr[2 + k, c], Mr[2 + k, c + 1] = -1.0, 1.0
    Mt[2 + Td, n - 2] = Mt[3 + Td, n - 1] = 1.0
    return Mt, Mr


def split_models(setup: SynthesisSetup, env: Envelope, j: int):
    """Translational and torsional sub-models with their disturbance boxes.

    Each sub-model sees ``(d_1, d_2)`` plus one lumped term per state that
    bounds the other part's states and input together with the Euler error.
    """
    xb = setup.bank_points[j]
    base = y_axis_lti(setup.params, xb, setup.Ts)
    A, Bv, E = base.A, base.B @ SUM_DIFF, base.E
    delta = y_euler_error(setup, env, xb)
    y_abs = np.array([_maxabs(setup.y_box[0]), _maxabs(setup.y_box[1])])
    th_abs = np.array([setup.budget.theta_max, _maxabs(setup.y_box[2])])
    c_t = np.abs(A[0:2, 2:4]) @ th_abs + np.abs(Bv[0:2, 1]) * setup.i_diff + delta[0:2]
    c_r = np.abs(A[2:4, 0:2]) @ y_abs + np.abs(Bv[2:4, 0]) * setup.i_sum + delta[2:4]
    dlo, dhi = bounding_box(env.W_y[j])
    trans = DiscreteLTI(A[0:2, 0:2], Bv[0:2, 0:1], np.hstack([E[0:2], np.eye(2)]), setup.Ts)
    tors = DiscreteLTI(A[2:4, 2:4], Bv[2:4, 1:2], np.hstack([E[2:4], np.eye(2)]), setup.Ts)
    W_t = from_box(np.concatenate([dlo, -c_t]), np.concatenate([dhi, c_t]))
    W_r = from_box(np.concatenate([dlo, -c_r]), np.concatenate([dhi, c_r]))
    return trans, W_t, tors, W_r


def build_y_sets(setup: SynthesisSetup, env: Envelope, C_y: Polytope) -> tuple[list[RCISet], dict]:
    """Common RCI set of all bank models in the full ``(y_n, yd_n, theta, thetad, regs, y*, yd*)`` space.

    One polytope serves every bank point, so a model switch can never leave
    the set. Each returned :class:`RCISet` pairs it with that point's model
    and disturbance box.
    """
    Td = setup.Tdy
    D = setup.params.D
    ref = reference_model(setup.Ts)
    Ur = setup.ref_inputs()
    J = range(len(setup.bank_points))
    split = [split_models(setup, env, j) for j in J]

    jts = [JointSystem(augment_delay(tr, Td), ref) for tr, _, _, _ in split]
    n = jts[0].dim
    (yl, yh), (wl, wh), (tl, th) = setup.y_box
    base = cartesian(from_box([yl, wl], [yh, wh]), *_registers(setup.i_sum, Td),
                     inflate_box(setup.ref_box("y"), 2.0))
    hw = min(y_band(setup, j) for j in J)
    R0 = intersect(base, band(n, {0: -1.0, n - 2: 1.0}, hw, offset=D))
    R0 = reduce(intersect(R0, band(n, {1: -1.0, n - 1: 1.0}, setup.rel_velocity[1])))
    rt = rci_switched(R0, lift_reference(C_y, jts[0]), jts, from_box([-setup.i_sum], [setup.i_sum]),
                      [W_t for _, W_t, _, _ in split], Ur, setup.rho, setup.max_iter)[0]

    jrs = [JointSystem(augment_delay(tors, Td)) for _, _, tors, _ in split]
    t = setup.budget.theta_max
    R0r = cartesian(from_box([-t, tl], [t, th]), *_registers(setup.i_diff, Td))
    rr = rci_switched(R0r, Polytope.universe(jrs[0].dim), jrs, from_box([-setup.i_diff], [setup.i_diff]),
                      [W_r for _, _, _, W_r in split], None, setup.rho, setup.max_iter)[0]

    Mt, Mr = _coord_maps(Td)
    S = reduce(intersect(affine_preimage(rt.set, Mt), affine_preimage(rr.set, Mr)))
    if is_empty(S):
        raise RuntimeError("composed Y set is empty")
    out = []
    for j in J:
        model, W = y_model(setup, env, j)
        full = JointSystem(augment_delay(model, Td), ref)
        out.append(RCISet(S, setup.bank_points[j], setup.rho, max(rt.iterations, rr.iterations), full,
                          setup.y_inputs(), W, Ur, C_y, rt.log))
    parts = {"translational": rt.log.to_record(), "torsional": rr.log.to_record()}
    return out, parts


# --- whole build -----------------------------------------------------------


def _verify_job(args):
    rci, samples, seed = args
    t0 = time.perf_counter()
    cert = verify_invariance(rci, samples, seed)
    return cert, time.perf_counter() - t0


def build_all(setup: SynthesisSetup, samples: int = 1000, seed: int = 0, workers: int = 1) -> SetBundle:
    """Run the full offline build and certify every RCI set with ``samples`` points.

    ``workers > 1`` runs the Y certificates in parallel processes; the
    result does not depend on it.
    """
    report: dict = {"timings": {}, "certificates": {}, "logs": {}}
    t0 = time.perf_counter()
    env = compute_envelope(setup)
    report["envelope"] = {
        "accel": env.accel.tolist(),
        "iterations": env.iterations,
        "W_x": [b.tolist() for b in bounding_box(env.W_x)],
        "W_y": [[b.tolist() for b in bounding_box(W)] for W in env.W_y],
    }
    C_x, C_y, ref_logs = build_reference_sets(setup)
    report["logs"]["reference"] = ref_logs
    report["timings"]["reference"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    X = build_x_set(setup, env, C_x)
    report["timings"]["x"] = time.perf_counter() - t1
    report["logs"]["x"] = X.log.to_record()
    if samples:
        t2 = time.perf_counter()
        report["certificates"]["x"] = verify_invariance(X, samples, seed).to_record()
        report["timings"]["x_verify"] = time.perf_counter() - t2

    t3 = time.perf_counter()
    Y, parts = build_y_sets(setup, env, C_y)
    report["timings"]["y"] = time.perf_counter() - t3
    report["logs"]["y"] = parts
    if samples:
        jobs = [(rci, samples, seed) for rci in Y]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_verify_job, jobs))
        else:
            results = [_verify_job(a) for a in jobs]
        for j, (cert, t_verify) in enumerate(results):
            report["certificates"][f"y{j}"] = cert.to_record()
            report["timings"][f"y{j}_verify"] = t_verify
    report["timings"]["total"] = time.perf_counter() - t0
    return SetBundle(C_x, C_y, X, tuple(Y), env.accel, report)


def certificates_pass(bundle: SetBundle) -> bool:
    certs = bundle.report.get("certificates", {})
    expected = 1 + len(bundle.y)
    return len(certs) == expected and all(c["failures"] == 0 for c in certs.values())


__all__ = [
    "SetBundle",
    "SynthesisSetup",
    "build_all",
    "build_reference_sets",
    "build_x_set",
    "build_y_sets",
    "certificates_pass",
    "compute_envelope",
    "split_models",
    "x_band",
    "x_model",
    "y_band",
    "y_model",
]
