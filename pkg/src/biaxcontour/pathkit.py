"""Contour geometry, reference planning and error metrics.

A contour is a sequence of line and arc segments. The planner turns it into
a per-tick reference that obeys the double-integrator recursion
``p+ = p + Ts v``, ``v+ = v + Ts a`` exactly in floating point while every
sampled position stays within rounding of the geometric path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class PathError(ValueError):
    """Malformed or unplannable contour."""


def _wrap(angle: float) -> float:
    """Map an angle into ``(-pi, pi]``."""
    a = math.remainder(angle, TWO_PI)
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class Line:
    start: tuple[float, float]
    end: tuple[float, float]

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    def point(self, s: float) -> np.ndarray:
        p0, p1 = np.asarray(self.start), np.asarray(self.end)
        return p0 + (p1 - p0) * (s / self.length)

    def tangent(self, s: float) -> np.ndarray:
        d = np.subtract(self.end, self.start)
        return d / np.linalg.norm(d)

    def distance(self, q) -> float:
        p0, p1 = np.asarray(self.start), np.asarray(self.end)
        d = p1 - p0
        t = float(np.clip(np.dot(np.asarray(q) - p0, d) / np.dot(d, d), 0.0, 1.0))
        return float(np.linalg.norm(np.asarray(q) - (p0 + t * d)))

    @property
    def curvature_radius(self) -> float:
        return math.inf

    def to_record(self) -> dict:
        return {"type": "line", "start": list(self.start), "end": list(self.end)}


@dataclass(frozen=True)
class Arc:
    """Circular arc from ``start_angle`` to ``end_angle`` around ``center``.

    Equal start and end angles denote a full circle.
    """

    center: tuple[float, float]
    radius: float
    start_angle: float
    end_angle: float
    ccw: bool = True

    def __post_init__(self):
        if not self.radius > 0:
            raise PathError("arc radius must be positive")
        object.__setattr__(self, "start_angle", _wrap(self.start_angle))
        object.__setattr__(self, "end_angle", _wrap(self.end_angle))

    @property
    def sweep(self) -> float:
        d = self.end_angle - self.start_angle if self.ccw else self.start_angle - self.end_angle
        d = d % TWO_PI
        return TWO_PI if d == 0.0 else d

    @property
    def length(self) -> float:
        return self.radius * self.sweep

    def _angle(self, s: float) -> float:
        sgn = 1.0 if self.ccw else -1.0
        return self.start_angle + sgn * s / self.radius

    def point(self, s: float) -> np.ndarray:
        a = self._angle(s)
        return np.array([self.center[0] + self.radius * math.cos(a), self.center[1] + self.radius * math.sin(a)])

    def tangent(self, s: float) -> np.ndarray:
        a = self._angle(s)
        sgn = 1.0 if self.ccw else -1.0
        return sgn * np.array([-math.sin(a), math.cos(a)])

    def distance(self, q) -> float:
        q = np.asarray(q, dtype=float)
        rel = q - np.asarray(self.center)
        r = float(np.hypot(rel[0], rel[1]))
        if r == 0.0:
            return self.radius
        ang = math.atan2(rel[1], rel[0])
        off = (ang - self.start_angle) if self.ccw else (self.start_angle - ang)
        if off % TWO_PI <= self.sweep:
            return abs(r - self.radius)
        return min(float(np.linalg.norm(q - self.point(0.0))), float(np.linalg.norm(q - self.point(self.length))))

    @property
    def curvature_radius(self) -> float:
        return self.radius

    def to_record(self) -> dict:
        return {"type": "arc", "center": list(self.center), "radius": self.radius,
                "start_angle": self.start_angle, "end_angle": self.end_angle, "ccw": self.ccw}


Segment = Line | Arc


@dataclass(frozen=True)
class ContourPath:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            gap = np.linalg.norm(a.point(a.length) - b.point(0.0))
            if gap > 1e-9:
                raise PathError(f"segments are not connected (gap {gap:.3e} m)")

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments)

    @classmethod
    def from_records(cls, records) -> "ContourPath":
        segs = []
        for r in records:
            kind = r.get("type")
            if kind == "line":
                segs.append(Line(tuple(map(float, r["start"])), tuple(map(float, r["end"]))))
            elif kind == "arc":
                segs.append(Arc(tuple(map(float, r["center"])), float(r["radius"]), float(r["start_angle"]),
                                float(r["end_angle"]), bool(r.get("ccw", True))))
            else:
                raise PathError(f"unknown segment type {kind!r}")
        return cls(tuple(segs))

    def to_records(self) -> list[dict]:
        return [s.to_record() for s in self.segments]


def circle_then_line(center=(0.0, 0.0), radius=0.08, line_length=0.1) -> ContourPath:
    """One counter-clockwise circle from angle 0, then a tangent line leaving upward."""
    start = (center[0] + radius, center[1])
    circle = Arc(center, radius, 0.0, 0.0, True)
    line = Line(start, (start[0], start[1] + line_length))
    return ContourPath((circle, line))


@dataclass(frozen=True)
class ReferenceTrace:
    """Per-tick reference for both axes: arrays of shape ``(K,)``.

    ``pos[k+1] == pos[k] + Ts * vel[k]`` and ``vel[k+1] == vel[k] + Ts * acc[k]``
    hold bit for bit.
    """

    Ts: float
    x: np.ndarray
    vx: np.ndarray
    ax: np.ndarray
    y: np.ndarray
    vy: np.ndarray
    ay: np.ndarray
    clipped: int = 0

    def __len__(self) -> int:
        return self.x.size

    def state(self, axis: str, k: int) -> np.ndarray:
        """Reference state ``(pos, vel)`` at tick ``k`` (held after the end)."""
        k = min(k, len(self) - 1)
        if axis == "x":
            return np.array([self.x[k], self.vx[k]])
        return np.array([self.y[k], self.vy[k]])

    def positions(self, axis: str, k0: int, count: int) -> np.ndarray:
        idx = np.minimum(np.arange(k0, k0 + count), len(self) - 1)
        return (self.x if axis == "x" else self.y)[idx]

    def states(self, axis: str, k0: int, count: int) -> np.ndarray:
        idx = np.minimum(np.arange(k0, k0 + count), len(self) - 1)
        if axis == "x":
            return np.column_stack([self.x[idx], self.vx[idx]])
        return np.column_stack([self.y[idx], self.vy[idx]])


def _is_tangent(a: Segment, b: Segment, tol: float = 1e-6) -> bool:
    return float(np.dot(a.tangent(a.length), b.tangent(0.0))) > 1.0 - tol


def _speed_profile(lengths, caps, a_t, ds):
    """Forward/backward pass on an arc-length grid; zero speed at both ends."""
    total = float(sum(lengths))
    n = max(2, int(math.ceil(total / ds)) + 1)
    s = np.linspace(0.0, total, n)
    h = s[1] - s[0]
    edges = np.cumsum([0.0] + list(lengths))
    seg = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, len(lengths) - 1)
    cap = np.asarray(caps)[seg]
    # a grid point on a segment boundary takes the lower of the two caps
    for e in edges[1:-1]:
        k = int(round(e / h))
        if 0 <= k < n:
            lo = max(0, k - 1)
            cap[lo:k + 2] = np.minimum(cap[lo:k + 2], min(caps))
    v = cap.copy()
    v[0] = v[-1] = 0.0
    for i in range(1, n):
        v[i] = min(v[i], math.sqrt(v[i - 1] ** 2 + 2.0 * a_t * h))
    for i in range(n - 2, -1, -1):
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * a_t * h))
    return s, v


def _time_law(s_grid, v_grid, Ts):
    """Sample arc length at multiples of ``Ts`` assuming constant acceleration between grid points."""
    dt = 2.0 * np.diff(s_grid) / np.maximum(v_grid[:-1] + v_grid[1:], 1e-300)
    t_grid = np.concatenate([[0.0], np.cumsum(dt)])
    T = t_grid[-1]
    K = int(math.floor(T / Ts))
    t = np.arange(K + 1) * Ts
    idx = np.clip(np.searchsorted(t_grid, t, side="right") - 1, 0, len(dt) - 1)
    tau = t - t_grid[idx]
    h = np.diff(s_grid)[idx]
    v0 = v_grid[idx]
    a = (v_grid[idx + 1] ** 2 - v0**2) / (2.0 * h)
    s = s_grid[idx] + v0 * tau + 0.5 * a * tau**2
    s = np.minimum(s, s_grid[-1])
    return np.concatenate([s, [s_grid[-1]]])


def _pieces(path: ContourPath):
    """Split at non-tangent junctions; the planner stops at each split."""
    pieces, cur = [], [path.segments[0]]
    for a, b in zip(path.segments[:-1], path.segments[1:]):
        if _is_tangent(a, b):
            cur.append(b)
        else:
            pieces.append(cur)
            cur = [b]
    pieces.append(cur)
    return pieces


def _sample_piece(segs, s):
    edges = np.cumsum([0.0] + [g.length for g in segs])
    out = np.empty((s.size, 2))
    for k, sk in enumerate(s):
        i = int(np.clip(np.searchsorted(edges, sk, side="right") - 1, 0, len(segs) - 1))
        out[k] = segs[i].point(min(sk - edges[i], segs[i].length))
    return out


def plan_reference(path: ContourPath, v_max: float, a_max: float, Ts: float,
                   dwell: float = 0.0, grid_step: float = 2e-6) -> ReferenceTrace:
    """Time-parameterize ``path`` under speed and per-axis acceleration limits.

    Arcs cap the speed so that centripetal acceleration uses at most half of
    ``a_max``; the tangential acceleration is limited so the vector sum stays
    below ``a_max``. The reference comes to rest at non-tangent junctions and
    at the end, then holds still for ``dwell`` seconds.
    """
    if not (v_max > 0 and a_max > 0 and Ts > 0):
        raise PathError("v_max, a_max and Ts must be positive")
    if dwell < 0:
        raise PathError("dwell must be nonnegative")
    if not path.segments:
        z = np.zeros(0)
        return ReferenceTrace(Ts, z, z, z, z.copy(), z.copy(), z.copy())
    min_len = a_max * Ts**2
    for seg in path.segments:
        if seg.length < min_len:
            raise PathError(f"segment of length {seg.length:.3e} m is shorter than one tick of motion")
    caps, a_t = [], a_max
    for seg in path.segments:
        R = seg.curvature_radius
        if math.isfinite(R):
            cap = min(v_max, math.sqrt(0.5 * a_max * R))
            a_t = min(a_t, math.sqrt(a_max**2 - (cap**2 / R) ** 2))
        else:
            cap = v_max
        caps.append(cap)
    a_t *= 0.99
    # exact target positions per tick
    targets = []
    cap_iter = iter(caps)
    for piece in _pieces(path):
        pc = [next(cap_iter) for _ in piece]
        s_grid, v_grid = _speed_profile([g.length for g in piece], pc, a_t, grid_step)
        s_t = _time_law(s_grid, v_grid, Ts)
        pts = _sample_piece(piece, s_t)
        if targets:
            pts = pts[1:]
        targets.append(pts)
    P = np.vstack(targets)
    hold = int(math.ceil(dwell / Ts)) + 2
    # one extra tick at the start point so the finite-difference velocity starts at zero
    P = np.vstack([P[:1], P, np.repeat(P[-1:], hold, axis=0)])
    return _integrate(P, Ts, a_max, v_max)


def _integrate(P: np.ndarray, Ts: float, a_max: float, v_max: float) -> ReferenceTrace:
    """Drive a double integrator through the target points tick by tick.

    Each acceleration aims at the next-but-one target, so rounding never
    accumulates: every realized position lands within an ulp or so of its target.
    """
    K = P.shape[0]
    pos = np.empty((K, 2))
    vel = np.empty((K, 2))
    acc = np.zeros((K, 2))
    pos[0] = P[0]
    vel[0] = 0.0
    clipped = 0
    v_cap = v_max * (1.0 - 1e-12)
    for k in range(K - 1):
        pos[k + 1] = pos[k] + Ts * vel[k]
        if k + 2 < K:
            v_target = (P[k + 2] - pos[k + 1]) / Ts
        else:
            v_target = np.zeros(2)
        a = (v_target - vel[k]) / Ts
        # keep |a| <= a_max and the next velocity within v_max
        lo = np.maximum(-a_max, (-v_cap - vel[k]) / Ts)
        hi = np.minimum(a_max, (v_cap - vel[k]) / Ts)
        over = (a < lo) | (a > hi)
        if np.any(over):
            clipped += int(over.sum())
            a = np.clip(a, lo, hi)
        acc[k] = a
        vel[k + 1] = vel[k] + Ts * acc[k]
    return ReferenceTrace(Ts, pos[:, 0].copy(), vel[:, 0].copy(), acc[:, 0].copy(),
                          pos[:, 1].copy(), vel[:, 1].copy(), acc[:, 1].copy(), clipped)


# --- geometry of the end effector and errors -------------------------------


def end_effector(x_h, y_n, theta, D: float):
    """End-effector position for beam carriage ``x_h``, midpoint ``y_n`` and yaw ``theta``."""
    x_e = x_h * np.cos(theta) + D * np.sin(theta)
    y_e = y_n + x_h * np.sin(theta) - D * np.cos(theta)
    return x_e, y_e


def contour_error(point, path: ContourPath) -> float:
    """Distance from ``point`` to the nearest point of the path."""
    if not path.segments:
        raise PathError("empty path")
    return min(seg.distance(point) for seg in path.segments)


def tracking_contour_error(point, ref_point, path: ContourPath) -> float:
    """Contour error of ``point`` when ``ref_point`` is a point of the path.

    The distance to the reference sample also bounds the distance to the
    path, so the smaller of the two is used; this keeps
    ``eps <= |e_x| + |e_y|`` exact under rounding.
    """
    e = math.hypot(ref_point[0] - point[0], ref_point[1] - point[1])
    return min(contour_error(point, path), e)


@dataclass(frozen=True)
class ErrorStats:
    max_abs_ex: float
    max_abs_ey: float
    max_eps: float
    rms_eps: float
    triangle_violations: int
    ticks: int

    def to_record(self) -> dict:
        return {
            "max_abs_ex": self.max_abs_ex,
            "max_abs_ey": self.max_abs_ey,
            "max_eps": self.max_eps,
            "rms_eps": self.rms_eps,
            "triangle_violations": self.triangle_violations,
            "ticks": self.ticks,
        }


def error_stats(e_x, e_y, eps) -> ErrorStats:
    """Summary of per-tick errors; counts ticks where ``eps > |e_x| + |e_y|``."""
    e_x, e_y, eps = map(np.asarray, (e_x, e_y, eps))
    if e_x.size == 0:
        return ErrorStats(0.0, 0.0, 0.0, 0.0, 0, 0)
    return ErrorStats(
        float(np.abs(e_x).max()),
        float(np.abs(e_y).max()),
        float(eps.max()),
        float(np.sqrt(np.mean(eps**2))),
        int(np.sum(eps > np.abs(e_x) + np.abs(e_y))),
        int(e_x.size),
    )


@dataclass(frozen=True)
class RunMetrics:
    """Error maxima of one run against an error budget."""

    stats: ErrorStats
    max_abs_theta: float
    flags: dict

    @property
    def violated(self) -> bool:
        return any(self.flags.values())

    def to_record(self) -> dict:
        return {**self.stats.to_record(), "max_abs_theta": self.max_abs_theta, "flags": dict(self.flags)}


def metrics(trace, path: ContourPath, budget) -> RunMetrics:
    """Recompute per-tick errors from the plant states in ``trace`` and check them against ``budget``.

    ``trace`` needs columns ``x_h, y_n, theta, x_ref, y_ref``; ``budget``
    needs ``eps_c, eps_x, eps_y, theta_max, D``.
    """
    x_h, y_n, th = trace.column("x_h"), trace.column("y_n"), trace.column("theta")
    x_e, y_e = end_effector(x_h, y_n, th, budget.D)
    e_x = trace.column("x_ref") - x_e
    e_y = trace.column("y_ref") - y_e
    x_r, y_r = trace.column("x_ref"), trace.column("y_ref")
    eps = np.array([tracking_contour_error(q, r, path) for q, r in zip(zip(x_e, y_e), zip(x_r, y_r))])
    st = error_stats(e_x, e_y, eps)
    max_th = float(np.abs(th).max()) if th.size else 0.0
    flags = {
        "eps": st.max_eps > budget.eps_c,
        "e_x": st.max_abs_ex > budget.eps_x,
        "e_y": st.max_abs_ey > budget.eps_y,
        "theta": max_th > budget.theta_max,
        "triangle": st.triangle_violations > 0,
    }
    return RunMetrics(st, max_th, flags)
