"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line. The closed-loop
runs use the default configuration (paper contour, one tick of delay per axis).
"""

import dataclasses
import time

import numpy as np
import pytest

from biaxcontour import qpsolver
from biaxcontour.cli import simulate
from biaxcontour.invariance import verify_invariance
from biaxcontour.plantmodel import GantryParams, energy, x_axis_lti, y_axis_lti
from biaxcontour.polytope import erode_set, project, support_many
from biaxcontour.simloop import PlantState, RigParams, step_plant

from oracles import (
    delay_twin_ok,
    enumerate_qp,
    erosion_offsets,
    hil_twin_ok,
    hull_of,
    kkt_check,
    random_hull,
    random_qp,
    rk4_order,
)

P = GantryParams()
TS = 0.002
RUN_LIMIT_S = 300.0
VERIFY_LIMIT_S = 600.0
HIL_SEEDS = range(10)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def runs(bundle, make_cfg):
    """Full closed-loop runs: tunings A and B, then the HIL seed sweep."""
    out = {}
    for name, overrides in [("A", ["mpc.tuning=A"]), ("B", ["mpc.tuning=B"])] + [
            (f"hil-{s}", ["plant.mode=hil", f"seed={s}"]) for s in HIL_SEEDS]:
        cfg = make_cfg("timing.Tdx=1", "timing.Tdy=1", *overrides)
        t0 = time.perf_counter()
        trace, m = simulate(cfg, bundle)
        out[name] = (trace, m, time.perf_counter() - t0)
    return out


def test_criterion_1_bounds_and_runtime(runs, report):
    worst = {"eps": 0.0, "e_x": 0.0, "e_y": 0.0, "theta": 0.0}
    ok = True
    slowest = 0.0
    for name in ("A", "B"):
        trace, _, secs = runs[name]
        col = {k: np.abs(trace.column(k)) for k in worst}
        for k in worst:
            worst[k] = max(worst[k], col[k].max())
        ok &= bool(np.all(col["eps"] <= 0.004) and np.all(col["e_x"] <= 0.002)
                   and np.all(col["e_y"] <= 0.002) and np.all(col["theta"] <= 0.0025))
        ok &= secs < RUN_LIMIT_S
        slowest = max(slowest, secs)
    report(1, ok, f"max eps {worst['eps'] * 1e3:.4f} mm, |e_x| {worst['e_x'] * 1e3:.4f} mm, "
                  f"|e_y| {worst['e_y'] * 1e3:.4f} mm, |theta| {worst['theta']:.2e} rad, "
                  f"slowest run {slowest:.1f} s")


def test_criterion_2_invariance_certificates(bundle, report):
    t0 = time.perf_counter()
    results = []
    for name, rci in [("X", bundle.x)] + [(f"Y{j}", r) for j, r in enumerate(bundle.y)]:
        cert = verify_invariance(rci, 1000, seed=1)
        results.append((name, cert))
    secs = time.perf_counter() - t0
    ok = len(bundle.y) == 4 and secs < VERIFY_LIMIT_S
    ok &= all(c.samples >= 1000 and c.failures == 0 and c.worst_margin > -1e-9 for _, c in results)
    worst = min(c.worst_margin for _, c in results)
    passed = sum(c.samples - c.failures for _, c in results)
    total = sum(c.samples for _, c in results)
    report(2, ok, f"{passed}/{total} samples over {len(results)} sets, worst margin {worst:.3e}, {secs:.1f} s")


def test_criterion_3_no_fallbacks(runs, report):
    counts = {name: int(np.count_nonzero(tr.column("fallback"))) + len(tr.incidents)
              for name, (tr, _, _) in runs.items()}
    report(3, sum(counts.values()) == 0, f"{sum(counts.values())} fallbacks over {len(counts)} runs")


def test_criterion_4_triangle_every_tick(runs, report):
    bad = ticks = 0
    for tr, _, _ in runs.values():
        eps, ex, ey = tr.column("eps"), tr.column("e_x"), tr.column("e_y")
        bad += int(np.count_nonzero(eps > np.abs(ex) + np.abs(ey)))
        ticks += len(eps)
    report(4, bad == 0, f"{bad} violating ticks out of {ticks}")


def test_criterion_5_erosion_and_projection(report):
    worst = 0.0
    count = 0
    rng = np.random.default_rng(500)
    for dim in (2, 3):
        for _ in range(100):
            S, _ = random_hull(rng, dim, scale=2.0)
            W, Wv = random_hull(rng, dim, scale=0.2)
            worst = max(worst, np.abs(erode_set(S, W).b - erosion_offsets(S, Wv)).max())
            count += 1
    for dim, keep in ((2, [0]), (3, [0, 1]), (3, [1, 2])):
        for _ in range(100):
            S, V = random_hull(rng, dim)
            Q = project(S, keep)
            Vp = V[:, keep]
            if len(keep) == 1:
                dirs = np.array([[1.0], [-1.0]])
            else:
                dirs = np.vstack([hull_of(Vp)[1].equations[:, :-1],
                                  Q.A / np.linalg.norm(Q.A, axis=1)[:, None]])
            worst = max(worst, np.abs(support_many(Q, dirs) - np.max(dirs @ Vp.T, axis=1)).max())
            count += 1
    report(5, worst <= 1e-9, f"{count} instances, worst deviation {worst:.2e}")


def test_criterion_6_qp_solver(report):
    rng = np.random.default_rng(600)
    worst_obj = worst_kkt = worst_feas = 0.0
    optimal = 0
    for _ in range(200):
        n = int(rng.integers(1, 11))
        m = int(rng.integers(1, 9)) if n > 6 else int(rng.integers(1, 13))
        qp = random_qp(rng, n, m)
        sol = qpsolver.solve(qp, max_iter=500)
        optimal += sol.status == qpsolver.OPTIMAL
        worst_obj = max(worst_obj, abs(sol.objective - enumerate_qp(qp.H, qp.f, qp.A_in, qp.b_in)[0]))
        worst_kkt = max(worst_kkt, kkt_check(qp, sol.x, sol.lam_in))
        worst_feas = max(worst_feas, max(0.0, (qp.A_in @ sol.x - qp.b_in).max()))
    ok = optimal == 200 and worst_obj <= 1e-6 and worst_kkt <= 1e-4 and worst_feas <= 1e-6
    report(6, ok, f"{optimal}/200 optimal, objective gap {worst_obj:.1e}, KKT {worst_kkt:.1e}, "
                  f"infeasibility {worst_feas:.1e}")


def test_criterion_7_delay_augmentation(report):
    rng = np.random.default_rng(700)
    results = {}
    for Td in (0, 1, 2, 5):
        results[Td] = (delay_twin_ok(x_axis_lti(P, TS), Td, 1000, rng)
                       and delay_twin_ok(y_axis_lti(P, 0.025, TS), Td, 1000, rng))
    hil = hil_twin_ok(P, RigParams(), TS, 1000, rng)
    ok = all(results.values()) and hil
    report(7, ok, f"bit-exact twins Td={sorted(k for k, v in results.items() if v)}, HIL twin {hil}")


def test_criterion_8_integrator(report):
    p = dataclasses.replace(P, bx=0.0, by=0.0)
    s = PlantState(0.05, 0.1, 0.0, 0.05, 0.002, 0.05)
    e0 = energy(s.as_array(), p)
    drift = 0.0
    for _ in range(1000):
        s = step_plant(s, [0.0, 0.0, 0.0], p, TS)
        drift = max(drift, abs(energy(s.as_array(), p) - e0) / e0)
    order = rk4_order(P, (0.05, 0.1, 0.0, 0.05, 0.002, 0.5), [1.0, 5.0, -3.0])
    report(8, drift < 1e-8 and order >= 3.8, f"relative energy drift {drift:.2e}, observed order {order:.3f}")


def test_criterion_9_reproducible_traces(runs, bundle, make_cfg, tmp_path, report):
    same = []
    for name, overrides in (("A", ["mpc.tuning=A"]), ("hil-3", ["plant.mode=hil", "seed=3"])):
        cfg = make_cfg("timing.Tdx=1", "timing.Tdy=1", *overrides)
        again, _ = simulate(cfg, bundle)
        a, b = tmp_path / f"{name}-1.csv", tmp_path / f"{name}-2.csv"
        runs[name][0].write_csv(a)
        again.write_csv(b)
        same.append(a.read_bytes() == b.read_bytes())
    report(9, all(same), f"{sum(same)}/{len(same)} reruns byte-identical")
