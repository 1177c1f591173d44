import dataclasses

import numpy as np
import pytest

from biaxcontour import controller as ctl
from biaxcontour.cli import simulate
from biaxcontour.pathkit import plan_reference
from biaxcontour.plantmodel import GantryParams, PlantError, energy
from biaxcontour.simloop import (
    TRACE_COLUMNS,
    DelayLine,
    PlantState,
    RigParams,
    Scenario,
    StartError,
    Trace,
    TraceFormatError,
    hil_torque,
    hil_x_step,
    read_trace,
    rig_accel,
    rk4_step,
    run_closed_loop,
    step_plant,
)

from oracles import hil_twin_ok, rk4_order

P = GantryParams()
RIG = RigParams()
TS = 0.002
SHORT = "scenario.segments=[{type: line, start: [0.08, 0.0], end: [0.08, 0.01]}]"


def test_rk4_linear_polynomial():
    lam, h = -3.0, 0.1
    z = lam * h
    out = rk4_step(lambda s: lam * s, np.array([1.0]), h)
    assert out[0] == pytest.approx(1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24, rel=1e-15)


def test_equilibrium_unchanged():
    s = PlantState()
    assert step_plant(s, [0.0, 0.0, 0.0], P, TS) == s


def test_plant_state_finite():
    with pytest.raises(PlantError):
        PlantState(x_h=np.nan)
    s = PlantState(0.01, 0.02, 0.03, 0.04, 0.001, 0.1)
    assert PlantState.from_array(s.as_array()) == s


def _undamped():
    return dataclasses.replace(P, bx=0.0, by=0.0)


def test_energy_drift():
    p = _undamped()
    s = PlantState(0.05, 0.1, 0.0, 0.05, 0.002, 0.05)
    e0 = energy(s.as_array(), p)
    worst = 0.0
    for _ in range(1000):
        s = step_plant(s, [0.0, 0.0, 0.0], p, TS)
        worst = max(worst, abs(energy(s.as_array(), p) - e0) / e0)
    assert worst < 1e-8


def test_rk4_order():
    order = rk4_order(P, (0.05, 0.1, 0.0, 0.05, 0.002, 0.5), [1.0, 5.0, -3.0])
    assert order >= 3.8


def test_delay_line():
    d0 = DelayLine(0, 2)
    np.testing.assert_array_equal(d0.push_pop([1.0, 2.0]), [1.0, 2.0])
    d = DelayLine(2, 1)
    out = [d.push_pop([v])[0] for v in (1.0, 2.0, 3.0, 4.0)]
    assert out == [0.0, 0.0, 1.0, 2.0]
    assert [c[0] for c in d.contents()] == [4.0, 3.0]
    with pytest.raises(ValueError):
        DelayLine(-1, 1)


def test_rig_params():
    with pytest.raises(ValueError):
        RigParams(M_A=0.0)
    with pytest.raises(ValueError):
        RigParams(noise=-1.0)
    assert RIG.fn_bound == pytest.approx(0.2)


def test_hil_torque_matched_rig():
    rig = RigParams(M_A=P.Me, k_A=P.kx, b_A=P.bx)
    assert hil_torque(1.3, 0.05, 0.0, P, rig) == 0.0


def test_hil_torque_pure_disturbance():
    assert hil_torque(0.0, 0.0, 0.7, P, RIG) == pytest.approx(-RIG.M_A * 0.7)


def test_hil_torque_substitution():
    rng = np.random.default_rng(1)
    for _ in range(200):
        i, v, d, fn = rng.uniform(-3, 3), rng.uniform(-0.2, 0.2), rng.uniform(-1, 1), rng.uniform(-0.2, 0.2)
        F_L = hil_torque(i, v, d, P, RIG)
        target = P.kx / P.Me * i - P.bx / P.Me * v + d - fn / RIG.M_A
        assert abs(rig_accel(i, v, F_L, fn, RIG) - target) < 1e-12


def test_hil_x_step_free_decay():
    out = hil_x_step([0.01, 0.05], 0.0, 0.0, P, RIG, TS)
    assert out[1] == (1.0 - TS * RIG.b_A / RIG.M_A) * 0.05
    assert out[0] == 0.01 + TS * 0.05


def test_hil_matches_augmented_twin():
    assert hil_twin_ok(P, RIG, TS, 1000, np.random.default_rng(2))


def test_hil_step_delay_accounting():
    line = DelayLine(1, 1)
    x = np.zeros(2)
    vel = []
    for k in range(4):
        x = hil_x_step(x, line.push_pop([1.0 if k == 0 else 0.0])[0], 0.0, P, RIG, TS)
        vel.append(x[1])
    # command at tick 0: x(1) still zero, x(2) moves
    assert vel[0] == 0.0 and vel[1] > 0.0


def _rows(n=3):
    rows = []
    for k in range(n):
        r = {c: float(k) + 0.1 for c in TRACE_COLUMNS}
        r.update(tick=k, j=1, fallback=0, qp_status_x="optimal", qp_status_y="optimal")
        rows.append(r)
    return rows


def test_trace_roundtrip(tmp_path):
    tr = Trace(TS, _rows(), config_hash="abc")
    sha = tr.write_csv(tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert back.rows == tr.rows and back.config_hash == "abc" and back.Ts == TS
    assert back.to_csv() == tr.to_csv()
    assert len(sha) == 64


def test_trace_format_errors(tmp_path):
    text = Trace(TS, _rows()).to_csv()
    bad = tmp_path / "bad.csv"
    bad.write_text(text.replace("biaxcontour-trace/1", "biaxcontour-trace/0"))
    with pytest.raises(TraceFormatError, match="schema"):
        read_trace(bad)
    bad.write_text(text.replace(",fallback", ",other"))
    with pytest.raises(TraceFormatError, match="columns"):
        read_trace(bad)
    bad.write_text("t,e_x\n0,1\n")
    with pytest.raises(TraceFormatError):
        read_trace(bad)
    with pytest.raises(TraceFormatError):
        read_trace(tmp_path / "missing.csv")


# --- closed loop on a short segment -----------------------------------------


@pytest.fixture(scope="module")
def short_runs(make_cfg, bundle):
    out = {}
    for mode in ("nonlinear", "linear", "hil"):
        cfg = make_cfg(SHORT, "scenario.dwell=0.05", f"plant.mode={mode}")
        out[mode] = (cfg,) + simulate(cfg, bundle)
    return out


def test_short_run_within_bounds(short_runs):
    for cfg, trace, m in short_runs.values():
        assert not m.violated
        assert not trace.incidents
        assert len(trace) == len(plan_reference(cfg.path, cfg.v_max, cfg.a_max, TS, cfg.dwell))


def test_delay_honesty(short_runs):
    for _, trace, _ in short_runs.values():
        for a, b in (("i_x", "i_x_applied"), ("i_1", "i_1_applied"), ("i_2", "i_2_applied")):
            cmd, app = trace.column(a), trace.column(b)
            assert app[0] == 0.0
            np.testing.assert_array_equal(app[1:], cmd[:-1])


def test_linear_mode_matches_prediction(short_runs, bundle):
    cfg, trace, _ = short_runs["linear"]
    c = ctl.make_controller(bundle.x, bundle.y, cfg.setup.bank, cfg.params.D, cfg.mpc)
    X = np.column_stack([trace.column(k) for k in ("x_h", "xd_h", "y_n", "yd_n", "theta", "thetad")])
    u = np.column_stack([trace.column(k) for k in ("i_x", "i_1", "i_2")])
    app = np.column_stack([trace.column(k) for k in ("i_x_applied", "i_1_applied", "i_2_applied")])
    j = trace.column("j").astype(int)
    mx = c.x_law.rci.joint.plant
    for k in range(len(trace) - 1):
        pred = mx.A @ np.concatenate([X[k, :2], app[k, :1]]) + mx.B @ u[k, :1]
        np.testing.assert_allclose(pred[:2], X[k + 1, :2], rtol=1e-12, atol=1e-16)
        my = c.y_laws[j[k]].rci.joint.plant
        pred = my.A @ np.concatenate([X[k, 2:], app[k, 1:]]) + my.B @ u[k, 1:]
        np.testing.assert_allclose(pred[:4], X[k + 1, 2:], rtol=1e-12, atol=1e-16)


def test_same_seed_same_bytes(make_cfg, bundle, short_runs):
    cfg, trace, _ = short_runs["hil"]
    again, _ = simulate(cfg, bundle)
    assert again.to_csv() == trace.to_csv()
    other, _ = simulate(make_cfg(SHORT, "scenario.dwell=0.05", "plant.mode=hil", "seed=7"), bundle)
    assert other.to_csv() != trace.to_csv()


def test_refuses_bad_start(make_cfg, bundle):
    cfg = make_cfg(SHORT, "scenario.dwell=0.05")
    ref = plan_reference(cfg.path, cfg.v_max, cfg.a_max, TS, cfg.dwell)
    c = ctl.make_controller(bundle.x, bundle.y, cfg.setup.bank, cfg.params.D, cfg.mpc)
    c.reg_x = np.full(c.Tdx, 50.0)
    with pytest.raises(StartError):
        run_closed_loop(Scenario(cfg.path, ref, cfg.params, TS), c)


def test_scenario_validation(make_cfg):
    cfg = make_cfg(SHORT)
    ref = plan_reference(cfg.path, cfg.v_max, cfg.a_max, TS)
    with pytest.raises(ValueError):
        Scenario(cfg.path, ref, cfg.params, TS, mode="bench")
    with pytest.raises(ValueError):
        Scenario(cfg.path, ref, cfg.params, 0.001)
