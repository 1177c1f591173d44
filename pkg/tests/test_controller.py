import logging

import numpy as np
import pytest

from biaxcontour import qpsolver
from biaxcontour.cli import simulate
from biaxcontour.controller import (
    AxisLaw,
    BudgetError,
    EmptySliceError,
    MpcConfig,
    Prediction,
    error_budget,
    make_controller,
    mpc_step,
    rci_slice,
    select_model,
    solve_axis,
    tuning,
)
from biaxcontour.invariance import JointSystem, RCISet, sample_points
from biaxcontour.plantmodel import GantryParams, ModelBank, augment_delay, reference_model, y_axis_lti
from biaxcontour.polytope import bounding_box, cartesian, from_box

P = GantryParams()
TS = 0.002
BANK = ModelBank((-0.075, -0.025, 0.025, 0.075), 0.05)


def test_error_budget_values():
    b = error_budget(0.004, 0.2, 0.0025, 0.5)
    assert (b.eps_x, b.eps_y) == (0.002, 0.002)
    assert b.eps_x_bar == pytest.approx(0.0015, abs=1e-15)
    assert b.eps_x_bar + b.D * b.theta_max == pytest.approx(b.eps_x, abs=1e-18)
    assert error_budget(0.004, 0.2, 0.0).eps_x_bar == 0.002


def test_error_budget_rejects():
    with pytest.raises(BudgetError):
        error_budget(0.004, 0.2, 0.5 * 0.004 / 0.2)
    with pytest.raises(BudgetError):
        error_budget(0.004, 0.2, 10.0)
    with pytest.raises(BudgetError):
        error_budget(0.004, 0.2, 0.001, split=1.0)
    with pytest.raises(BudgetError):
        error_budget(-1.0, 0.2, 0.001)


def test_tunings():
    a, b = tuning("A"), tuning("B")
    assert (a.Qx, a.Qy, a.Rx) == (1e5, 1e5, 0.1)
    np.testing.assert_array_equal(a.Ry_matrix, np.diag([0.1, 0.1]))
    assert (b.Qx, b.Qy, b.Rx) == (1e3, 1e3, 0.5)
    np.testing.assert_array_equal(b.Ry_matrix, np.diag([0.5, 0.5]))
    assert tuning("A", N=3).N == 3
    with pytest.raises(ValueError):
        tuning("C")


def test_mpc_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(N=0)
    with pytest.raises(ValueError):
        MpcConfig(Rx=0.0)
    with pytest.raises(ValueError):
        MpcConfig(Ry=((1.0, 2.0), (2.0, 1.0)))


def test_select_model(caplog):
    assert BANK.points[select_model(0.03, BANK)] == 0.025
    assert select_model(0.0, BANK) == 1
    assert select_model(-0.05, BANK) == 0
    assert select_model(1e-12, BANK) == 2
    with caplog.at_level(logging.WARNING):
        assert select_model(-0.2, BANK) == 0
    assert "outside" in caplog.text
    assert select_model(0.2, BANK) == 3


def _toy_rci(Td=0, x_bar=0.0):
    """Box-shaped joint set around the Y model, for structural tests only."""
    plant = augment_delay(y_axis_lti(P, x_bar, TS), Td)
    joint = JointSystem(plant, reference_model(TS))
    xs = from_box([-0.5, -0.5, -0.01, -0.5] + [-20.0] * (2 * Td), [0.7, 0.5, 0.01, 0.5] + [20.0] * (2 * Td))
    rs = from_box([-0.1, -0.1], [0.1, 0.1])
    U = from_box([-20.0, -20.0], [20.0, 20.0])
    W = from_box(np.zeros(plant.nd), np.zeros(plant.nd))
    return RCISet(cartesian(xs, rs), x_bar, 1e-4, 1, joint, U, W, from_box([-1.0], [1.0]), rs)


def test_slice_of_separable_set():
    rci = _toy_rci()
    for r in ([0.0, 0.0], [0.05, -0.02]):
        lo, hi = bounding_box(rci_slice(rci, r))
        np.testing.assert_allclose(lo, [-0.5, -0.5, -0.01, -0.5])
        np.testing.assert_allclose(hi, [0.7, 0.5, 0.01, 0.5])
    with pytest.raises(EmptySliceError):
        rci_slice(rci, [1.0, 0.0])


def test_prediction_matches_simulation():
    plant = augment_delay(y_axis_lti(P, 0.025, TS), 1)
    pred = Prediction.build(plant.A, plant.B, 6)
    rng = np.random.default_rng(0)
    xi, U = rng.normal(size=plant.nx), rng.normal(size=12)
    z = xi.copy()
    for i in range(1, 7):
        z = plant.A @ z + plant.B @ U[2 * (i - 1):2 * i]
        np.testing.assert_allclose(pred.Phi[i] @ xi + pred.Gamma[i] @ U, z, rtol=1e-12, atol=1e-14)


def _law(N, x_bar=0.0, Td=0, cfg=None):
    cfg = cfg or tuning("A")
    rci = _toy_rci(Td, x_bar)
    C = np.zeros(rci.joint.n_plant)
    C[0], C[2] = 1.0, x_bar
    return AxisLaw.build(rci, C, -P.D, cfg.Qy, cfg.Ry_matrix, N)


def test_horizon_one_has_only_input_rows():
    law = _law(1)
    qp = law.qp(np.zeros(4), np.zeros((2, 2)))
    assert qp.A_in.shape == (law.rci.U.n_rows, 2)
    np.testing.assert_array_equal(qp.A_in, law.rci.U.A)


def test_equilibrium_gives_zero_input():
    law = _law(5)
    xi = np.array([P.D, 0.0, 0.0, 0.0])
    refs = np.zeros((6, 2))
    res, _ = solve_axis(law, xi, refs, tuning("A"))
    assert res.status == qpsolver.OPTIMAL and not res.fallback
    np.testing.assert_allclose(res.u, 0.0, atol=1e-9)


def test_output_row_at_center():
    law = _law(3)
    np.testing.assert_array_equal(law.C, [1.0, 0.0, 0.0, 0.0])
    assert law.c0 == -P.D


def test_symmetric_state_no_torque():
    law = _law(8)
    xi = np.array([P.D + 0.001, 0.01, 0.0, 0.0])
    refs = np.column_stack([np.linspace(0.0, 0.002, 9), np.full(9, 0.05)])
    res, _ = solve_axis(law, xi, refs, tuning("A"))
    assert res.u[0] == pytest.approx(res.u[1], abs=1e-9)


def test_shift_active():
    law = _law(4)
    mr, nu = law.rows_per_step(), law.rci.U.n_rows
    n_state = mr * 3
    active = [0, mr + 2, 2 * mr + 1, n_state + 1, n_state + nu + 3]
    assert law.shift_active(active) == [2, mr + 1, n_state + 3]


# --- production controller --------------------------------------------------


@pytest.fixture(scope="module")
def cfg(make_cfg):
    return make_cfg()


def _controller(bundle, cfg):
    return make_controller(bundle.x, bundle.y, cfg.setup.bank, cfg.params.D, cfg.mpc)


def test_determinism(bundle, cfg):
    fb = np.array([0.08, 0.0, 0.2, 0.0, 0.0, 0.0])
    rx = np.tile([0.08, 0.0], (cfg.mpc.N + 1, 1))
    ry = np.tile([0.0, 0.0], (cfg.mpc.N + 1, 1))
    a = mpc_step(_controller(bundle, cfg), fb, rx, ry)[0]
    b = mpc_step(_controller(bundle, cfg), fb, rx, ry)[0]
    assert a.tobytes() == b.tobytes()


def test_fallback_logged_not_nan(bundle, cfg, caplog):
    c = _controller(bundle, cfg)
    fb = np.array([0.08, 0.0, 0.2 + 0.01, 0.0, 0.0, 0.0])
    rx = np.tile([0.08, 0.0], (cfg.mpc.N + 1, 1))
    ry = np.tile([0.0, 0.0], (cfg.mpc.N + 1, 1))
    with caplog.at_level(logging.WARNING):
        u, _, res_y = mpc_step(c, fb, rx, ry)
    assert res_y.fallback and res_y.margin > 0
    assert np.all(np.isfinite(u))
    assert [i.axis for i in c.incidents] == ["y"]
    assert "fallback" in caplog.text


def test_switching_keeps_feasibility(bundle, cfg):
    """Every state of the common Y set is feasible for every bank model."""
    c = _controller(bundle, cfg)
    rng = np.random.default_rng(4)
    Y = bundle.y[0].set
    pts, _ = sample_points(Y, 200, rng)
    n = bundle.y[0].joint.n_plant
    checked = 0
    for z in pts:
        # a reference at rest is an equilibrium of the reference model
        z = z.copy()
        z[n + 1] = 0.0
        if not Y.contains(z):
            continue
        xi, r = z[:n], z[n:]
        refs = np.tile(r, (cfg.mpc.N + 1, 1))
        for law in c.y_laws:
            res, _ = solve_axis(law, xi, refs, cfg.mpc)
            assert res.status == qpsolver.OPTIMAL and not res.fallback
        checked += 1
    assert checked >= 20


def test_realized_states_stay_in_sets(bundle, make_cfg):
    short = "scenario.segments=[{type: line, start: [0.08, 0.0], end: [0.08, 0.01]}]"
    for mode in ("linear", "nonlinear"):
        trace, _ = simulate(make_cfg(short, "scenario.dwell=0.05", f"plant.mode={mode}"), bundle)
        assert trace.column("margin_x").max() <= 1e-7
        assert trace.column("margin_y").max() <= 1e-7
        assert set(trace.column("qp_status_x")) == {"optimal"}
