import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biaxcontour.plantmodel import (
    DiscreteLTI,
    GantryParams,
    ModelBank,
    augment_delay,
    build_bank,
    disturbance_box,
    energy,
    generalized_forces,
    mass_matrix,
    nonlinear_accel,
    reference_model,
    x_axis_lti,
    y_axis_continuous,
    y_axis_lti,
    y_theta_accel,
)
from biaxcontour.polytope import box_bounds, contains_set, from_box

from oracles import delay_twin_ok

P = GantryParams()
TS = 0.002

state_st = st.tuples(
    st.floats(-0.15, 0.15), st.floats(-0.2, 0.2), st.floats(-0.2, 0.7),
    st.floats(-0.2, 0.2), st.floats(-0.05, 0.05), st.floats(-0.5, 0.5),
)
current_st = st.tuples(st.floats(-3, 3), st.floats(-20, 20), st.floats(-20, 20))


def test_params_validation():
    with pytest.raises(ValueError):
        GantryParams(Me=0.0)
    with pytest.raises(ValueError):
        GantryParams(bx=-1.0)
    with pytest.raises(ValueError):
        GantryParams.from_dict({"Mx": 1.0})
    assert P.Mt == 240.0 and P.Md == 0.0


def test_mass_matrix_symmetric_configuration():
    M = mass_matrix(0.0, 0.0, P)
    assert M[1, 2] == 0.0
    np.testing.assert_allclose(M, [[20, 0, 4], [0, 240, 0], [4, 0, M[2, 2]]])


def test_lambda_at_center():
    lam0 = (P.M1 + P.M2) * P.L**2 + P.Mn * (P.L**2 + P.W**2) / 3 + P.Me * P.D**2
    for th in (0.0, 0.01, -0.3):
        assert mass_matrix(0.0, th, P)[2, 2] == pytest.approx(lam0, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(state_st)
def test_mass_matrix_symmetric_pd(s):
    M = mass_matrix(s[0], s[4], P)
    np.testing.assert_array_equal(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0


def test_equilibrium():
    np.testing.assert_array_equal(nonlinear_accel(np.zeros(6), np.zeros(3), P), np.zeros(3))


def test_x_current_residual():
    acc = nonlinear_accel(np.zeros(6), [1.5, 0.0, 0.0], P)
    r = mass_matrix(0.0, 0.0, P) @ acc - [P.kx * 1.5, 0.0, 0.0]
    assert np.abs(r).max() < 1e-10


def _lagrange_residual(state, currents, acc, p, h=1e-6):
    """Euler-Lagrange residual built from the kinetic energy by finite differences."""
    q = np.array([state[0], state[2], state[4]])
    qd = np.array([state[1], state[3], state[5]])

    def M(qq):
        return mass_matrix(qq[0], qq[2], p)

    dM = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        dM.append((M(q + e) - M(q - e)) / (2 * h))
    Mdot = sum(dM[i] * qd[i] for i in range(3))
    dT = np.array([0.5 * qd @ dM[i] @ qd for i in range(3)])
    th = q[2]
    dV = np.array([0.0, 0.0, 2 * p.kr * th + 2 * p.L**2 * p.ks * (1 - np.cos(th)) * np.sin(th)])
    ix, i1, i2 = currents
    Q = np.array([
        p.kx * ix - p.bx * qd[0],
        p.ky * (i1 + i2) - 2 * p.by * qd[1],
        (p.ky * (i2 - i1) - 2 * p.by * p.L * qd[2]) * p.L * np.cos(th),
    ])
    return M(q) @ acc + Mdot @ qd - dT + dV - Q


def test_lagrange_oracle():
    rng = np.random.default_rng(3)
    p = GantryParams(M1=55.0, M2=45.0)
    for _ in range(200):
        s = rng.uniform([-0.15, -0.2, -0.2, -0.2, -0.05, -0.5], [0.15, 0.2, 0.7, 0.2, 0.05, 0.5])
        u = rng.uniform([-3, -20, -20], [3, 20, 20])
        acc = nonlinear_accel(s, u, p)
        r = _lagrange_residual(s, u, acc, p)
        scale = np.abs(mass_matrix(s[0], s[4], p) @ acc).max() + 1.0
        assert np.abs(r).max() / scale < 1e-6


def test_equation_residual_1000():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        s = rng.uniform([-0.15, -0.2, -0.2, -0.2, -0.05, -0.5], [0.15, 0.2, 0.7, 0.2, 0.05, 0.5])
        u = rng.uniform([-3, -20, -20], [3, 20, 20])
        acc = nonlinear_accel(s, u, P)
        M = mass_matrix(s[0], s[4], P)
        rhs = generalized_forces(s, u, P)
        worst = max(worst, (np.abs(M @ acc - rhs) / (np.abs(M) @ np.abs(acc) + np.abs(rhs) + 1e-300)).max())
    assert worst < 1e-9


def test_energy_of_rest():
    assert energy(np.zeros(6), P) == 0.0


def test_x_axis_lti_matrices():
    s = x_axis_lti(P, TS)
    np.testing.assert_array_equal(s.A, [[1, TS], [0, 1 - TS * P.bx / P.Me]])
    np.testing.assert_array_equal(s.B, [[0], [TS * P.kx / P.Me]])
    np.testing.assert_array_equal(s.E, [[0], [TS]])
    assert x_axis_lti(dataclasses.replace(P, bx=0.0), TS).A[1, 1] == 1.0
    np.testing.assert_allclose(x_axis_lti(P, TS / 2).B, s.B / 2)


def test_y_axis_decouples_at_center():
    Ac, Bc, Ec = y_axis_continuous(P, 0.0)
    assert np.all(Ac[1, 2:] == 0) and np.all(Ac[3, :2] == 0)
    lam0 = P.lam(0.0)
    # equal currents: no torque
    np.testing.assert_allclose(Bc[3] @ [1.0, 1.0], 0.0, atol=1e-15)
    th, thd = 0.001, 0.02
    np.testing.assert_allclose(Ac[3] @ [0, 0, th, thd], -(2 * P.by * P.L**2 * thd + 2 * P.kr * th) / lam0)


def test_torsional_frequency():
    p = dataclasses.replace(P, by=0.0)
    Ac, _, _ = y_axis_continuous(p, 0.0)
    w = np.abs(np.linalg.eigvals(Ac[2:, 2:]).imag).max()
    assert w == pytest.approx(np.sqrt(2 * p.kr / p.lam(0.0)), rel=1e-12)


def test_y_axis_lti_is_euler():
    Ac, Bc, Ec = y_axis_continuous(P, 0.05)
    s = y_axis_lti(P, 0.05, TS)
    np.testing.assert_array_equal(s.A, np.eye(4) + TS * Ac)
    np.testing.assert_array_equal(s.B, TS * Bc)
    with pytest.raises(ValueError):
        y_axis_continuous(GantryParams(M1=60.0), 0.0)


def _lin_errors(accel):
    x_bar = 0.05
    Ac, Bc, _ = y_axis_continuous(P, x_bar)
    base = np.array([0.01, 0.02, 0.001, 0.01])
    u = np.array([1.0, 1.5])
    errs = []
    for k in range(6):
        d, uk = base / 2**k, u / 2**k
        s = np.array([x_bar, 0.0, d[0], d[1], d[2], d[3]])
        lin = Ac @ d + Bc @ uk
        errs.append(np.abs(accel(s, [0.0, *uk]) - lin[[1, 3]]).max())
    return np.array(errs[:-1]) / np.array(errs[1:])


def test_linearization_consistency():
    # X motion held: only the dropped nonlinear terms remain, second order
    ratios = _lin_errors(lambda s, u: y_theta_accel(s, 0.0, u, P))
    assert np.all(ratios[1:] > 3.8)
    # X free: the lumped X coupling is first order in the perturbation
    ratios = _lin_errors(lambda s, u: nonlinear_accel(s, u, P)[1:])
    assert np.all(ratios[1:] > 1.9)


def test_augment_delay_layout():
    s = x_axis_lti(P, TS)
    assert augment_delay(s, 0) is s
    a = augment_delay(s, 1)
    np.testing.assert_array_equal(a.A, np.block([[s.A, s.B], [np.zeros((1, 2)), np.zeros((1, 1))]]))
    np.testing.assert_array_equal(a.B, [[0], [0], [1]])
    with pytest.raises(ValueError):
        augment_delay(s, -1)
    with pytest.raises(ValueError):
        augment_delay(s, 1, input_dim=2)


@pytest.mark.parametrize("Td", [0, 1, 2, 5])
def test_augment_delay_dual_simulation(Td):
    rng = np.random.default_rng(Td)
    assert delay_twin_ok(x_axis_lti(P, TS), Td, 500, rng)
    assert delay_twin_ok(y_axis_lti(P, 0.025, TS), Td, 500, rng)


@pytest.mark.parametrize("Td", [1, 2, 5])
def test_augmented_step_matches_matrices(Td):
    rng = np.random.default_rng(7)
    aug = augment_delay(y_axis_lti(P, -0.075, TS), Td)
    for _ in range(50):
        z, u, d = rng.normal(size=aug.nx), rng.normal(size=2), rng.normal(size=2)
        np.testing.assert_allclose(aug.step(z, u, d), aug.A @ z + aug.B @ u + aug.E @ d, rtol=1e-13, atol=1e-15)


def test_reference_model():
    r = reference_model(TS)
    np.testing.assert_array_equal(r.A, [[1, TS], [0, 1]])
    np.testing.assert_array_equal(r.B, [[0], [TS]])
    x = np.array([0.0, 0.05])
    assert r.step(x, 0.0)[0] == 0.05 * TS
    for _ in range(10):
        x = r.step(x, 0.5)
    assert x[1] == pytest.approx(0.05 + 0.5 * 10 * TS, abs=1e-15)


def test_discrete_lti_validation_and_record():
    with pytest.raises(ValueError):
        DiscreteLTI(np.ones((2, 3)), np.ones(2), np.ones(2), TS)
    with pytest.raises(ValueError):
        DiscreteLTI(np.eye(2), np.ones(2), np.ones(2), 0.0)
    s = y_axis_lti(P, 0.0, TS)
    t = DiscreteLTI.from_record(s.to_record())
    np.testing.assert_array_equal(t.A, s.A)
    assert t.labels == s.labels


def test_bank():
    bank = build_bank(P, [-0.075, -0.025, 0.025, 0.075], 0.05, TS, 1)
    assert len(bank.models) == 4 and bank.models[0].nx == 6
    np.testing.assert_allclose(bank.edges, [-0.05, 0.0, 0.05])
    cells = bank.cells(-0.15, 0.15)
    assert cells[0][0] == -0.15 and cells[-1][1] == 0.15
    assert all(a[1] == b[0] for a, b in zip(cells, cells[1:]))
    with pytest.raises(ValueError):
        ModelBank((0.1, 0.0), 0.05)


STATE_BOX = from_box([-0.15, -0.2, -0.2, -0.2, -0.05, -0.5], [0.15, 0.2, 0.7, 0.2, 0.05, 0.5])


def test_disturbance_zero_at_rest():
    sb = from_box([-0.1, 0, 0, 0, 0, 0], [0.1, 0, 0, 0, 0, 0])
    ab = from_box(np.zeros(3), np.zeros(3))
    lo, hi = box_bounds(disturbance_box(P, sb, ab, 3, "x", margin=(0.0, 0.0)))
    assert lo[0] == 0.0 and hi[0] == 0.0
    lo, hi = box_bounds(disturbance_box(P, sb, ab, 3, "y", x_bar=0.0, margin=(0.0, 0.0)))
    np.testing.assert_array_equal(lo[0], 0.0)
    np.testing.assert_array_equal(hi[0], 0.0)


def test_disturbance_refinement_enclosed():
    ab = from_box([-1.0, -1.0, -5.0], [1.0, 1.0, 5.0])
    for axis, kw in (("x", {}), ("y", {"x_bar": 0.025, "cell": (0.0, 0.05)})):
        coarse = disturbance_box(P, STATE_BOX, ab, 3, axis, **kw)
        fine = disturbance_box(P, STATE_BOX, ab, 9, axis, margin=(0.0, 0.0), **kw)
        assert contains_set(coarse, fine)


def test_disturbance_box_bad_input():
    ab = from_box(-np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        disturbance_box(P, STATE_BOX, ab, 2)
    with pytest.raises(ValueError):
        disturbance_box(P, STATE_BOX, ab, 3, "y")
    with pytest.raises(ValueError):
        disturbance_box(P, STATE_BOX, ab, 3, "z")
