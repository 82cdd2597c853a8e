import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from explicit_mpc.dynamics import (
    BEMPORAD_SYSTEM,
    NONDIM,
    SINGULAR_SYSTEM,
    CstrParams,
    CstrState,
    LinearSystem,
    NondimMap,
    compute_steady_states,
    cstr_jacobian_hat,
    cstr_rhs,
    cstr_rhs_hat,
    fold_points,
    integrate_cstr,
    linear_diagnostics,
    step_linear,
    write_bifurcation_csv,
)
from explicit_mpc._io import read_matrix_csv

P = CstrParams()


# -- linear systems ---------------------------------------------------------


def test_step_linear_zero_fixed_point():
    assert np.array_equal(step_linear(SINGULAR_SYSTEM, [0, 0], 0), [0, 0])


def test_step_linear_bemporad_first_column():
    np.testing.assert_allclose(step_linear(BEMPORAD_SYSTEM, [1, 0], 0), [0.7326, 0.1722], rtol=0, atol=1e-15)


def test_step_linear_hand_multiply():
    # rows of A summed plus B
    expected = [0.4079 + 0.4031 + 0.7071, 0.4157 + 0.4109 + 0.7071]
    np.testing.assert_allclose(step_linear(SINGULAR_SYSTEM, [1, 1], 1), expected, atol=1e-15)


def test_step_linear_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        step_linear(SINGULAR_SYSTEM, [1, 2, 3], 0)
    with pytest.raises(ValueError):
        LinearSystem(A=[[1, 0]], B=[1])
    with pytest.raises(ValueError):
        LinearSystem(A=np.eye(2), B=[1, 1, 1])


def test_linear_diagnostics_values():
    eig, hsv = linear_diagnostics(SINGULAR_SYSTEM)
    np.testing.assert_allclose(eig, [0.819, 4.54e-5], rtol=0.02)
    np.testing.assert_allclose(hsv, [3.03, 7.81e-3], rtol=0.02)
    _, hsv = linear_diagnostics(BEMPORAD_SYSTEM)
    np.testing.assert_allclose(hsv, [0.4445, 0.1522], rtol=0.01)


def test_linear_diagnostics_gramians_independent():
    # Gramians by truncated series instead of a Lyapunov solver
    A, B = BEMPORAD_SYSTEM.A, BEMPORAD_SYSTEM.B
    wc = sum(np.linalg.matrix_power(A, k) @ B @ B.T @ np.linalg.matrix_power(A, k).T for k in range(3000))
    wo = sum(np.linalg.matrix_power(A, k).T @ np.linalg.matrix_power(A, k) for k in range(3000))
    ref = np.sort(np.sqrt(np.linalg.eigvals(wc @ wo).real))[::-1]
    np.testing.assert_allclose(linear_diagnostics(BEMPORAD_SYSTEM)[1], ref, rtol=1e-10)


def test_linear_diagnostics_refuses_unstable():
    with pytest.raises(ValueError, match="Schur-stable"):
        linear_diagnostics(LinearSystem(A=[[1.1, 0], [0, 0.5]], B=[1, 0]))


# -- CSTR right-hand side ---------------------------------------------------


def test_rhs_no_reactant_thermal_equilibrium():
    dca, dtr = cstr_rhs(P, 0.0, P.t0, P.t0)
    assert dca == pytest.approx(P.q_over_v * P.ca0)
    assert dtr == 0.0


def test_rhs_hand_evaluation():
    k = math.exp(17.5) * math.exp(-6000.0 / 350.0)
    dca = 1.0 * (10.0 - 5.0) - k * 5.0
    dtr = 1.0 * (300.0 - 350.0) + 16.0 * k * 5.0 + 0.3 * (300.0 - 350.0)
    got = cstr_rhs(P, 5.0, 350.0, 300.0)
    assert got[0] == pytest.approx(dca, rel=1e-13)
    assert got[1] == pytest.approx(dtr, rel=1e-13)


def test_rhs_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        cstr_rhs(P, 1.0, 0.0, 300.0)
    with pytest.raises(ValueError):
        cstr_rhs(P, 1.0, 300.0, -1.0)


def test_params_defaults_and_sign():
    assert (P.e_over_r, P.dh_rhocp, P.ua_rhocpv, P.q_over_v, P.ca0, P.t0) == (6000.0, -16.0, 0.3, 1.0, 10.0, 300.0)
    assert P.k0 == pytest.approx(math.exp(17.5))
    with pytest.raises(ValueError):
        CstrParams(dh_rhocp=5.0)


@given(st.floats(0.0, 20.0), st.floats(250.0, 600.0))
def test_nondim_round_trip(c, t):
    nd = NondimMap()
    assert nd.conc(nd.conc_hat(c)) == pytest.approx(c, rel=1e-12, abs=1e-12)
    assert nd.temp(nd.temp_hat(t)) == pytest.approx(t, rel=1e-12)


def test_nondim_rhs_matches_dimensional():
    x_hat = np.array([0.4, 0.3])
    u_hat = -0.5
    d = cstr_rhs(P, NONDIM.conc(x_hat[0]), NONDIM.temp(x_hat[1]), NONDIM.temp(u_hat))
    expected = [d[0] / NONDIM.conc_scale, d[1] / NONDIM.temp_scale]
    np.testing.assert_allclose(cstr_rhs_hat(P, x_hat, u_hat), expected, rtol=1e-12)


def test_cb_hat_conservation():
    s = CstrState(0.37, 0.2)
    assert s.cb_hat + s.ca_hat == 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(-0.2, 0.8), st.floats(-2.0, 2.0))
def test_jacobian_matches_finite_differences(c, t, u):
    J = cstr_jacobian_hat(P, [c, t], u)
    h = 1e-6
    fd = np.column_stack([
        (cstr_rhs_hat(P, [c + h, t], u) - cstr_rhs_hat(P, [c - h, t], u)) / (2 * h),
        (cstr_rhs_hat(P, [c, t + h], u) - cstr_rhs_hat(P, [c, t - h], u)) / (2 * h),
    ])
    np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-7 * np.max(np.abs(J)))


# -- integration ------------------------------------------------------------


def _stable_point(tc_hat=-1.0):
    row = compute_steady_states(P, [tc_hat])[0]
    i = row.stable.index(True)
    return row.states[i], tc_hat


def test_steady_state_root_is_zero_of_rhs():
    for row in compute_steady_states(P, [-1.5, -0.8, -0.5, 0.0]):
        for x in row.states:
            d = cstr_rhs(P, NONDIM.conc(x[0]), NONDIM.temp(x[1]), NONDIM.temp(row.tc_hat))
            assert max(abs(d[0]), abs(d[1])) < 1e-10


def test_integrate_fixed_point():
    x, u = _stable_point()
    np.testing.assert_allclose(integrate_cstr(P, x, u), x, atol=1e-8)


def test_integrate_substep_convergence():
    x = np.array([0.7, 0.1])
    a = integrate_cstr(P, x, 1.0, substeps=10)
    b = integrate_cstr(P, x, 1.0, substeps=20)
    assert np.max(np.abs(a - b)) < 1e-8


def test_integrate_frozen_system():
    frozen = CstrParams(k0=0.0, q_over_v=0.0, ua_rhocpv=0.0)
    x = np.array([0.3, 0.4])
    assert np.array_equal(integrate_cstr(frozen, x, 1.5), x)


def test_rk4_order_slope():
    # four sampling intervals from a transient state; reference from a very fine step
    x = np.array([0.8, 0.05])
    T = 0.2
    ref = integrate_cstr(P, x, 0.5, dt=T, substeps=4096)
    ns = np.array([2, 4, 8, 16, 32])
    errs = np.array([np.linalg.norm(integrate_cstr(P, x, 0.5, dt=T, substeps=int(n)) - ref) for n in ns])
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 3.7 <= slope <= 4.3, slope


def test_integrate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        integrate_cstr(P, [0.5, 0.5], 0.0, dt=0.0)
    with pytest.raises(ValueError):
        integrate_cstr(P, [0.5, 0.5], 0.0, substeps=0)


# -- steady states and folds ------------------------------------------------


def test_low_coolant_single_stable_low_conversion():
    row = compute_steady_states(P, [-3.0])[0]
    assert len(row.states) == 1 and row.stable == [True]
    assert 1.0 - row.states[0][0] < 0.05


def test_two_folds_and_unstable_span():
    folds = fold_points(P)
    assert len(folds) == 2
    conv = sorted(1.0 - x[0] for _, x in folds)
    assert conv[0] == pytest.approx(0.2, abs=0.05)
    assert conv[1] == pytest.approx(0.8, abs=0.05)


def test_scan_branch_structure():
    grid = np.linspace(-3.0, 1.0, 401)
    scan = compute_steady_states(P, grid)
    counts = np.array([len(r.states) for r in scan])
    assert set(counts) <= {1, 3}
    # three roots only between the two fold temperatures
    tcs = sorted(tc for tc, _ in fold_points(P))
    inside = (grid > tcs[0]) & (grid < tcs[1])
    assert np.all(counts[inside & (np.abs(grid - tcs[0]) > 0.02) & (np.abs(grid - tcs[1]) > 0.02)] == 3)
    assert np.all(counts[~inside] == 1)
    for r in scan:
        if len(r.states) == 3:
            # middle branch unstable, outer branches stable
            order = np.argsort([x[1] for x in r.states])
            assert [r.stable[i] for i in order] == [True, False, True]


def test_scan_requires_sorted_grid():
    with pytest.raises(ValueError):
        compute_steady_states(P, [0.0, -1.0])


def test_bifurcation_csv(tmp_path):
    scan = compute_steady_states(P, np.linspace(-1.2, -0.2, 11))
    write_bifurcation_csv(tmp_path / "b.csv", scan, P, header={"config_hash": "abc"})
    cols, M, meta = read_matrix_csv(tmp_path / "b.csv")
    assert cols == ["tc_hat", "ca_hat", "cb_hat", "stable"]
    assert meta["config_hash"] == "abc"
    np.testing.assert_allclose(M[:, 1] + M[:, 2], 1.0, atol=1e-15)
    assert set(M[:, 3]) <= {0.0, 1.0}
