import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman import dempc, koopman, numkit
from oracles import simulate_augmented


def test_augment_structure():
    a, b = np.array([[0.5, 0.1], [0.0, 0.9]]), np.array([[1.0], [2.0]])
    aug = dempc.augment(a, b)
    np.testing.assert_array_equal(aug.A, [[0.5, 0.1, 1.0], [0.0, 0.9, 2.0], [0, 0, 1]])
    np.testing.assert_array_equal(aug.B, [[1.0], [2.0], [1.0]])
    np.testing.assert_array_equal(aug.C, [[1, 0, 0], [0, 1, 0]])


def test_augment_dimension_check():
    with pytest.raises(ValueError):
        dempc.augment(np.eye(3), np.ones((2, 1)))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_prediction_matrices_match_stepping(n_p, n_c, seed):
    n_c = min(n_c, n_p)
    r = np.random.default_rng(seed)
    aug = dempc.augment(0.5 * r.normal(size=(3, 3)), r.normal(size=(3, 2)))
    xi, dus = r.normal(size=5), r.normal(size=(n_c, 2))
    gamma, theta = dempc.build_prediction(aug, n_p, n_c)
    ref = simulate_augmented(aug.A, aug.B, aug.C, xi, dus, n_p)
    np.testing.assert_allclose(gamma @ xi + theta @ dus.ravel(), ref, atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        dempc.MpcConfig(n_p=3, n_c=4)
    with pytest.raises(ValueError):
        dempc.MpcConfig(r=0.0)
    with pytest.raises(ValueError):
        dempc.MpcConfig(du_min=(1.0,), du_max=(0.0,))


@given(st.integers(0, 2**32 - 1))
def test_condensed_objective_equals_stage_cost(seed):
    r = np.random.default_rng(seed)
    aug = dempc.augment(0.5 * r.normal(size=(2, 2)), r.normal(size=(2, 1)))
    cfg = dempc.MpcConfig(n_p=4, n_c=2, q=3.0, r=0.5, rho=7.0)
    xi, y_ref = r.normal(size=3), r.normal(size=8)
    prob = dempc.condense(aug, cfg, xi, y_ref)
    dus, eps = r.normal(size=(2, 1)), abs(r.normal())
    y = simulate_augmented(aug.A, aug.B, aug.C, xi, dus, 4)
    direct = 3.0 * np.sum((y - y_ref) ** 2) + 0.5 * np.sum(dus ** 2) + 7.0 * eps ** 2
    assert prob.objective(np.append(dus.ravel(), eps)) == pytest.approx(direct, rel=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_single_step_horizon_is_regularized_least_squares(seed):
    r = np.random.default_rng(seed)
    L, m = 3, 2
    aug = dempc.augment(0.5 * r.normal(size=(L, L)), r.normal(size=(L, m)))
    cfg = dempc.MpcConfig(n_p=1, n_c=1, q=2.0, r=0.3)
    xi, y_ref = r.normal(size=L + m), r.normal(size=L)
    sol = numkit.qp_solve(dempc.condense(aug, cfg, xi, y_ref))
    cb = aug.C @ aug.B
    e = aug.C @ aug.A @ xi - y_ref
    du = np.linalg.solve(2.0 * cb.T @ cb + 0.3 * np.eye(m), -2.0 * cb.T @ e)
    np.testing.assert_allclose(sol.decision[:m], du, atol=1e-7)


def test_reference_already_met_gives_zero_move():
    aug = dempc.augment(np.eye(2), np.ones((2, 1)))
    cfg = dempc.MpcConfig(n_p=3, n_c=2)
    xi = np.array([0.4, -0.2, 0.0])
    sol = numkit.qp_solve(dempc.condense(aug, cfg, xi, np.tile(xi[:2], 3)))
    np.testing.assert_allclose(sol.decision, 0.0, atol=1e-9)


def identity_controller(n_p=10, n_c=7, du=10.0, u_lim=100.0):
    model = koopman.identity_model(np.array([[0.9]]), np.array([[0.1]]), 1)
    limits = dempc.BoxLimits((-u_lim,), (u_lim,), (du,))
    return dempc.DeMpcController(model, dempc.MpcConfig(n_p=n_p, n_c=n_c, q=1000.0, r=5.0), limits)


def test_identity_model_tracks_step_reference():
    ctrl = identity_controller()
    x = np.zeros(1)
    for _ in range(50):
        u = ctrl.step(x, np.ones((10, 1)))
        x = 0.9 * x + 0.1 * u
    assert abs(x[0] - 1.0) < 1e-2
    assert ctrl.faults == 0


def test_rate_limit_respected_in_closed_loop():
    ctrl = identity_controller(du=0.05)
    x, prev = np.zeros(1), np.zeros(1)
    for _ in range(30):
        u = ctrl.step(x, np.ones((10, 1)))
        assert abs(u[0] - prev[0]) <= 0.05
        prev = u
        x = 0.9 * x + 0.1 * u


def test_qp_failure_holds_previous_input(monkeypatch):
    ctrl = identity_controller()
    u1 = ctrl.step(np.zeros(1), np.ones((10, 1)))

    def boom(*a, **k):
        raise numkit.ConvergenceError("no progress", None)

    monkeypatch.setattr(numkit, "qp_solve", boom)
    u2 = ctrl.step(np.zeros(1), np.ones((10, 1)))
    np.testing.assert_array_equal(u1, u2)
    assert ctrl.faults == 1


def test_vehicle_limits_first_move_never_crosses_zero():
    lim = dempc.VehicleLimits()
    lo, hi = lim.first_move(np.array([0.0, 0.001]))
    assert lo[1] == -0.001 and hi[1] == lim.throttle_rate
    lo, hi = lim.first_move(np.array([0.0, -0.05]))
    assert hi[1] == 0.05 and lo[1] == -lim.brake_rate
    lo, hi = lim.first_move(np.zeros(2))
    assert lo[1] == -lim.brake_rate and hi[1] == lim.throttle_rate


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(1e-6, 1), st.floats(-1, 0), st.floats(0, 1))
def test_apply_increment_bounds_are_exact(u_prev, du, rate, u_lo, u_hi):
    u_prev = min(max(u_prev, u_lo), u_hi)
    u = dempc.apply_increment(np.array([u_prev]), np.array([du]), np.array([-rate]), np.array([rate]),
                              np.array([u_lo]), np.array([u_hi]))
    assert u_lo <= u[0] <= u_hi
    assert -rate <= u[0] - u_prev <= rate


def test_reference_window_pads_with_last_row():
    ref = np.arange(5.0)[:, None]
    np.testing.assert_array_equal(dempc.reference_window(ref, 2, 4)[:, 0], [3, 4, 4, 4])


def test_tracking_log_csv(tmp_path):
    lg = dempc.TrackingLog(0.01, np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 2)), np.ones(2), np.zeros(2))
    lg.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == list(dempc.LOG_COLUMNS)
    assert len(lines) == 3
    np.testing.assert_allclose(lg.rmse(), 1.0)
