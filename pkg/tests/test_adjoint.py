import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anisocrowd.adjoint import (
    CalibrationConfig,
    GridMismatchError,
    MiniBatch,
    adjoint_rhs,
    batch_partition,
    calibrate,
    cost_functional,
    descent_step,
    discrete_gradient,
    finite_difference_gradient,
    minibatch_gradient,
    reduced_gradient,
    sample_batches,
    solve_adjoint,
    tracking_weights,
    weighted_gradient,
)
from anisocrowd.gradcheck import make_instance, min_heading_sin, run_gradcheck
from anisocrowd.model import AdmissibleBox, ControlVector, ModelParams
from anisocrowd.simulator import Trajectory, integrate


def constant_offset_pair(delta, T=2.0, dt=0.1):
    times = dt * np.arange(int(round(T / dt)) + 1)
    data = np.zeros((len(times), 1, 2))
    return Trajectory(times, data + delta, np.zeros_like(data)), Trajectory(times, data, np.zeros_like(data))


def small_instance(seed=0, n=3, T=0.3, dt=1e-3):
    return make_instance(np.random.default_rng(seed), n, T, dt)


# --- cost ----------------------------------------------------------------------------


def test_cost_zero_on_data():
    traj, _ = constant_offset_pair((0.3, -0.1))
    assert cost_functional(traj, traj, ControlVector(0.1, 2, 3), CalibrationConfig(sigma2=0.0)) == 0.0


def test_cost_constant_offset_hand_integral():
    delta = np.array([0.3, -0.4])
    traj, data = constant_offset_pair(delta, T=2.0)
    J = cost_functional(traj, data, ControlVector(0, 0, 0), CalibrationConfig(sigma1=1.0, sigma2=0.0))
    assert J == pytest.approx(2.0 * (delta @ delta) / 2, rel=1e-14)


def test_cost_tikhonov_term():
    traj, _ = constant_offset_pair((0, 0))
    cfg = CalibrationConfig(sigma2=3.0, u_ref=ControlVector(0.1, 1.0, 2.0))
    J = cost_functional(traj, traj, ControlVector(0.2, 3.0, 2.0), cfg)
    assert J == pytest.approx(1.5 * (0.1**2 + 2.0**2))


def test_cost_grid_mismatch():
    a, _ = constant_offset_pair((0, 0), T=2.0)
    b, _ = constant_offset_pair((0, 0), T=1.0)
    with pytest.raises(GridMismatchError):
        cost_functional(a, b, ControlVector(0, 0, 0), CalibrationConfig())


# --- adjoint right-hand side and solve ----------------------------------------------------


def test_rhs_zero_is_fixed_point():
    rng = np.random.default_rng(0)
    X, V = rng.uniform(0, 4, (3, 2)), rng.normal(size=(3, 2))
    d1, d2 = adjoint_rhs(X, V, X + 1, np.zeros((3, 2)), np.zeros((3, 2)), ModelParams(), sigma1=0.0)
    np.testing.assert_array_equal(d1, 0)
    np.testing.assert_array_equal(d2, 0)


def test_rhs_single_agent():
    p = ModelParams(tau=1.5)
    X, Xd = np.array([[1.0, 2.0]]), np.array([[0.5, 1.0]])
    xi1, xi2 = np.array([[0.2, -0.1]]), np.array([[0.3, 0.4]])
    d1, d2 = adjoint_rhs(X, np.array([[0.7, 0]]), Xd, xi1, xi2, p, sigma1=2.0)
    np.testing.assert_allclose(d1, 2.0 * (X - Xd))
    np.testing.assert_allclose(d2, -xi1 + 1.5 * xi2)


def test_adjoint_vanishes_without_tracking_weight():
    inst = small_instance()
    adj = solve_adjoint(inst.state, inst.data, inst.params, CalibrationConfig(sigma1=0.0))
    assert not np.any(adj.xi1) and not np.any(adj.xi2)


def test_adjoint_terminal_condition():
    inst = small_instance()
    adj = solve_adjoint(inst.state, inst.data, inst.params, CalibrationConfig())
    assert not np.any(adj.xi1[-1]) and not np.any(adj.xi2[-1])
    assert np.any(adj.xi2[0])


# --- reduced gradient -------------------------------------------------------------------------


@pytest.mark.parametrize("method", ["discrete", "rk2"])
def test_gradient_of_regularisation_only(method):
    inst = small_instance()
    u_ref = inst.params.control.to_array() - np.array([0.1, 0.0, 0.0])
    cfg = CalibrationConfig(sigma1=0.0, sigma2=1.0, u_ref=ControlVector.from_array(u_ref), adjoint=method)
    g = weighted_gradient(inst.state, inst.data, inst.params, cfg, W=inst.W)
    np.testing.assert_allclose(g, [0.1, 0.0, 0.0], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0, 10))
def test_regularisation_gradient_is_linear(du, sigma2):
    inst = small_instance(T=0.01)
    u = inst.params.control.to_array()
    cfg = CalibrationConfig(sigma1=0.0, sigma2=sigma2, u_ref=ControlVector.from_array(u - np.array(du)))
    g = weighted_gradient(inst.state, inst.data, inst.params, cfg, W=inst.W)
    np.testing.assert_allclose(g, sigma2 * np.array(du), rtol=1e-12, atol=1e-12)


def test_zero_adjoint_zero_gradient():
    inst = small_instance()
    cfg = CalibrationConfig(sigma1=0.0, sigma2=0.0)
    adj = solve_adjoint(inst.state, inst.data, inst.params, cfg)
    np.testing.assert_array_equal(reduced_gradient(inst.state, adj, inst.params, cfg), 0)


def test_discrete_gradient_matches_fd():
    for seed in range(3):
        inst = small_instance(seed)
        cfg = CalibrationConfig()
        g = discrete_gradient(inst.state, inst.data, inst.params, cfg, inst.W)
        fd = finite_difference_gradient(inst.params.control, inst.X0, inst.V0, inst.W, inst.data, inst.params, cfg)
        np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_rk2_gradient_two_agents():
    inst = make_instance(np.random.default_rng(5), 2, 0.5, 1e-3)
    cfg = CalibrationConfig(adjoint="rk2")
    g = weighted_gradient(inst.state, inst.data, inst.params, cfg)
    fd = finite_difference_gradient(inst.params.control, inst.X0, inst.V0, inst.W, inst.data, inst.params, cfg)
    # first-order consistent: agrees to a few parts in a thousand at this step
    np.testing.assert_allclose(g, fd, rtol=2e-2)


def test_rk2_mismatch_shrinks_with_dt():
    coarse = run_gradcheck(7, 2, 3, 0.3, 2e-3, adjoint="rk2")
    fine = run_gradcheck(7, 2, 3, 0.3, 1e-3, adjoint="rk2")
    for c, f in zip(coarse, fine):
        assert f.max_relative_error < 0.7 * c.max_relative_error


def test_corrupted_coupling_is_detected():
    inst = small_instance(1)
    cfg = CalibrationConfig()
    good = discrete_gradient(inst.state, inst.data, inst.params, cfg, inst.W)
    bad = discrete_gradient(inst.state, inst.data, inst.params, cfg, inst.W, coupling_sign=-1.0)
    fd = finite_difference_gradient(inst.params.control, inst.X0, inst.V0, inst.W, inst.data, inst.params, cfg)
    assert np.max(np.abs(good - fd) / np.abs(fd)) < 1e-5
    assert np.max(np.abs(bad - fd) / np.abs(fd)) > 1e-3


def test_gradcheck_instances_are_non_degenerate():
    rng = np.random.default_rng(3)
    for _ in range(3):
        inst = make_instance(rng, 5, 0.5, 1e-3)
        assert min_heading_sin(inst.state) >= 1e-2
        assert min_heading_sin(inst.data) > 0
    with pytest.raises(ValueError):
        make_instance(rng, 6)


# --- mini-batches -------------------------------------------------------------------------------


def test_batch_partition_covers_grid():
    batches = batch_partition(100, 0.01, 0.1)
    assert len(batches) == 10
    assert batches[0].start == 0 and batches[-1].stop == 100
    assert all(a.stop == b.start for a, b in zip(batches, batches[1:]))
    assert batch_partition(100, 0.01, None) == [MiniBatch(0, 100)]


def test_minibatch_rejects_empty():
    with pytest.raises(ValueError):
        MiniBatch(3, 3)
    with pytest.raises(ValueError):
        MiniBatch(0, 5).weights(4)


def test_batch_sampling_reproducible():
    cfg = CalibrationConfig(m=5, batch_length=0.01)
    a = sample_batches(200, 0.01, cfg, np.random.default_rng(9))
    b = sample_batches(200, 0.01, cfg, np.random.default_rng(9))
    assert a == b and len(set(a)) == 5


def test_full_batch_equals_full_gradient():
    inst = small_instance()
    cfg = CalibrationConfig()
    full = weighted_gradient(inst.state, inst.data, inst.params, cfg, W=inst.W)
    one = minibatch_gradient(inst.state, inst.data, inst.params, cfg, [MiniBatch(0, inst.state.n_steps)], W=inst.W)
    np.testing.assert_array_equal(full, one)


def test_identical_batches_mean():
    inst = small_instance()
    cfg = CalibrationConfig()
    b = MiniBatch(50, 120)
    one = minibatch_gradient(inst.state, inst.data, inst.params, cfg, [b], W=inst.W)
    three = minibatch_gradient(inst.state, inst.data, inst.params, cfg, [b, b, b], W=inst.W)
    np.testing.assert_allclose(three, one, rtol=1e-13)


@pytest.mark.parametrize("method", ["discrete", "rk2"])
def test_disjoint_batches_decompose_full_gradient(method):
    inst = small_instance(2)
    cfg = CalibrationConfig(adjoint=method)
    K = inst.state.n_steps
    batches = batch_partition(K, inst.state.dt, 0.05)
    mean = minibatch_gradient(inst.state, inst.data, inst.params, cfg, batches, W=inst.W)
    full = weighted_gradient(inst.state, inst.data, inst.params, cfg, W=inst.W)
    np.testing.assert_allclose(mean * len(batches), full, rtol=1e-10)


def test_batch_gradient_is_gradient_of_windowed_cost():
    inst = small_instance(4)
    cfg = CalibrationConfig()
    batch = MiniBatch(100, 220)
    w = batch.weights(inst.state.n_steps)
    g = weighted_gradient(inst.state, inst.data, inst.params, cfg, step_weights=w, W=inst.W)
    u0 = inst.params.control.to_array()
    fd = np.zeros(3)
    for p, h in enumerate((1e-5, 1e-4, 1e-4)):
        vals = []
        for sgn in (1, -1):
            u = u0.copy()
            u[p] += sgn * h
            traj = integrate(inst.X0, inst.V0, inst.W, inst.params.with_control(ControlVector.from_array(u)),
                             inst.data.duration, inst.data.dt)
            vals.append(cost_functional(traj, inst.data, ControlVector.from_array(u), cfg, batch=batch))
        fd[p] = (vals[0] - vals[1]) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_tracking_weights():
    np.testing.assert_array_equal(tracking_weights(3, np.ones(3)), [0.5, 1, 1, 0.5])
    np.testing.assert_array_equal(tracking_weights(3, np.array([0, 1, 0.0])), [0, 0.5, 0.5, 0])


# --- descent ---------------------------------------------------------------------------------------


def test_descent_zero_gradient():
    u = ControlVector(0.1, 2, 3)
    assert descent_step(u, np.zeros(3), (20, 4000, 4000), AdmissibleBox()) == u


def test_descent_arithmetic_and_clamp():
    u = ControlVector(0.0, 0.0, 40.0)
    box = AdmissibleBox(eps=1e-3, A_max=1e6, R_max=1e6)
    new = descent_step(u, (0.01, -0.001, 0.002), (20, 4000, 4000), box)
    # lam pre-clamp -0.2, A 4, R 32
    np.testing.assert_allclose(new.to_array(), [-0.2, 4.0, 32.0], rtol=1e-14)
    low = descent_step(ControlVector(-0.9, 1, 1), (1.0, 0, 0), (20, 1, 1), box)
    assert low.lam == -1 + 1e-3
    neg = descent_step(ControlVector(0, 1, 1), (0, 1.0, 1.0), (1, 10, 10), box)
    assert neg.A == 0.0 and neg.R == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(1e-3, 1e4), min_size=3, max_size=3))
def test_descent_stays_admissible(grad, beta):
    box = AdmissibleBox()
    u = descent_step(ControlVector(0.3, 50, 50), grad, beta, box)
    assert box.contains(u)


def test_config_validation():
    for bad in (dict(sigma1=-1), dict(beta=(1, 0, 1)), dict(epsilon_rel=1.0), dict(m=0), dict(adjoint="x"),
                dict(batch_length=0.0)):
        with pytest.raises(ValueError):
            CalibrationConfig(**bad)


# --- calibration loop -------------------------------------------------------------------------------


def synthetic(seed=0, n=6, T=1.0, dt=0.01):
    rng = np.random.default_rng(seed)
    X0 = []
    while len(X0) < n:
        p = rng.uniform([0, 0], [3, 2])
        if all(np.hypot(*(p - q)) >= 0.6 for q in X0):
            X0.append(p)
    X0 = np.array(X0)
    W = np.zeros((n, 2))
    W[: n // 2] = [0.7, 0]
    W[n // 2:] = [-0.7, 0]
    W += rng.normal(0, 0.1, (n, 2))
    truth = ModelParams(lam=0.25, A=5, R=20)
    return X0, W, integrate(X0, W, W, truth, T, dt), truth


def test_calibration_history_and_box():
    X0, W, data, truth = synthetic()
    cfg = CalibrationConfig(beta=(0.15, 150, 250), epsilon_rel=1e-12, max_iters=8)
    res = calibrate(data, ControlVector(0, 0, 40), truth, cfg, W=W, X0=X0, V0=W)
    assert len(res.history) == cfg.max_iters + 1
    assert all(cfg.box.contains(u) for u, _ in res.history)
    assert res.costs[-1] < res.costs[0]


def test_calibration_cost_non_increasing_small_steps():
    X0, W, data, truth = synthetic(1)
    cfg = CalibrationConfig(beta=(0.05, 50, 80), epsilon_rel=1e-12, max_iters=10)
    res = calibrate(data, ControlVector(0, 0, 40), truth, cfg, W=W, X0=X0, V0=W)
    assert np.all(np.diff(res.costs) <= 1e-14 * res.costs[0])


def test_calibration_stops_on_relative_change():
    X0, W, data, truth = synthetic()
    cfg = CalibrationConfig(beta=(0.15, 150, 250), epsilon_rel=0.5, max_iters=50)
    res = calibrate(data, ControlVector(0, 0, 40), truth, cfg, W=W, X0=X0, V0=W)
    assert res.converged and len(res.history) < 51


def test_calibration_minibatch_reproducible():
    X0, W, data, truth = synthetic(T=0.5)
    cfg = CalibrationConfig(beta=(0.15, 150, 250), m=5, batch_length=0.05, max_iters=3, seed=4)
    a = calibrate(data, ControlVector(0, 0, 40), truth, cfg, W=W, X0=X0, V0=W)
    b = calibrate(data, ControlVector(0, 0, 40), truth, cfg, W=W, X0=X0, V0=W)
    assert a.controls.tobytes() == b.controls.tobytes()
    assert a.costs.tobytes() == b.costs.tobytes()


def test_calibration_starts_inside_box():
    X0, W, data, truth = synthetic(T=0.2)
    cfg = CalibrationConfig(max_iters=0, box=AdmissibleBox(A_max=10, R_max=30))
    res = calibrate(data, ControlVector(0, 0, 40), truth, cfg, W=W, X0=X0, V0=W)
    assert res.u == ControlVector(0, 0, 30)
