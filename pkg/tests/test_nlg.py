import numpy as np
import pytest

from ibctrl.lg import LGOptions, LGSystem, QuadCost, expected_cost, solve_lg
from ibctrl.nlg import (NLGOptions, NominalTrajectory, NonlinearModel, RolloutError, SeparableCost,
                        linearize_along_trajectory, quadraticize_cost, rollout, solve_nlg, trajectory_cost)

from oracles import ilqr

DT = 0.1
DRAG = 0.4


def linear_model(A, B, W):
    return NonlinearModel(lambda x, u: A @ x + B @ u, W, A.shape[0], B.shape[1], "linear")


def drag_step(x, u):
    p, v = x
    return np.array([p + DT * v, v + DT * (u[0] - DRAG * v * abs(v))])


def drag_jac(x, u):
    v = x[1]
    return np.array([[1.0, DT], [0.0, 1.0 - 2 * DT * DRAG * abs(v)]]), np.array([[0.0], [DT]])


def test_linear_jacobians_exact():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    model = linear_model(A, B, np.zeros((3, 3)))
    traj = rollout(model, rng.standard_normal(3), rng.standard_normal((4, 2)))
    As, Bs = linearize_along_trajectory(model, traj)
    assert np.allclose(As, A, atol=1e-6) and np.allclose(Bs, B, atol=1e-6)


def test_square_jacobian():
    model = NonlinearModel(lambda x, u: x ** 2 + u, np.zeros((1, 1)), 1, 1)
    A, B = linearize_along_trajectory(model, NominalTrajectory(np.array([[3.0], [9.0]]), np.array([[0.0]])))
    assert A[0, 0, 0] == pytest.approx(6.0, abs=1e-5)
    assert B[0, 0, 0] == pytest.approx(1.0, abs=1e-8)


def test_non_finite_jacobian_names_coordinate():
    def f(x, u):
        return np.array([np.sqrt(x[0]) if x[0] >= 0 else np.nan, x[1]]) + u
    model = NonlinearModel(f, np.zeros((2, 2)), 2, 2)
    traj = NominalTrajectory(np.array([[0.0, 1.0], [0.0, 1.0]]), np.zeros((1, 2)))
    with pytest.raises(FloatingPointError, match=r"coordinate 0.*t=0"):
        linearize_along_trajectory(model, traj)


def test_linearization_error_is_second_order():
    model = NonlinearModel(drag_step, np.zeros((2, 2)), 2, 1)
    x, u = np.array([0.3, 0.8]), np.array([0.2])
    A, B = linearize_along_trajectory(model, NominalTrajectory(np.array([x, drag_step(x, u)]), u[None]))
    d = np.array([0.05, 0.1, -0.07])

    def err(s):
        dx, du = s * d[:2], s * d[2:]
        return np.linalg.norm(model(x + dx, u + du) - model(x, u) - A[0] @ dx - B[0] @ du)

    for s in (1.0, 0.5, 0.25):
        assert 3.5 <= err(s) / err(s / 2) <= 4.5


def test_quadratic_cost_at_goal_has_no_linear_term():
    T, n, m = 3, 2, 1
    cost = QuadCost.build(n, m, T, Q=np.eye(n), R=np.eye(m), g=[1.0, -1.0], w=[0.5], Q_T=np.eye(n), g_T=[2.0, 0.0])
    traj = NominalTrajectory(np.vstack([np.tile([1.0, -1.0], (T, 1)), [2.0, 0.0]]), np.full((T, m), 0.5))
    q = quadraticize_cost(cost, traj)
    assert np.all(q.g == 0) and np.all(q.w == 0) and np.all(q.g_T == 0)


def test_quadratic_cost_shift_exact():
    rng = np.random.default_rng(1)
    T, n, m = 4, 3, 2
    H = rng.standard_normal((n, n))
    cost = QuadCost.build(n, m, T, Q=H @ H.T, R=np.eye(m), g=rng.standard_normal((T, n)),
                          w=rng.standard_normal((T, m)), Q_T=np.eye(n), g_T=rng.standard_normal(n))
    traj = NominalTrajectory(rng.standard_normal((T + 1, n)), rng.standard_normal((T, m)))
    q = quadraticize_cost(cost, traj)
    for _ in range(100):
        t = int(rng.integers(T))
        dx, du = rng.standard_normal(n), rng.standard_normal(m)
        direct = cost.stage(t, traj.states[t] + dx, traj.inputs[t] + du)
        assert q.stage(t, dx, du) == pytest.approx(direct, rel=1e-12, abs=1e-12)
    dx = rng.standard_normal(n)
    assert q.terminal(dx) == pytest.approx(cost.terminal(traj.states[T] + dx), rel=1e-12)


def test_separable_cost_expansion():
    T = 2
    cost = SeparableCost(lambda t, x: 0.5 * float(x @ x) + 0.1 * x[0] ** 3,
                         lambda t, u: float(np.cosh(u[0])),
                         lambda x: float((x[0] - 1.0) ** 2))
    traj = NominalTrajectory(np.array([[1.0, 2.0], [0.5, 0.0], [0.0, 0.0]]), np.array([[0.3], [-0.2]]))
    q = quadraticize_cost(cost, traj)
    # Hessian of the state cost at x0: I + diag(0.6 x0, 0)
    assert np.allclose(q.Q[0], [[1.6, 0.0], [0.0, 1.0]], atol=1e-5)
    assert q.R[0, 0, 0] == pytest.approx(np.cosh(0.3), abs=1e-5)
    assert np.allclose(q.Q_T, [[2.0, 0.0], [0.0, 0.0]], atol=1e-5)
    assert q.g_T[0] == pytest.approx(1.0, abs=1e-6)


def test_indefinite_hessian_projected_with_warning():
    cost = SeparableCost(lambda t, x: -float(x @ x), lambda t, u: float(u @ u), lambda x: 0.0)
    traj = NominalTrajectory(np.zeros((2, 1)), np.zeros((1, 1)))
    with pytest.warns(RuntimeWarning, match="indefinite"):
        q = quadraticize_cost(cost, traj)
    assert np.all(np.linalg.eigvalsh(q.Q[0]) >= 0)


def test_linear_model_converges_in_one_step():
    rng = np.random.default_rng(2)
    n, m, T = 2, 1, 6
    A = np.eye(n) + 0.2 * rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    W = 1e-3 * np.eye(n)
    model = linear_model(A, B, W)
    cost = QuadCost.build(n, m, T, Q=np.eye(n), R=0.1 * np.eye(m), Q_T=5 * np.eye(n), g_T=[1.0, 0.5])
    x0, S0 = np.array([0.5, -0.3]), 0.01 * np.eye(n)
    sol = solve_nlg(model, cost, x0, S0, beta=50.0, opts=NLGOptions(lg=LGOptions(max_iterations=2000)))
    assert sol.converged
    assert len(sol.delta_trace) >= 2 and sol.delta_trace[1] < 1e-8
    # the nominal plus mean perturbation reproduces the direct LG solution's expected cost
    direct_sys = LGSystem([A] * T, [B] * T, W, x0, S0, 50.0, T)
    direct = solve_lg(direct_sys, cost, LGOptions(max_iterations=2000))
    assert expected_cost(sol.lg_system, sol.lg_cost, sol.lg_solution) == pytest.approx(
        expected_cost(direct_sys, cost, direct), rel=1e-6)


def test_drag_double_integrator_matches_ilqr():
    T = 30
    # the mean update is certainty-equivalent, so the noise level does not
    # move the nominal; very small covariances only slow the inner solves
    model = NonlinearModel(drag_step, 1e-4 * np.eye(2), 2, 1, "drag", jacobian=drag_jac)
    Q, R, QT, goal = 0.01 * np.eye(2), 0.1 * np.eye(1), 100 * np.eye(2), np.array([1.0, 0.0])
    cost = QuadCost.build(2, 1, T, Q=Q, R=R, Q_T=QT, g_T=goal)
    x0 = np.array([0.0, 0.0])
    sol = solve_nlg(model, cost, x0, 1e-2 * np.eye(2), beta=1e6,
                    opts=NLGOptions(max_iterations=100, tol=1e-10, lg=LGOptions(max_iterations=2000)))
    X, _ = ilqr(drag_step, drag_jac, x0, np.zeros((T, 1)), Q, R, QT, goal)
    assert sol.converged
    assert np.allclose(sol.trajectory.states[-1], X[-1], atol=1e-4)
    assert np.all(np.diff(sol.cost_trace) <= 1e-12)


def test_nominal_rollout_consistent():
    T = 10
    model = NonlinearModel(drag_step, 1e-6 * np.eye(2), 2, 1)
    cost = QuadCost.build(2, 1, T, Q=0.01 * np.eye(2), R=0.1 * np.eye(1), Q_T=10 * np.eye(2), g_T=[0.5, 0.0])
    sol = solve_nlg(model, cost, np.zeros(2), 1e-4 * np.eye(2), beta=100.0)
    tr = sol.trajectory
    for t in range(T):
        assert np.allclose(model(tr.states[t], tr.inputs[t]), tr.states[t + 1], atol=1e-9)
    assert trajectory_cost(cost, tr) == pytest.approx(sol.cost_trace[-1])


def test_rollout_divergence():
    model = NonlinearModel(lambda x, u: np.exp(x * 800.0), np.zeros((1, 1)), 1, 1)
    with pytest.raises(RolloutError, match="t=2"), np.errstate(over="ignore"):
        rollout(model, [0.5], np.zeros((3, 1)))


def test_options_validation():
    with pytest.raises(ValueError):
        NLGOptions(shrink=1.0)
    with pytest.raises(ValueError):
        NLGOptions(tol=0)
