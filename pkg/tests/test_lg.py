import numpy as np
import pytest
from scipy import optimize

from ibctrl.experiments import builtin_path
from ibctrl.lg import (AffineEncoder, AffinePolicy, LGOptions, LGSystem, QuadCost, backward_value,
                       encoder_stage, evaluate_objective, expected_cost, fonc_residuals, load_problem,
                       policy_gradient_norm, policy_stage, problem_from_dict, problem_to_dict,
                       propagate_gaussians, solve_lg, stage_informations, stage_objective)

from oracles import lqr_expected_cost, lqr_gains

SHIPPED = ["lg_double_integrator", "lg_tracking3"]


def random_problem(rng, n, m, T, beta, noise=1e-2):
    A = np.eye(n) + 0.3 * rng.standard_normal((T, n, n))
    B = rng.standard_normal((T, n, m))
    G = rng.standard_normal((T, n, n))
    W = noise * (G @ np.swapaxes(G, 1, 2) / n)
    S0 = rng.standard_normal((n, n))
    sys = LGSystem(A, B, W, rng.standard_normal(n), 0.1 * S0 @ S0.T / n, beta, T)
    Qh = rng.standard_normal((T, n, n))
    cost = QuadCost.build(n, m, T, Q=Qh @ np.swapaxes(Qh, 1, 2) / n + 0.1 * np.eye(n),
                          R=np.eye(m) * rng.uniform(0.1, 1.0), g=rng.standard_normal((T, n)),
                          w=0.1 * rng.standard_normal((T, m)), Q_T=np.eye(n), g_T=rng.standard_normal(n))
    return sys, cost


def lqr_oracle(sys, cost):
    return lqr_expected_cost(sys.A, sys.B, sys.process_cov, sys.init_mean, sys.init_cov, cost.Q, cost.R,
                             cost.g, cost.w, cost.Q_T, cost.g_T)


def scalar_system(A=2.0, B=1.0, T=4, beta=1.0, W=0.0, S0=0.0, m0=1.0):
    return LGSystem(np.full((T, 1, 1), A), np.full((T, 1, 1), B), np.full((T, 1, 1), W), [m0], [[S0]], beta, T)


@pytest.fixture(scope="module")
def shipped():
    out = {}
    for name in SHIPPED:
        sys, cost = load_problem(builtin_path(name))
        out[name] = (sys, cost, solve_lg(sys, cost, LGOptions(max_iterations=3000)))
    return out


# ---------------------------------------------------------------- propagation

def test_frozen_dynamics_constant_gaussian():
    T, n = 5, 2
    sys = LGSystem(np.eye(n), np.zeros((n, 1)), np.zeros((n, n)), [1.0, -2.0], np.diag([0.3, 0.1]), 1.0, T)
    enc = AffineEncoder(np.ones((T, 1, n)), np.zeros((T, 1)), np.ones((T, 1, 1)))
    pol = AffinePolicy(np.full((T, 1, 1), 7.0), np.ones((T, 1)))
    g = propagate_gaussians(sys, enc, pol)
    assert np.allclose(g.means, sys.init_mean) and np.allclose(g.covs, sys.init_cov)


def test_scalar_mean_halves():
    sys = scalar_system()
    T = sys.horizon
    enc = AffineEncoder(np.ones((T, 1, 1)), np.zeros((T, 1)), np.full((T, 1, 1), 1e-300))
    pol = AffinePolicy(np.full((T, 1, 1), -1.5), np.zeros((T, 1)))
    g = propagate_gaussians(sys, enc, pol)
    assert np.allclose(g.means[:, 0], 0.5 ** np.arange(T + 1), rtol=0, atol=1e-15)


def test_trv_covariance_against_sampling():
    rng = np.random.default_rng(0)
    n, k = 3, 2
    S = rng.standard_normal((n, n))
    sys = LGSystem(np.eye(n), np.zeros((n, 1)), np.zeros((n, n)), rng.standard_normal(n), S @ S.T, 1.0, 1)
    C = rng.standard_normal((1, k, n))
    E = np.array([[[0.5, 0.1], [0.1, 0.3]]])
    g = propagate_gaussians(sys, AffineEncoder(C, np.array([[0.2, -0.1]]), E),
                            AffinePolicy(np.zeros((1, 1, k)), np.zeros((1, 1))))
    x = rng.multivariate_normal(sys.init_mean, sys.init_cov, size=1_000_000)
    xt = x @ C[0].T + np.array([0.2, -0.1]) + rng.multivariate_normal(np.zeros(k), E[0], size=x.shape[0])
    emp = np.cov(xt.T)
    assert np.allclose(emp, g.trv_covs[0], rtol=0.01, atol=0.01 * np.max(np.abs(g.trv_covs[0])))


# ---------------------------------------------------------------- values

def test_terminal_values(shipped):
    sys, cost, sol = shipped["lg_double_integrator"]
    assert np.array_equal(sol.values.P[-1], cost.Q_T)
    assert np.allclose(sol.values.b[-1], -cost.Q_T @ cost.g_T)


def test_zero_encoder_gives_lyapunov_recursion():
    rng = np.random.default_rng(1)
    sys, cost = random_problem(rng, 3, 1, 5, beta=1e12)
    T = sys.horizon
    enc = AffineEncoder(np.zeros((T, 3, 3)), np.zeros((T, 3)), np.broadcast_to(np.eye(3), (T, 3, 3)))
    pol = AffinePolicy(np.zeros((T, 1, 3)), np.zeros((T, 1)))
    vals = backward_value(sys, cost, enc, pol, propagate_gaussians(sys, enc, pol))
    P = cost.Q_T
    for t in range(T - 1, -1, -1):
        P = cost.Q[t] + sys.A[t].T @ P @ sys.A[t]
        assert np.allclose(vals.P[t], P, rtol=1e-12, atol=1e-12)


def test_scalar_value_matches_numeric_expectation():
    """nu_t(x) = E[c_t + nu_{t+1}(x') | x] + KL(q(.|x) || q(.)) / beta, evaluated by quadrature."""
    A, B, W, beta = 1.1, 0.7, 0.05, 2.0
    sys = LGSystem([[[A]]], [[[B]]], [[[W]]], [0.4], [[0.3]], beta, 1)
    cost = QuadCost.build(1, 1, 1, Q=[[2.0]], R=[[0.5]], g=[0.3], w=[-0.2], Q_T=[[1.5]], g_T=[0.1])
    c, a, e, K, h = 0.8, 0.05, 0.2, -0.9, 0.15
    enc = AffineEncoder(np.array([[[c]]]), np.array([[a]]), np.array([[[e]]]))
    pol = AffinePolicy(np.array([[[K]]]), np.array([[h]]))
    g = propagate_gaussians(sys, enc, pol)
    vals = backward_value(sys, cost, enc, pol, g)
    s_xt = c * c * 0.3 + e
    m_xt = c * 0.4 + a
    z, wq = np.polynomial.hermite_e.hermegauss(40)
    wq = wq / wq.sum()

    def nu0(x):
        total = 0.0
        for zi, wi in zip(z, wq):               # TRV noise
            xt = c * x + a + np.sqrt(e) * zi
            u = K * xt + h
            stage = x - 0.3
            ex = A * x + B * u
            # E over process noise of the terminal cost
            term = 0.5 * 1.5 * ((ex - 0.1) ** 2 + W)
            total += wi * (0.5 * 2.0 * stage ** 2 + 0.5 * 0.5 * (u + 0.2) ** 2 + term)
        kl = 0.5 * (e / s_xt - 1 + (c * x + a - m_xt) ** 2 / s_xt + np.log(s_xt / e))
        return total + kl / beta

    xs = np.linspace(-2, 2, 9)
    coef = np.polyfit(xs, [nu0(x) for x in xs], 2)
    assert coef[0] == pytest.approx(0.5 * vals.P[0, 0, 0], abs=1e-8)
    assert coef[1] == pytest.approx(vals.b[0, 0], abs=1e-8)


# ---------------------------------------------------------------- encoder

def test_zero_gain_gives_pure_noise_encoder():
    rng = np.random.default_rng(2)
    sys, cost = random_problem(rng, 2, 1, 3, beta=10.0)
    C, a, E = encoder_stage(sys, cost, 0, np.zeros((1, 2)), np.zeros(1), sys.init_mean, sys.init_cov,
                            cost.Q_T, np.zeros(2), np.eye(2), np.zeros(2))
    assert np.all(C == 0)
    g = propagate_gaussians(sys, AffineEncoder(np.repeat(C[None], 3, 0), np.zeros((3, 2)), np.repeat(E[None], 3, 0)),
                            AffinePolicy(np.zeros((3, 1, 2)), np.zeros((3, 1))))
    assert np.allclose(g.trv_covs[0], E)


def test_small_beta_no_information():
    rng = np.random.default_rng(3)
    sys, cost = random_problem(rng, 2, 1, 4, beta=1e-9)
    sol = solve_lg(sys, cost)
    assert np.max(np.abs(sol.encoder.C)) < 1e-6
    assert np.all(stage_informations(sol.encoder, sol.gaussians) < 1e-6)


def _scalar_stage_lagrangian(params, m, s, A, B, W, R, w, K, h, P, b, beta):
    c, a, log_e = params
    e = np.exp(log_e)
    mu = (A + B * K * c) * m + B * (K * a + h)
    var = (A + B * K * c) ** 2 * s + (B * K) ** 2 * e + W
    input_cost = 0.5 * R * ((K * c) ** 2 * s + K * K * e + (K * (c * m + a) + h - w) ** 2)
    info = 0.5 * np.log((c * c * s + e) / e)
    return input_cost + 0.5 * P * (var + mu * mu) + b * mu + info / beta


def test_scalar_encoder_matches_dense_minimization():
    m, s, A, B, W, R, w, K, h, P, b, beta = 0.7, 0.4, 1.2, 0.8, 0.01, 0.3, 0.1, -1.1, 0.05, 2.5, -0.4, 20.0
    sys = LGSystem([[[A]]], [[[B]]], [[[W]]], [m], [[s]], beta, 1)
    cost = QuadCost.build(1, 1, 1, Q=[[0.0]], R=[[R]], w=[w])
    C, a, E = encoder_stage(sys, cost, 0, np.array([[K]]), np.array([h]), np.array([m]), np.array([[s]]),
                            np.array([[P]]), np.array([b]), np.eye(1), np.zeros(1))
    args = (m, s, A, B, W, R, w, K, h, P, b, beta)
    # coarse grid then local refinement
    grid = [(c, a_, le) for c in np.linspace(-3, 3, 31) for a_ in np.linspace(-2, 2, 21) for le in np.linspace(-8, 2, 21)]
    start = min(grid, key=lambda p: _scalar_stage_lagrangian(p, *args))
    res = optimize.minimize(_scalar_stage_lagrangian, start, args=args, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
    c_opt, a_opt, e_opt = res.x[0], res.x[1], np.exp(res.x[2])
    assert C[0, 0] == pytest.approx(c_opt, rel=1e-4)
    assert a[0] == pytest.approx(a_opt, abs=1e-4)
    assert E[0, 0] == pytest.approx(e_opt, rel=1e-4)
    val = _scalar_stage_lagrangian((C[0, 0], a[0], np.log(E[0, 0])), *args)
    assert val <= res.fun + 1e-10


# ---------------------------------------------------------------- policy

def test_policy_recovers_lqr_gains():
    rng = np.random.default_rng(4)
    for _ in range(3):
        sys, cost = random_problem(rng, 3, 2, 6, beta=1e8)
        sol = solve_lg(sys, cost, LGOptions(max_iterations=2000))
        KC = sol.policy.K @ sol.encoder.C
        ref = lqr_gains(sys.A, sys.B, cost.Q, cost.R, cost.Q_T)
        assert np.allclose(KC, ref, rtol=1e-3, atol=1e-4)


def test_input_cost_dominated_policy():
    rng = np.random.default_rng(5)
    sys, cost = random_problem(rng, 2, 1, 1, beta=1.0)
    cost = QuadCost.build(2, 1, 1, Q=np.eye(2), R=1e9 * np.eye(1), w=[0.3], Q_T=np.eye(2))
    K, h = policy_stage(sys, cost, 0, np.eye(2), np.zeros(2), 0.1 * np.eye(2), sys.init_mean, sys.init_cov,
                        np.eye(2), np.zeros(2))
    assert np.max(np.abs(K)) < 1e-6
    assert h[0] == pytest.approx(0.3, abs=1e-6)


def test_policy_qp_beats_random_probes():
    rng = np.random.default_rng(6)
    sys, cost = random_problem(rng, 2, 2, 1, beta=1.0)
    C, a, E = rng.standard_normal((2, 2)), rng.standard_normal(2), 0.2 * np.eye(2)
    Pn = np.array([[2.0, 0.3], [0.3, 1.0]])
    bn = rng.standard_normal(2)
    args = (C, a, E, sys.init_mean, sys.init_cov, Pn, bn)
    K, h = policy_stage(sys, cost, 0, *args)
    J = stage_objective(sys, cost, 0, K, h, *args)
    for _ in range(1000):
        dK, dh = rng.standard_normal((2, 2)), rng.standard_normal(2)
        scale = 10.0 ** rng.uniform(-6, 0)
        assert J <= stage_objective(sys, cost, 0, K + scale * dK, h + scale * dh, *args) + 1e-12


# ---------------------------------------------------------------- solver

@pytest.mark.parametrize("seed", range(20))
def test_large_beta_recovers_lqg_cost(seed):
    rng = np.random.default_rng(100 + seed)
    n, m, T = int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(2, 11))
    sys, cost = random_problem(rng, n, m, T, beta=1e6)
    sol = solve_lg(sys, cost)
    ref = lqr_oracle(sys, cost)
    assert expected_cost(sys, cost, sol) == pytest.approx(ref, rel=1e-3)


def test_zero_cost_objective_vanishes():
    rng = np.random.default_rng(7)
    sys, _ = random_problem(rng, 2, 1, 4, beta=1.0)
    cost = QuadCost.build(2, 1, 4)
    sol = solve_lg(sys, cost)
    assert evaluate_objective(sys, cost, sol.encoder, sol.policy) == pytest.approx(0.0, abs=1e-9)
    assert np.max(np.abs(sol.encoder.C)) < 1e-6


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_instances_fonc(shipped, name):
    sys, cost, sol = shipped[name]
    assert sol.converged
    assert np.max(fonc_residuals(sys, cost, sol)) < 1e-8
    assert policy_gradient_norm(sys, cost, sol) < 1e-9
    for P in sol.values.P:
        assert np.allclose(P, P.T, atol=1e-10)
        assert np.linalg.eigvalsh(P)[0] >= -1e-10
    info = stage_informations(sol.encoder, sol.gaussians)
    assert np.all(np.isfinite(info)) and np.all(info >= 0)
    assert all(np.isfinite(sol.objective_trace))
    assert sol.objective_trace[-1] <= sol.objective_trace[0]


def test_options_and_dimension_errors():
    with pytest.raises(ValueError):
        LGOptions(tol=-1)
    with pytest.raises(ValueError):
        LGOptions(trv_dim=0)
    rng = np.random.default_rng(8)
    sys, cost = random_problem(rng, 2, 1, 3, beta=1.0)
    with pytest.raises(ValueError):
        solve_lg(sys, QuadCost.build(2, 1, 4))
    with pytest.raises(ValueError):
        LGSystem(np.eye(2), np.ones((2, 1)), -np.eye(2), [0, 0], np.eye(2), 1.0, 3)


def test_problem_round_trip():
    rng = np.random.default_rng(9)
    sys, cost = random_problem(rng, 2, 1, 3, beta=4.0)
    back_sys, back_cost = problem_from_dict(problem_to_dict(sys, cost))
    assert np.array_equal(back_sys.A, sys.A) and np.array_equal(back_cost.Q, cost.Q)
    assert back_sys.beta == sys.beta
