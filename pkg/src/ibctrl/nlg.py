"""Information-bottleneck synthesis for nonlinear systems with Gaussian noise.

iLQR-style outer loop around :mod:`ibctrl.lg`:

1. linearize ``f`` along the nominal trajectory (central differences),
2. expand the cost to second order in the perturbations,
3. solve the linear-Gaussian problem for the perturbation system,
4. move the nominal to the mean of the perturbation closed loop.

The nominal update rolls the true model forward with the perturbation
feedback ``u = u_hat + alpha du_bar + K C (x - x_hat - alpha dx_bar)``; for a
linear model and ``alpha = 1`` this lands exactly on ``x_hat + dx_bar``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lg import LGOptions, LGSolution, LGSystem, QuadCost, solve_lg
from .probdist import symmetrize

log = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class NonlinearModel:
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    process_cov: np.ndarray
    state_dim: int
    input_dim: int
    name: str = "model"
    # optional (x, u) -> (A, B); replaces central differences when given
    jacobian: Callable | None = None

    def __call__(self, x, u) -> np.ndarray:
        return np.asarray(self.step(np.asarray(x, float), np.asarray(u, float)), dtype=float).ravel()

    def noise(self, T: int) -> np.ndarray:
        W = np.asarray(self.process_cov, float)
        return np.broadcast_to(W, (T, self.state_dim, self.state_dim)) if W.ndim == 2 else W


@dataclass(frozen=True)
class NominalTrajectory:
    states: np.ndarray  # (T+1, n)
    inputs: np.ndarray  # (T, m)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def rollout(model: NonlinearModel, x0, inputs) -> NominalTrajectory:
    inputs = np.atleast_2d(np.asarray(inputs, float))
    states = [np.asarray(x0, float).ravel()]
    for t, u in enumerate(inputs):
        x = model(states[-1], u)
        if not np.all(np.isfinite(x)):
            raise RolloutError(f"state became non-finite at t={t + 1}")
        states.append(x)
    return NominalTrajectory(np.array(states), inputs.copy())


def fd_step(v: np.ndarray, rel: float = 1e-6, floor: float = 1e-6) -> np.ndarray:
    return np.maximum(floor, rel * np.abs(v))


def linearize_along_trajectory(model: NonlinearModel, traj: NominalTrajectory):
    """Jacobians ``A[t] = df/dx``, ``B[t] = df/du``.

    Uses ``model.jacobian`` when the model supplies one, central
    differences otherwise.
    """
    T, n, m = traj.horizon, model.state_dim, model.input_dim
    A = np.empty((T, n, n))
    B = np.empty((T, n, m))
    for t in range(T):
        x, u = traj.states[t], traj.inputs[t]
        if model.jacobian is not None:
            A[t], B[t] = model.jacobian(x, u)
            _check_finite(A[t], B[t], t)
            continue
        hx, hu = fd_step(x), fd_step(u)
        for i in range(n):
            e = np.zeros(n)
            e[i] = hx[i]
            A[t, :, i] = (model(x + e, u) - model(x - e, u)) / (2 * hx[i])
        for j in range(m):
            e = np.zeros(m)
            e[j] = hu[j]
            B[t, :, j] = (model(x, u + e) - model(x, u - e)) / (2 * hu[j])
        _check_finite(A[t], B[t], t)
    return A, B


def _check_finite(A, B, t):
    for name, J in (("A", A), ("B", B)):
        bad = np.argwhere(~np.isfinite(J))
        if bad.size:
            raise FloatingPointError(f"non-finite Jacobian entry {name}[{t}]{tuple(bad[0])} "
                                     f"(output {bad[0][0]}, coordinate {bad[0][1]}) at t={t}")


@dataclass(frozen=True)
class SeparableCost:
    """General smooth cost ``state(t, x) + input(t, u)`` with terminal ``terminal(x)``."""

    state: Callable[[int, np.ndarray], float]
    input: Callable[[int, np.ndarray], float]
    terminal: Callable[[np.ndarray], float]


def _fd_quadratic(fn, x, h):
    """Gradient and Hessian of a scalar function by central differences."""
    n = x.size
    f0 = fn(x)
    g = np.empty(n)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        fp, fm = fn(x + ei), fn(x - ei)
        g[i] = (fp - fm) / (2 * h[i])
        H[i, i] = (fp - 2 * f0 + fm) / (h[i] * h[i])
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) \
                / (4 * h[i] * h[j])
    return g, H


def _as_quadratic(g, H, what):
    """Write ``g'z + 0.5 z'Hz`` (plus a constant) as ``0.5 (z - c)'H(z - c)``."""
    vals, vecs = np.linalg.eigh(symmetrize(H))
    if vals[0] < 0:
        warnings.warn(f"{what}: indefinite Hessian (min eigenvalue {vals[0]:.3g}) projected to PSD",
                      RuntimeWarning, stacklevel=3)
        vals = np.maximum(vals, 0.0)
    H = symmetrize((vecs * vals) @ vecs.T)
    c = -np.linalg.pinv(H, hermitian=True) @ g
    if np.max(np.abs(H @ (-c) - g), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(g))):
        warnings.warn(f"{what}: linear term outside the Hessian range was dropped", RuntimeWarning, stacklevel=3)
    return H, c


def quadraticize_cost(cost, traj: NominalTrajectory, step: float = 1e-4) -> QuadCost:
    """Second-order expansion of the cost in ``(dx, du)`` about the nominal.

    Quadratic costs are shifted exactly (``g - x_hat``, ``w - u_hat``). A
    :class:`SeparableCost` is expanded by second-order central differences.
    """
    T = traj.horizon
    xs, us = traj.states, traj.inputs
    if isinstance(cost, QuadCost):
        if cost.horizon != T:
            raise ValueError(f"cost horizon {cost.horizon} differs from trajectory horizon {T}")
        return QuadCost(cost.Q, cost.R, cost.g - xs[:T], cost.w - us, cost.Q_T, cost.g_T - xs[T])
    if not isinstance(cost, SeparableCost):
        raise TypeError("cost must be a QuadCost or a SeparableCost")
    n, m = xs.shape[1], us.shape[1]
    Q, R = np.empty((T, n, n)), np.empty((T, m, m))
    g, w = np.empty((T, n)), np.empty((T, m))
    for t in range(T):
        gx, Hx = _fd_quadratic(lambda z: cost.state(t, xs[t] + z), np.zeros(n), fd_step(xs[t], step, step))
        Q[t], g[t] = _as_quadratic(gx, Hx, f"state cost at t={t}")
        gu, Hu = _fd_quadratic(lambda z: cost.input(t, us[t] + z), np.zeros(m), fd_step(us[t], step, step))
        R[t], w[t] = _as_quadratic(gu, Hu, f"input cost at t={t}")
    gT, HT = _fd_quadratic(lambda z: cost.terminal(xs[T] + z), np.zeros(n), fd_step(xs[T], step, step))
    QT, cT = _as_quadratic(gT, HT, "terminal cost")
    return QuadCost(Q, R, g, w, QT, cT)


def trajectory_cost(cost, traj: NominalTrajectory) -> float:
    """Deterministic cost of a nominal trajectory."""
    T = traj.horizon
    if isinstance(cost, QuadCost):
        return sum(cost.stage(t, traj.states[t], traj.inputs[t]) for t in range(T)) + cost.terminal(traj.states[T])
    return (sum(cost.state(t, traj.states[t]) + cost.input(t, traj.inputs[t]) for t in range(T))
            + cost.terminal(traj.states[T]))


@dataclass(frozen=True)
class NLGOptions:
    max_iterations: int = 50
    tol: float = 1e-6
    shrink: float = 0.5
    max_shrinks: int = 10
    line_search: bool = True
    trv_dim: int | None = None
    lg: LGOptions = field(default_factory=LGOptions)

    def __post_init__(self):
        if int(self.max_iterations) <= 0 or not self.tol > 0:
            raise ValueError("max_iterations and tol must be positive")
        if not 0 < self.shrink < 1 or int(self.max_shrinks) < 0:
            raise ValueError("shrink must lie in (0, 1) and max_shrinks must be >= 0")


@dataclass
class NLGSolution:
    trajectory: NominalTrajectory
    lg_solution: LGSolution
    lg_system: LGSystem
    lg_cost: QuadCost
    status: str
    iterations: int
    cost_trace: list[float] = field(default_factory=list)
    delta_trace: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def control(self, t: int, xt_estimate) -> np.ndarray:
        """Input for a TRV-perturbation estimate at stage ``t``."""
        pol = self.lg_solution.policy
        return self.trajectory.inputs[t] + pol.K[t] @ np.asarray(xt_estimate, float) + pol.h[t]


def _perturbation_problem(model, cost, traj, init_cov, beta):
    A, B = linearize_along_trajectory(model, traj)
    n = model.state_dim
    sys = LGSystem(A, B, model.noise(traj.horizon), np.zeros(n), init_cov, beta, traj.horizon)
    return sys, quadraticize_cost(cost, traj)


class _Rejected(Exception):
    pass


def _closed_loop_rollout(model, traj, sol: LGSolution, alpha: float) -> NominalTrajectory:
    enc, pol, gauss = sol.encoder, sol.policy, sol.gaussians
    x = traj.states[0].copy()
    states, inputs = [x], []
    for t in range(traj.horizon):
        dx_bar = gauss.means[t]
        du_bar = pol.K[t] @ gauss.trv_means[t] + pol.h[t]
        u = traj.inputs[t] + alpha * du_bar + pol.K[t] @ enc.C[t] @ (x - traj.states[t] - alpha * dx_bar)
        x = model(x, u)
        if not np.all(np.isfinite(x)):
            raise RolloutError(f"state became non-finite at t={t + 1}")
        states.append(x)
        inputs.append(u)
    return NominalTrajectory(np.array(states), np.array(inputs))


def solve_nlg(model: NonlinearModel, cost, init_mean, init_cov, beta: float, inputs=None,
              opts: NLGOptions | None = None, failure=(RolloutError,)) -> NLGSolution:
    """Run the outer loop from the nominal ``rollout(model, init_mean, inputs)``.

    ``inputs`` defaults to zeros. ``failure`` lists exception types that a
    trial rollout may raise (e.g. a failed hop); such a step is treated as a
    cost increase and shrunk. With ``line_search=False`` the full step is
    always taken, as in the bare iLQR loop.
    """
    opts = opts or NLGOptions()
    failure = tuple(failure)
    T = cost.horizon if isinstance(cost, QuadCost) else None
    if inputs is None:
        if T is None:
            raise ValueError("inputs are required to fix the horizon of a SeparableCost")
        inputs = np.zeros((T, model.input_dim))
    traj = rollout(model, init_mean, inputs)
    lg_opts = opts.lg if opts.trv_dim is None else LGOptions(**{**opts.lg.__dict__, "trv_dim": opts.trv_dim})
    J = trajectory_cost(cost, traj)
    costs, deltas = [J], []
    status, it = "iteration_cap", 0
    sys, qcost = _perturbation_problem(model, cost, traj, init_cov, beta)
    for it in range(1, opts.max_iterations + 1):
        sol = solve_lg(sys, qcost, lg_opts)
        alpha, new = 1.0, None
        for _ in range(opts.max_shrinks + 1):
            try:
                cand = _closed_loop_rollout(model, traj, sol, alpha)
                J_new = trajectory_cost(cost, cand)
                if opts.line_search and J_new > J:
                    raise _Rejected
                # a point the next iteration cannot linearize around is no use either
                cand_problem = _perturbation_problem(model, cost, cand, init_cov, beta)
                new = cand
                break
            except failure + (_Rejected,):
                if not opts.line_search:
                    raise RolloutError(f"full step failed at outer iteration {it}") from None
            alpha *= opts.shrink
        if new is None:
            status = "line_search_failed"
            log.info("nlg iteration %d: no decrease after %d shrinks", it, opts.max_shrinks)
            break
        delta = max(float(np.max(np.abs(new.states - traj.states))),
                    float(np.max(np.abs(new.inputs - traj.inputs))))
        traj, J = new, J_new
        sys, qcost = cand_problem
        costs.append(J)
        deltas.append(delta)
        log.debug("nlg iteration %d cost %.10g delta %.3g alpha %.3g", it, J, delta, alpha)
        if delta < opts.tol:
            status = "converged"
            break
    sol = solve_lg(sys, qcost, lg_opts)
    return NLGSolution(traj, sol, sys, qcost, status, it, costs, deltas)
