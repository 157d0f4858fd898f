"""Separation-principle baselines: full-state iLQG for the nonlinear problem."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..lg import QuadCost
from ..nlg import (NominalTrajectory, RolloutError, linearize_along_trajectory, quadraticize_cost, rollout,
                   trajectory_cost)

log = logging.getLogger(__name__)


@dataclass
class ILQGSolution:
    trajectory: NominalTrajectory
    gains: np.ndarray        # (T, m, n) feedback on the state perturbation
    A: np.ndarray            # linearization about the final nominal
    B: np.ndarray
    status: str
    iterations: int
    cost_trace: list[float] = field(default_factory=list)
    delta_trace: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def control(self, t: int, dx_estimate) -> np.ndarray:
        return self.trajectory.inputs[t] + self.gains[t] @ np.asarray(dx_estimate, float)


def riccati_pass(A, B, qcost: QuadCost):
    """Backward pass for the perturbation cost; returns ``(k[T, m], K[T, m, n])``.

    ``qcost`` is expressed in perturbation coordinates (as returned by
    ``quadraticize_cost``), so the linear terms come from its goals.
    """
    T, n, m = B.shape[0], A.shape[1], B.shape[2]
    P = qcost.Q_T.copy()
    p = -qcost.Q_T @ qcost.g_T
    k = np.empty((T, m))
    K = np.empty((T, m, n))
    for t in range(T - 1, -1, -1):
        Q, R = qcost.Q[t], qcost.R[t]
        Qxx = Q + A[t].T @ P @ A[t]
        Quu = R + B[t].T @ P @ B[t]
        Qux = B[t].T @ P @ A[t]
        qx = -Q @ qcost.g[t] + A[t].T @ p
        qu = -R @ qcost.w[t] + B[t].T @ p
        try:
            L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"input Hessian is not positive definite at t={t}") from exc
        sol = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([qu, Qux])))
        k[t], K[t] = -sol[:, 0], -sol[:, 1:]
        P = Qxx + K[t].T @ Quu @ K[t] + K[t].T @ Qux + Qux.T @ K[t]
        P = 0.5 * (P + P.T)
        p = qx + K[t].T @ Quu @ k[t] + K[t].T @ qu + Qux.T @ k[t]
    return k, K


def _forward(model, traj, k, K, alpha):
    x = traj.states[0].copy()
    states, inputs = [x], []
    for t in range(traj.horizon):
        u = traj.inputs[t] + alpha * k[t] + K[t] @ (x - traj.states[t])
        x = model(x, u)
        if not np.all(np.isfinite(x)):
            raise RolloutError(f"state became non-finite at t={t + 1}")
        states.append(x)
        inputs.append(u)
    return NominalTrajectory(np.array(states), np.array(inputs))


def solve_ilqg(model, cost, x0, inputs=None, max_iterations: int = 50, tol: float = 1e-6,
               shrink: float = 0.5, max_shrinks: int = 10, failure=(RolloutError,)) -> ILQGSolution:
    """Deterministic iLQG (iterative LQR) with a backtracking forward pass.

    Stops when the accepted step moves states and inputs by less than
    ``tol``; the gains returned are those of the final backward pass.
    """
    failure = tuple(failure) + (RolloutError,)
    if inputs is None:
        inputs = np.zeros((cost.horizon, model.input_dim))
    traj = rollout(model, x0, inputs)
    J = trajectory_cost(cost, traj)
    costs, deltas = [J], []
    status, it = "iteration_cap", 0
    for it in range(1, max_iterations + 1):
        A, B = linearize_along_trajectory(model, traj)
        k, K = riccati_pass(A, B, quadraticize_cost(cost, traj))
        alpha, new = 1.0, None
        for _ in range(max_shrinks + 1):
            try:
                cand = _forward(model, traj, k, K, alpha)
                J_new = trajectory_cost(cost, cand)
                if J_new <= J:
                    linearize_along_trajectory(model, cand)
                    new = cand
                    break
            except failure:
                pass
            alpha *= shrink
        if new is None:
            status = "line_search_failed"
            break
        delta = max(float(np.max(np.abs(new.states - traj.states))),
                    float(np.max(np.abs(new.inputs - traj.inputs))))
        traj, J = new, J_new
        costs.append(J)
        deltas.append(delta)
        log.debug("ilqg iteration %d cost %.10g delta %.3g alpha %.3g", it, J, delta, alpha)
        if delta < tol:
            status = "converged"
            break
    A, B = linearize_along_trajectory(model, traj)
    _, K = riccati_pass(A, B, quadraticize_cost(cost, traj))
    return ILQGSolution(traj, K, A, B, status, it, costs, deltas)
