"""Information-bottleneck synthesis on finite state, input and TRV spaces.

The solver alternates three steps until the objective settles:

1. propagate the state marginals forward under the current encoder/policy,
2. replace each encoder row by its Boltzmann form (backward sweep, values
   recomputed on the way),
3. replace each policy row by the argmin of expected stage cost plus
   cost-to-go (backward sweep).

Array layout (``T`` = horizon, ``n`` states, ``m`` inputs, ``k`` TRVs):

* ``transitions[t, x, u, x']`` = p_t(x' | x, u)
* ``stage_costs[t, x, u]``, ``terminal_cost[x]``
* ``encoders[t, x, xt]`` = q_t(xt | x), ``policies[t, xt, u]`` = pi_t(u | xt)
* ``marginals[t, x]`` for ``t = 0..T``; ``trv_marginals[t, xt]`` for ``t < T``
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .probdist import PROB_TOL, mutual_information_discrete

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


class DegenerateMarginalError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscreteSystem:
    transitions: np.ndarray
    stage_costs: np.ndarray
    terminal_cost: np.ndarray
    init: np.ndarray
    n_trvs: int
    beta: float
    horizon: int | None = None

    def __post_init__(self):
        init = np.asarray(self.init, dtype=float).ravel()
        n = init.size
        P = np.asarray(self.transitions, dtype=float)
        c = np.asarray(self.stage_costs, dtype=float)
        T = self.horizon
        if T is None:
            T = P.shape[0] if P.ndim == 4 else c.shape[0] if c.ndim == 3 else None
            if T is None:
                raise ValueError("horizon is required for time-invariant tables")
        T = int(T)
        if T <= 0:
            raise ValueError("horizon must be positive")
        if P.ndim == 3:
            P = np.broadcast_to(P, (T,) + P.shape)
        if c.ndim == 2:
            c = np.broadcast_to(c, (T,) + c.shape)
        if P.ndim != 4 or P.shape[0] != T or P.shape[1] != n or P.shape[3] != n:
            raise ValueError(f"transitions must have shape (T, n, m, n); got {P.shape} with n={n}, T={T}")
        m = P.shape[2]
        if c.shape != (T, n, m):
            raise ValueError(f"stage costs must have shape {(T, n, m)}, got {c.shape}")
        cT = np.asarray(self.terminal_cost, dtype=float).ravel()
        if cT.shape != (n,):
            raise ValueError(f"terminal cost must have {n} entries")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=3) - 1.0)) > 1e-10:
            raise ValueError("transition rows must be probability distributions")
        if np.any(init < 0) or abs(init.sum() - 1.0) > PROB_TOL * n:
            raise ValueError("initial distribution must be a probability vector")
        if int(self.n_trvs) <= 0:
            raise ValueError("n_trvs must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        for name, val in (("transitions", P), ("stage_costs", c), ("terminal_cost", cT), ("init", init)):
            val = np.array(val, dtype=float)
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "n_trvs", int(self.n_trvs))
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n_states(self) -> int:
        return self.init.size

    @property
    def n_inputs(self) -> int:
        return self.transitions.shape[2]

    def with_beta(self, beta: float) -> "DiscreteSystem":
        return DiscreteSystem(self.transitions, self.stage_costs, self.terminal_cost, self.init,
                              self.n_trvs, beta, self.horizon)

    def to_dict(self) -> dict:
        return {
            "kind": "discrete",
            "n_states": self.n_states,
            "n_inputs": self.n_inputs,
            "n_trvs": self.n_trvs,
            "horizon": self.horizon,
            "beta": self.beta,
            "transitions": self.transitions.tolist(),
            "stage_costs": self.stage_costs.tolist(),
            "terminal_cost": self.terminal_cost.tolist(),
            "init": self.init.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteSystem":
        missing = [k for k in ("transitions", "stage_costs", "terminal_cost", "init", "n_trvs", "beta")
                   if k not in d]
        if missing:
            raise KeyError(f"discrete scenario is missing fields: {', '.join(missing)}")
        sys = cls(d["transitions"], d["stage_costs"], d["terminal_cost"], d["init"],
                  d["n_trvs"], d["beta"], d.get("horizon"))
        for key, actual in (("n_states", sys.n_states), ("n_inputs", sys.n_inputs)):
            if key in d and int(d[key]) != actual:
                raise ValueError(f"field {key}={d[key]} disagrees with table shapes ({actual})")
        return sys

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DiscreteSystem":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 30
    tol: float = 1e-9
    param_tol: float = 1e-10
    seed: int = 0
    warm_start_policy: bool = True
    init: str = "random"

    def __post_init__(self):
        if self.init not in ("random", "identity"):
            raise ValueError(f"init must be 'random' or 'identity', got {self.init!r}")
        if int(self.max_iterations) <= 0:
            raise ValueError("max_iterations must be positive")
        if not self.tol > 0 or not self.param_tol > 0:
            raise ValueError("tolerances must be positive")


@dataclass
class DiscreteSolution:
    encoders: np.ndarray
    policies: np.ndarray
    marginals: np.ndarray
    trv_marginals: np.ndarray
    values: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    status: str = "iteration_cap"
    iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        return {
            "encoders": self.encoders.tolist(),
            "policies": self.policies.tolist(),
            "marginals": self.marginals.tolist(),
            "trv_marginals": self.trv_marginals.tolist(),
            "values": self.values.tolist(),
            "objective_trace": list(self.objective_trace),
            "status": self.status,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteSolution":
        return cls(*(np.asarray(d[k], float) for k in
                     ("encoders", "policies", "marginals", "trv_marginals", "values")),
                   objective_trace=list(d.get("objective_trace", [])),
                   status=d.get("status", "iteration_cap"), iterations=int(d.get("iterations", 0)))


def _check_shapes(sys: DiscreteSystem, encoders, policies):
    T, n, m, k = sys.horizon, sys.n_states, sys.n_inputs, sys.n_trvs
    if encoders is not None and np.shape(encoders) != (T, n, k):
        raise ValueError(f"encoders must have shape {(T, n, k)}, got {np.shape(encoders)}")
    if policies is not None and np.shape(policies) != (T, k, m):
        raise ValueError(f"policies must have shape {(T, k, m)}, got {np.shape(policies)}")


def closed_loop_kernel(P_t: np.ndarray, encoder: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """p_t(x' | x) with the TRV and input summed out."""
    u_given_x = encoder @ policy
    return np.einsum("xu,xuy->xy", u_given_x, P_t)


def propagate_marginals(sys: DiscreteSystem, encoders, policies):
    """Forward pass; returns ``(marginals[T+1, n], trv_marginals[T, k])``."""
    _check_shapes(sys, encoders, policies)
    T = sys.horizon
    marg = np.empty((T + 1, sys.n_states))
    trv = np.empty((T, sys.n_trvs))
    marg[0] = sys.init
    for t in range(T):
        trv[t] = marg[t] @ encoders[t]
        marg[t + 1] = marg[t] @ closed_loop_kernel(sys.transitions[t], encoders[t], policies[t])
    return marg, trv


def action_values(sys: DiscreteSystem, t: int, values_next: np.ndarray) -> np.ndarray:
    """c_t(x, u) + E[nu_{t+1}(x') | x, u] as an (n, m) array."""
    return sys.stage_costs[t] + sys.transitions[t] @ values_next


def stage_expectation(sys: DiscreteSystem, t: int, policy: np.ndarray, values_next: np.ndarray) -> np.ndarray:
    """E[c_t + nu_{t+1} | x, xt] as an (n, k) array."""
    return action_values(sys, t, values_next) @ policy.T


def _kl_rows(encoder: np.ndarray, trv_marginal: np.ndarray) -> np.ndarray:
    out = np.zeros(encoder.shape[0])
    for i, row in enumerate(encoder):
        mask = row > 0
        if np.any(trv_marginal[mask] <= 0):
            out[i] = np.inf
        else:
            out[i] = np.sum(row[mask] * (np.log(row[mask]) - np.log(trv_marginal[mask])))
    return out


def stage_value(sys, t, encoder, policy, trv_marginal, values_next) -> np.ndarray:
    """nu_t(x) = E[c_t + nu_{t+1} | x] + KL(q_t(.|x) || q_t(.)) / beta."""
    D = stage_expectation(sys, t, policy, values_next)
    return np.sum(encoder * D, axis=1) + _kl_rows(encoder, trv_marginal) / sys.beta


def compute_values(sys: DiscreteSystem, encoders, policies, trv_marginals) -> np.ndarray:
    T = sys.horizon
    values = np.empty((T + 1, sys.n_states))
    values[T] = sys.terminal_cost
    for t in range(T - 1, -1, -1):
        values[t] = stage_value(sys, t, encoders[t], policies[t], trv_marginals[t], values[t + 1])
    return values


def boltzmann_encoder(trv_marginal: np.ndarray, D: np.ndarray, beta: float):
    """Rows ``q(xt) exp(-beta D[x, xt]) / Z(x)``; returns ``(encoder, log_Z)``.

    Symbols with zero marginal stay at zero (they are retired, not revived).
    """
    with np.errstate(divide="ignore"):
        logits = np.log(trv_marginal)[None, :] - beta * D
    shift = np.max(logits, axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise DegenerateMarginalError("TRV marginal has no support with finite exponent")
    w = np.exp(logits - shift)
    s = w.sum(axis=1, keepdims=True)
    return w / s, (np.log(s) + shift).ravel()


def update_encoder(sys: DiscreteSystem, marginals, trv_marginals, policies):
    """Boltzmann encoder update, backward in time.

    ``trv_marginals`` are the (lagged) TRV marginals from the last forward
    pass. Returns ``(encoders, values)``; ``values[T]`` is the terminal cost
    and ``values[t] = -log Z_t / beta``.
    """
    T = sys.horizon
    _check_shapes(sys, None, policies)
    encoders = np.empty((T, sys.n_states, sys.n_trvs))
    values = np.empty((T + 1, sys.n_states))
    values[T] = sys.terminal_cost
    for t in range(T - 1, -1, -1):
        D = stage_expectation(sys, t, policies[t], values[t + 1])
        encoders[t], log_z = boltzmann_encoder(trv_marginals[t], D, sys.beta)
        values[t] = -log_z / sys.beta
    return encoders, values


def greedy_policy_row(expected: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """One-hot on the argmin, or uniform over the argmin set on ties."""
    best = np.min(expected)
    ties = expected <= best + tie_tol * max(1.0, abs(best))
    return ties / ties.sum()


def update_policy(sys: DiscreteSystem, marginals, encoders, policies_prev=None):
    """Per-TRV argmin policies, backward in time; returns ``(policies, values)``.

    With the state and encoder distributions fixed, the stage objective is
    linear in each policy row, so the minimum sits on a vertex of the argmin
    face and direct enumeration is exact.
    """
    T, k, m = sys.horizon, sys.n_trvs, sys.n_inputs
    _check_shapes(sys, encoders, policies_prev)
    policies = np.full((T, k, m), 1.0 / m) if policies_prev is None else np.array(policies_prev, float)
    values = np.empty((T + 1, sys.n_states))
    values[T] = sys.terminal_cost
    for t in range(T - 1, -1, -1):
        Qxu = action_values(sys, t, values[t + 1])
        joint = marginals[t][:, None] * encoders[t]          # p(x, xt)
        mass = joint.sum(axis=0)
        for j in range(k):
            if mass[j] <= 0:
                continue                                     # retired symbol: keep row
            policies[t, j] = greedy_policy_row(joint[:, j] @ Qxu / mass[j])
        values[t] = stage_value(sys, t, encoders[t], policies[t], mass, values[t + 1])
    return policies, values


def expected_stage_costs(sys: DiscreteSystem, encoders, policies, marginals=None) -> np.ndarray:
    """E c_t for t < T followed by E c_T (length T + 1)."""
    if marginals is None:
        marginals, _ = propagate_marginals(sys, encoders, policies)
    out = np.empty(sys.horizon + 1)
    for t in range(sys.horizon):
        u_given_x = encoders[t] @ policies[t]
        out[t] = np.sum(marginals[t][:, None] * u_given_x * sys.stage_costs[t])
    out[-1] = marginals[-1] @ sys.terminal_cost
    return out


def stage_informations(sys: DiscreteSystem, encoders, marginals) -> np.ndarray:
    return np.array([mutual_information_discrete(marginals[t], encoders[t]) for t in range(sys.horizon)])


def evaluate_objective(sys: DiscreteSystem, solution) -> float:
    """Sum over t of E c_t + I(x_t; xt_t) / beta, plus E c_T."""
    enc, pol = solution.encoders, solution.policies
    marg, _ = propagate_marginals(sys, enc, pol)
    return float(expected_stage_costs(sys, enc, pol, marg).sum()
                 + stage_informations(sys, enc, marg).sum() / sys.beta)


def expected_cost(sys: DiscreteSystem, solution) -> float:
    """Task cost only (no information term) of the fully observed closed loop."""
    return float(expected_stage_costs(sys, solution.encoders, solution.policies).sum())


def _objective(sys, enc, pol) -> float:
    marg, _ = propagate_marginals(sys, enc, pol)
    return float(expected_stage_costs(sys, enc, pol, marg).sum()
                 + stage_informations(sys, enc, marg).sum() / sys.beta)


def random_encoders(sys: DiscreteSystem, rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(0.05, 1.0, size=(sys.horizon, sys.n_states, sys.n_trvs))
    return w / w.sum(axis=2, keepdims=True)


def identity_encoders(sys: DiscreteSystem) -> np.ndarray:
    """Deterministic encoders sending state ``x`` to symbol ``x mod k``.

    With ``k >= n`` the warm-start policy step then reproduces full-state
    dynamic programming, which is the right start at large beta; random
    starts there tend to retire symbols before the policy has settled.
    """
    enc = np.zeros((sys.horizon, sys.n_states, sys.n_trvs))
    enc[:, np.arange(sys.n_states), np.arange(sys.n_states) % sys.n_trvs] = 1.0
    return enc


def solve(sys: DiscreteSystem, opts: SolverOptions | None = None) -> DiscreteSolution:
    """Alternate forward propagation, encoder and policy updates.

    Convergence is not guaranteed; the loop stops when both the objective
    change and the largest encoder/policy change fall below tolerance, or at
    the iteration cap. ``status`` reports which.
    """
    opts = opts or SolverOptions()
    rng = np.random.default_rng(opts.seed)
    enc = identity_encoders(sys) if opts.init == "identity" else random_encoders(sys, rng)
    pol = np.full((sys.horizon, sys.n_trvs, sys.n_inputs), 1.0 / sys.n_inputs)
    trace = [_objective(sys, enc, pol)]
    if opts.warm_start_policy:
        # uniform policies would make the first encoder update discard all
        # state information, so fit the policy to the random encoder first
        marg, _ = propagate_marginals(sys, enc, pol)
        pol, _ = update_policy(sys, marg, enc, pol)
    status = "iteration_cap"
    it = 0
    for it in range(1, opts.max_iterations + 1):
        marg, trv = propagate_marginals(sys, enc, pol)
        new_enc, _ = update_encoder(sys, marg, trv, pol)
        new_pol, _ = update_policy(sys, marg, new_enc, pol)
        change = max(np.max(np.abs(new_enc - enc)), np.max(np.abs(new_pol - pol)))
        enc, pol = new_enc, new_pol
        trace.append(_objective(sys, enc, pol))
        if not np.isfinite(trace[-1]):
            raise FloatingPointError(f"objective became non-finite at iteration {it}")
        log.debug("discrete iteration %d objective %.12g change %.3g", it, trace[-1], change)
        if abs(trace[-1] - trace[-2]) < opts.tol and change < opts.param_tol:
            status = "converged"
            break
    marg, trv = propagate_marginals(sys, enc, pol)
    values = compute_values(sys, enc, pol, trv)
    return DiscreteSolution(enc, pol, marg, trv, values, trace, status, it)


def fonc_residual(sys: DiscreteSystem, solution) -> float:
    """Largest gap between each encoder entry and its Boltzmann form."""
    enc, pol = solution.encoders, solution.policies
    marg, trv = propagate_marginals(sys, enc, pol)
    values = compute_values(sys, enc, pol, trv)
    worst = 0.0
    for t in range(sys.horizon):
        D = stage_expectation(sys, t, pol[t], values[t + 1])
        rhs, _ = boltzmann_encoder(trv[t], D, sys.beta)
        worst = max(worst, float(np.max(np.abs(enc[t] - rhs))))
    return worst


def value_iteration(sys: DiscreteSystem):
    """Full-state finite-horizon dynamic programming.

    Returns ``(values[T+1, n], policy[T, n])`` with deterministic
    lowest-index argmin actions.
    """
    T = sys.horizon
    V = np.empty((T + 1, sys.n_states))
    pol = np.empty((T, sys.n_states), dtype=int)
    V[T] = sys.terminal_cost
    for t in range(T - 1, -1, -1):
        Q = action_values(sys, t, V[t + 1])
        pol[t] = np.argmin(Q, axis=1)
        V[t] = Q[np.arange(sys.n_states), pol[t]]
    return V, pol
