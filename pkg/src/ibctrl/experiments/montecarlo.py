"""Monte-Carlo closed-loop evaluation of TRV policies against full-state baselines.

Seeding: trial ``i`` of a run with master seed ``s`` draws from
``SeedSequence(s, spawn_key=(i,))``, so results for a trial do not depend
on how many trials run or in which order. Within a trial every policy sees
the same initial state, process noise and measurement noise draws (common
random numbers); a policy's own randomness (sampled TRVs) comes from
``spawn_key=(i, j)`` for policy index ``j``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..discrete import DiscreteSolution, solve, value_iteration
from ..filters import (bayes_step, kalman_predict, kalman_update, mle_control, perturbation_filter,
                       plain_filter_model, precompute_induced_discrete, sampled_control)
from ..lg import LGSystem
from ..nlg import NLGSolution, solve_nlg, trajectory_cost, NominalTrajectory
from ..probdist import Categorical, LinearGaussianChannel
from .baselines import ILQGSolution, solve_ilqg
from .scenarios import LavaScenario, SlipScenario

log = logging.getLogger(__name__)

LAVA_POLICIES = ("mdp_mle", "trv_mle", "trv_sampled")
SLIP_POLICIES = ("ilqg_kf", "trv_kf")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def trial_seed(master: int, trial: int, *sub: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(int(trial),) + tuple(int(s) for s in sub))


def trial_rng(master: int, trial: int, *sub: int) -> np.random.Generator:
    return np.random.default_rng(trial_seed(master, trial, *sub))


@dataclass
class TrialRecord:
    trial: int
    policy: str
    states: np.ndarray
    inputs: np.ndarray
    measurements: np.ndarray
    total: float               # reward for lava, cost for SLIP
    failed: bool = False
    diagnostics: dict = field(default_factory=dict)


def summarize(values, extra: dict | None = None) -> dict:
    v = np.asarray(values, float)
    out = {"n": int(v.size)}
    if v.size:
        out.update(mean=float(v.mean()), variance=float(v.var(ddof=1)) if v.size > 1 else 0.0,
                   std=float(v.std(ddof=1)) if v.size > 1 else 0.0, min=float(v.min()), max=float(v.max()),
                   quantiles={f"{q:g}": float(np.quantile(v, q)) for q in QUANTILES})
    if extra:
        out.update(extra)
    return out


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- lava

@dataclass
class LavaPolicies:
    scenario: LavaScenario
    solution: DiscreteSolution
    mdp_policy: np.ndarray   # (T, n) full-information actions
    sensor: np.ndarray       # (n, n)
    tables: object = None    # InducedDiscrete

    def __post_init__(self):
        if self.tables is None:
            self.tables = precompute_induced_discrete(self.scenario.system(), self.solution, self.sensor)

    @classmethod
    def build(cls, scn: LavaScenario, solution: DiscreteSolution | None = None) -> "LavaPolicies":
        sys = scn.system()
        sol = solution or solve(sys, scn.solver_options())
        _, pol = value_iteration(sys)
        return cls(scn, sol, pol, scn.sensor())


def _inverse_cdf(probs: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(np.cumsum(probs), u, side="right")), probs.size - 1)


def lava_trial(pols: LavaPolicies, policy: str, trial: int, master: int,
               sensor: np.ndarray | None = None) -> TrialRecord:
    """One closed-loop episode; ``sensor`` overrides the true sensor (the filters keep the model's)."""
    scn, sol = pols.scenario, pols.solution
    sys = scn.system()
    T = sys.horizon
    true_sensor = pols.sensor if sensor is None else np.asarray(sensor, float)
    draws = trial_rng(master, trial).random(T + 1)
    own = trial_rng(master, trial, LAVA_POLICIES.index(policy))
    x = _inverse_cdf(sys.init, draws[0])
    states, inputs, obs = [x], [], []
    impossible = 0
    if policy == "mdp_mle":
        belief, proc = Categorical(sys.init), None
    else:
        tables = pols.tables
        belief, proc = Categorical(tables.prior), None
    u_prev, reward = None, 0.0
    for t in range(T):
        y = _inverse_cdf(true_sensor[x], draws[t + 1])
        obs.append(y)
        if policy == "mdp_mle":
            proc = None if t == 0 else sys.transitions[t - 1]
            belief, bad = bayes_step(belief, u_prev, y, proc, pols.sensor)
            u = int(pols.mdp_policy[t, belief.argmax()])
        else:
            proc = None if t == 0 else tables.process[t - 1]
            belief, bad = bayes_step(belief, u_prev, y, proc, tables.sensor[t])
            if policy == "trv_mle":
                u = mle_control(belief, sol.policies[t], own)
            else:
                u = sampled_control(belief, sol.policies[t], own)
        impossible += bad
        reward += scn.reward(x, u)
        x = scn.next_cell(x, u)
        states.append(x)
        inputs.append(u)
        u_prev = u
    reward += scn.terminal_reward(x)
    return TrialRecord(trial, policy, np.array(states), np.array(inputs), np.array(obs), reward,
                       diagnostics={"lava": x == scn.lava, "impossible_observations": impossible})


def run_lava_mc(scn: LavaScenario, pols: LavaPolicies | None = None, n_trials: int | None = None,
                seed: int | None = None, policies=LAVA_POLICIES, sensor=None, threads: int = 1):
    """Returns ``(records, summary)``; records are ordered by (policy, trial)."""
    pols = pols or LavaPolicies.build(scn)
    n = scn.mc.n_trials if n_trials is None else int(n_trials)
    master = scn.mc.seed if seed is None else int(seed)
    records, summary = [], {}
    for policy in policies:
        recs = _map(lambda i: lava_trial(pols, policy, i, master, sensor), range(n), threads)
        records.extend(recs)
        summary[policy] = summarize([r.total for r in recs], {
            "lava_entries": int(sum(r.diagnostics["lava"] for r in recs)),
            "impossible_observations": int(sum(r.diagnostics["impossible_observations"] for r in recs)),
        })
    return records, summary


# ---------------------------------------------------------------- SLIP

@dataclass
class SlipPolicies:
    scenario: SlipScenario
    nlg: NLGSolution
    ilqg: ILQGSolution

    @classmethod
    def build(cls, scn: SlipScenario, nlg: NLGSolution | None = None, ilqg: ILQGSolution | None = None):
        model, cost = scn.model(), scn.cost()
        x0 = np.array(scn.init_mean)
        nlg = nlg or solve_nlg(model, cost, x0, scn.init_cov, scn.beta, opts=scn.nlg_options(),
                               failure=scn.failures)
        ilqg = ilqg or solve_ilqg(model, cost, x0, max_iterations=scn.outer_iterations, tol=scn.outer_tol,
                                  failure=scn.failures)
        return cls(scn, nlg, ilqg)


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


CONDITIONS = ("mismatch", "matched", "noiseless")


def slip_noise(scn: SlipScenario, trial: int, master: int, condition: str):
    """Common random numbers for one trial: ``(x0, process noise[T], meas noise[T], S)``."""
    rng = trial_rng(master, trial)
    T = scn.horizon
    S = rng.random((4, 4))
    z0, ze, zw = rng.standard_normal(4), rng.standard_normal((T, 4)), rng.standard_normal((T, 4))
    if condition == "noiseless":
        return np.array(scn.init_mean), np.zeros((T, 4)), np.zeros((T, 4)), S
    if condition == "mismatch":
        meas = scn.actual_meas_scale * S.T @ S
    elif condition == "matched":
        meas = scn.believed_meas_scale * np.eye(4)
    else:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    x0 = np.array(scn.init_mean) + _sqrt_psd(scn.init_cov) @ z0
    return x0, ze @ _sqrt_psd(scn.process_cov).T, zw @ _sqrt_psd(meas).T, S


def _believed_sensor(scn: SlipScenario) -> LinearGaussianChannel:
    return LinearGaussianChannel(np.eye(4), scn.believed_meas_scale * np.eye(4))


def _ilqg_filter(pols: SlipPolicies):
    scn, sol = pols.scenario, pols.ilqg
    sys = LGSystem(sol.A, sol.B, np.broadcast_to(scn.process_cov, (scn.horizon, 4, 4)), np.zeros(4),
                   scn.init_cov, 1.0, scn.horizon)
    return plain_filter_model(sys, _believed_sensor(scn))


def slip_trial(pols: SlipPolicies, policy: str, trial: int, master: int, condition: str = "mismatch",
               filters: dict | None = None) -> TrialRecord:
    scn = pols.scenario
    model, cost = scn.model(), scn.cost()
    x, eps, omega, _ = slip_noise(scn, trial, master, condition)
    filters = filters or {}
    if policy == "trv_kf":
        flt = filters.get(policy) or perturbation_filter(pols.nlg, _believed_sensor(scn))
        nominal = pols.nlg.trajectory
        belief = flt.start()
    elif policy == "ilqg_kf":
        flt = filters.get(policy) or _ilqg_filter(pols)
        nominal = pols.ilqg.trajectory
        belief = flt.prior
    else:
        raise ValueError(f"unknown SLIP policy {policy!r}")
    states, inputs, ys, nis = [x.copy()], [], [], []
    du_prev = None
    try:
        for t in range(scn.horizon):
            y = x + omega[t]
            ys.append(y)
            if policy == "trv_kf":
                belief, nu, S = flt.step(belief, du_prev, y, t)
                u = pols.nlg.control(t, belief.mean)
            else:
                if t > 0:
                    belief = kalman_predict(belief, du_prev, flt, t - 1)
                belief, nu, S = kalman_update(belief, y - nominal.states[t], flt, t)
                u = pols.ilqg.control(t, belief.mean)
            nis.append(float(nu @ np.linalg.solve(S, nu)))
            du_prev = u - nominal.inputs[t]
            x = model(x, u) + eps[t]
            states.append(x)
            inputs.append(u)
    except scn.failures as exc:
        return TrialRecord(trial, policy, np.array(states), np.array(inputs).reshape(-1, 1), np.array(ys),
                           float("nan"), True, {"condition": condition, "error": str(exc), "nis": nis})
    traj = NominalTrajectory(np.array(states), np.array(inputs).reshape(-1, 1))
    return TrialRecord(trial, policy, traj.states, traj.inputs, np.array(ys), float(trajectory_cost(cost, traj)),
                       False, {"condition": condition, "final_d": float(x[0]), "nis": nis})


def run_slip_mc(scn: SlipScenario, pols: SlipPolicies | None = None, n_trials: int | None = None,
                seed: int | None = None, conditions=("mismatch",), policies=SLIP_POLICIES, threads: int = 1):
    """Returns ``(records, summary)`` with one summary block per condition and policy.

    Failed hops get ``failure_penalty_factor`` times the worst successful
    cost of the condition (over all policies); ``*_excluding_failures``
    entries leave them out.
    """
    pols = pols or SlipPolicies.build(scn)
    n = scn.mc.n_trials if n_trials is None else int(n_trials)
    master = scn.mc.seed if seed is None else int(seed)
    filters = {"trv_kf": perturbation_filter(pols.nlg, _believed_sensor(scn)), "ilqg_kf": _ilqg_filter(pols)}
    records, summary = [], {}
    for cond in conditions:
        by_policy = {p: _map(lambda i: slip_trial(pols, p, i, master, cond, filters), range(n), threads)
                     for p in policies}
        ok = [r.total for recs in by_policy.values() for r in recs if not r.failed]
        penalty = scn.failure_penalty_factor * max(ok) if ok else float("nan")
        block = {"failure_penalty": penalty}
        for p, recs in by_policy.items():
            for r in recs:
                if r.failed:
                    r.total = penalty
                    r.diagnostics["penalized"] = True
            good = [r for r in recs if not r.failed]
            block[p] = summarize([r.total for r in recs], {
                "failures": int(len(recs) - len(good)),
                "excluding_failures": summarize([r.total for r in good]),
                "mean_abs_final_miss": float(np.mean([abs(r.diagnostics["final_d"] - scn.goal_d) for r in good]))
                if good else float("nan"),
                "mean_nis": float(np.mean([v for r in good for v in r.diagnostics["nis"]])) if good else float("nan"),
            })
            records.extend(recs)
        summary[cond] = block
    return records, summary
