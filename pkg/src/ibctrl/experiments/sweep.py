"""Pick the smallest beta whose solution is good enough.

Each grid value is solved independently; the score of a solution is its
expected task cost in the fully observed closed loop (information term
excluded). The selected beta is the lowest one scoring below the
threshold; if none does, the best-scoring beta is returned with
``threshold_met = False``.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ..discrete import expected_cost as discrete_expected_cost
from ..discrete import solve as solve_discrete
from ..lg import expected_cost as lg_expected_cost
from ..nlg import solve_nlg
from .scenarios import LavaScenario, SlipScenario

log = logging.getLogger(__name__)


@dataclass
class SweepResult:
    betas: np.ndarray
    costs: np.ndarray
    solutions: list
    converged: list[bool]
    threshold: float
    selected_index: int
    threshold_met: bool

    @property
    def selected_beta(self) -> float:
        return float(self.betas[self.selected_index])

    @property
    def selected(self) -> Any:
        return self.solutions[self.selected_index]

    def to_dict(self) -> dict:
        return {"betas": [float(b) for b in self.betas], "expected_costs": [float(c) for c in self.costs],
                "converged": list(map(bool, self.converged)), "cost_threshold": float(self.threshold),
                "selected_beta": self.selected_beta, "selected_index": self.selected_index,
                "threshold_met": self.threshold_met}


def select_beta(betas, costs, threshold: float) -> tuple[int, bool]:
    """Index of the lowest beta with cost below ``threshold`` (or of the best cost) and whether it met it."""
    betas, costs = np.asarray(betas, float), np.asarray(costs, float)
    ok = np.flatnonzero(costs < threshold)
    if ok.size:
        return int(ok[np.argmin(betas[ok])]), True
    finite = np.where(np.isfinite(costs), costs, np.inf)
    return int(np.argmin(finite)), False


def beta_sweep(solve_at: Callable[[float], Any], score: Callable[[Any], float], betas, threshold: float,
               converged: Callable[[Any], bool] = lambda s: bool(getattr(s, "converged", True))) -> SweepResult:
    """Generic sweep; ``solve_at(beta)`` returns a solution and ``score(solution)`` its expected cost."""
    betas = np.asarray(betas, float)
    if betas.size < 2 or np.any(betas <= 0):
        raise ValueError("need at least two positive beta values")
    sols, costs, conv = [], [], []
    for b in betas:
        sol = solve_at(float(b))
        sols.append(sol)
        costs.append(float(score(sol)))
        conv.append(converged(sol))
        log.info("beta %.6g expected cost %.10g converged %s", b, costs[-1], conv[-1])
    idx, met = select_beta(betas, costs, threshold)
    return SweepResult(betas, np.array(costs), sols, conv, float(threshold), idx, met)


def lava_sweep(scn: LavaScenario, betas=None, threshold: float | None = None) -> SweepResult:
    betas = scn.sweep.grid() if betas is None else betas
    threshold = scn.sweep.cost_threshold if threshold is None else threshold

    def solve_at(b):
        sys = scn.system(b)
        return sys, solve_discrete(sys, scn.solver_options())

    return beta_sweep(solve_at, lambda s: discrete_expected_cost(*s), betas, threshold,
                      lambda s: s[1].converged)


def slip_sweep(scn: SlipScenario, betas=None, threshold: float | None = None) -> SweepResult:
    betas = scn.sweep.grid() if betas is None else betas
    threshold = scn.sweep.cost_threshold if threshold is None else threshold
    model, cost = scn.model(), scn.cost()

    def solve_at(b):
        return solve_nlg(model, cost, np.array(scn.init_mean), scn.init_cov, b, opts=scn.nlg_options(),
                         failure=scn.failures)

    def score(sol):
        return lg_expected_cost(sol.lg_system, sol.lg_cost, sol.lg_solution)

    return beta_sweep(solve_at, score, betas, threshold, lambda s: s.converged)


def scenario_sweep(scn, betas=None, threshold: float | None = None) -> SweepResult:
    if isinstance(scn, LavaScenario):
        return lava_sweep(scn, betas, threshold)
    if isinstance(scn, SlipScenario):
        return slip_sweep(scn, betas, threshold)
    raise TypeError(f"no sweep defined for {type(scn).__name__}")


def with_beta(scn, beta: float):
    return dataclasses.replace(scn, beta=float(beta))
