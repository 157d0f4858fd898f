"""Scenario definitions for the lava MDP and the SLIP runner, plus JSON loading.

Rewards in the lava problem are stored as given (positive = good) and
negated into costs when the solver system is built.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from ..discrete import DiscreteSystem, SolverOptions
from ..lg import LGOptions, QuadCost
from ..nlg import NLGOptions, NonlinearModel
from ..slip.model import FailedHop, SlipParams, linearize_return_map, return_map_array


class ScenarioError(ValueError):
    pass


def _check_keys(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known - {"kind", "description"}
    if unknown:
        raise ScenarioError(f"{where}: unknown fields {sorted(unknown)}")


@dataclass(frozen=True)
class SweepConfig:
    interval: tuple[float, float]
    count: int = 10
    cost_threshold: float = 0.0

    def __post_init__(self):
        lo, hi = map(float, self.interval)
        if not 0 < lo <= hi:
            raise ScenarioError(f"sweep interval must be positive and ordered, got {self.interval}")
        if int(self.count) < 2:
            raise ScenarioError("sweep count must be at least 2")
        object.__setattr__(self, "interval", (lo, hi))

    def grid(self) -> np.ndarray:
        return np.linspace(*self.interval, int(self.count))


@dataclass(frozen=True)
class MCConfig:
    n_trials: int = 500
    seed: int = 0

    def __post_init__(self):
        if int(self.n_trials) <= 0:
            raise ScenarioError("n_trials must be positive")


@dataclass(frozen=True)
class LavaScenario:
    """Five cells in a line, an absorbing lava cell and a goal cell.

    Actions are 0 = left, 1 = right (walls clamp). The stage reward is
    earned on entering the next cell.
    """

    n_cells: int = 5
    goal: int = 2
    lava: int = 4
    horizon: int = 5
    goal_reward: float = 5.0
    step_reward: float = -1.0
    terminal_goal: float = 10.0
    terminal_lava: float = -10.0
    init: tuple = (0.3, 0.4, 0.0, 0.3, 0.0)
    sensor_accuracy: float = 0.5
    n_trvs: int = 3
    beta: float = 0.001
    max_iterations: int = 30
    solver_seed: int = 0
    sweep: SweepConfig = field(default_factory=lambda: SweepConfig((0.001, 1.0), 10, 0.0))
    mc: MCConfig = field(default_factory=MCConfig)

    def __post_init__(self):
        n = int(self.n_cells)
        if not (0 <= self.goal < n and 0 <= self.lava < n and self.goal != self.lava):
            raise ScenarioError("goal and lava must be distinct cells")
        if len(self.init) != n:
            raise ScenarioError(f"init must have {n} entries")
        if not 0 <= self.sensor_accuracy <= 1:
            raise ScenarioError("sensor_accuracy must lie in [0, 1]")
        object.__setattr__(self, "init", tuple(float(v) for v in self.init))

    def next_cell(self, x: int, u: int) -> int:
        if x == self.lava:
            return x
        return max(0, x - 1) if u == 0 else min(self.n_cells - 1, x + 1)

    def reward(self, x: int, u: int) -> float:
        return self.goal_reward if self.next_cell(x, u) == self.goal else self.step_reward

    def terminal_reward(self, x: int) -> float:
        return self.terminal_goal if x == self.goal else self.terminal_lava if x == self.lava else 0.0

    def system(self, beta: float | None = None) -> DiscreteSystem:
        n = self.n_cells
        P = np.zeros((n, 2, n))
        c = np.zeros((n, 2))
        for x in range(n):
            for u in range(2):
                P[x, u, self.next_cell(x, u)] = 1.0
                c[x, u] = -self.reward(x, u)
        cT = -np.array([self.terminal_reward(x) for x in range(n)])
        return DiscreteSystem(P, c, cT, self.init, self.n_trvs, self.beta if beta is None else beta, self.horizon)

    def sensor(self) -> np.ndarray:
        n = self.n_cells
        s = np.full((n, n), (1.0 - self.sensor_accuracy) / (n - 1))
        np.fill_diagonal(s, self.sensor_accuracy)
        return s

    def solver_options(self) -> SolverOptions:
        return SolverOptions(max_iterations=self.max_iterations, seed=self.solver_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init"] = list(self.init)
        d["sweep"]["interval"] = list(self.sweep.interval)
        return {"kind": "lava", **d}

    @classmethod
    def from_dict(cls, d: dict) -> "LavaScenario":
        _check_keys(cls, d, "lava scenario")
        d = dict(d)
        d.pop("kind", None)
        d.pop("description", None)
        if "sweep" in d:
            d["sweep"] = SweepConfig(**d["sweep"])
        if "mc" in d:
            d["mc"] = MCConfig(**d["mc"])
        if "init" in d:
            d["init"] = tuple(d["init"])
        return cls(**d)


@dataclass(frozen=True)
class SlipScenario:
    """Place the head at ``goal_d`` after ``horizon`` hops.

    Costs follow the solver convention ``0.5 u'Ru`` per hop and
    ``0.5 terminal_weight (d - goal_d)^2`` at the end, so
    ``terminal_weight = 2`` is the plain squared distance.
    """

    params: SlipParams = field(default_factory=lambda: SlipParams(guard_clearance=5e-4))
    horizon: int = 3
    goal_d: float = 3.2
    input_cost: float = 10.0
    terminal_weight: float = 2.0
    init_mean: tuple = (0.0, 0.3927, -3.273, -6.788)
    init_cov_scale: float = 1e-3
    process_cov_diag: tuple = (1e-4, 1e-5, 5e-5, 5e-5)
    believed_meas_scale: float = 1e-4
    actual_meas_scale: float = 1e-3
    beta: float = 23.11
    outer_iterations: int = 50
    outer_tol: float = 1e-6
    lg_iterations: int = 3000
    solver_seed: int = 0
    failure_penalty_factor: float = 10.0
    sweep: SweepConfig = field(default_factory=lambda: SweepConfig((1.0, 200.0), 10, 0.03))
    mc: MCConfig = field(default_factory=MCConfig)

    def __post_init__(self):
        if len(self.init_mean) != 4 or len(self.process_cov_diag) != 4:
            raise ScenarioError("SLIP states have 4 entries")
        for name in ("init_cov_scale", "believed_meas_scale", "actual_meas_scale", "input_cost",
                     "terminal_weight", "beta"):
            if not getattr(self, name) >= 0:
                raise ScenarioError(f"{name} must be nonnegative")
        object.__setattr__(self, "init_mean", tuple(map(float, self.init_mean)))
        object.__setattr__(self, "process_cov_diag", tuple(map(float, self.process_cov_diag)))

    @property
    def process_cov(self) -> np.ndarray:
        return np.diag(self.process_cov_diag)

    @property
    def init_cov(self) -> np.ndarray:
        return self.init_cov_scale * np.eye(4)

    def model(self, params: SlipParams | None = None) -> NonlinearModel:
        p = params or self.params

        def jac(x, u):
            return linearize_return_map(p, x, float(np.ravel(u)[0]))

        return NonlinearModel(lambda x, u: return_map_array(p, x, u), self.process_cov, 4, 1, "slip", jac)

    def cost(self) -> QuadCost:
        Q_T = np.zeros((4, 4))
        Q_T[0, 0] = self.terminal_weight
        return QuadCost.build(4, 1, self.horizon, R=self.input_cost * np.eye(1), Q_T=Q_T,
                              g_T=[self.goal_d, 0.0, 0.0, 0.0])

    def nlg_options(self) -> NLGOptions:
        return NLGOptions(max_iterations=self.outer_iterations, tol=self.outer_tol,
                          lg=LGOptions(max_iterations=self.lg_iterations, seed=self.solver_seed))

    failures = (FailedHop,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init_mean"] = list(self.init_mean)
        d["process_cov_diag"] = list(self.process_cov_diag)
        d["sweep"]["interval"] = list(self.sweep.interval)
        return {"kind": "slip", **d}

    @classmethod
    def from_dict(cls, d: dict) -> "SlipScenario":
        _check_keys(cls, d, "slip scenario")
        d = dict(d)
        d.pop("kind", None)
        d.pop("description", None)
        if "params" in d:
            d["params"] = SlipParams.from_dict(d["params"])
        if "sweep" in d:
            d["sweep"] = SweepConfig(**d["sweep"])
        if "mc" in d:
            d["mc"] = MCConfig(**d["mc"])
        return cls(**d)


SCENARIOS = {"lava": LavaScenario, "slip": SlipScenario}


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("ibctrl") / "scenarios" / f"{name}.json"))


def scenario_from_dict(d: dict):
    kind = d.get("kind")
    if kind not in SCENARIOS:
        raise ScenarioError(f"unknown scenario kind {kind!r}; expected one of {sorted(SCENARIOS)}")
    return SCENARIOS[kind].from_dict(d)


def load_scenario(ref):
    """Load a lava/SLIP scenario from a path or a built-in name (``"lava"``, ``"slip"``)."""
    path = Path(ref)
    if not path.exists() and str(ref) in SCENARIOS:
        path = builtin_path(str(ref))
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {ref}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(d)
