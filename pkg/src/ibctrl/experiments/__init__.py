"""Scenarios, baselines, Monte-Carlo evaluation, beta sweeps and the robustness bound."""
from .scenarios import (LavaScenario, MCConfig, ScenarioError, SlipScenario, SweepConfig, builtin_path,
                        load_scenario, scenario_from_dict)

__all__ = ["LavaScenario", "SlipScenario", "SweepConfig", "MCConfig", "ScenarioError", "load_scenario",
           "scenario_from_dict", "builtin_path"]
