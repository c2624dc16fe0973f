"""Simulation, benchmarking and verification tooling."""

from .runner import RunReport, run_scenario
from .scenario import Scenario

__all__ = ["RunReport", "Scenario", "run_scenario"]
