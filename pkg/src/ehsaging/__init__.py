"""Aging-aware control of energy-harvesting systems.

The plant (harvest source, battery, task queue) is a finite controlled Markov
chain; battery aging enters as long-run average constraints, and the optimal
randomized policy comes from the occupation-measure linear program.
"""

from .aging import AgingBounds, BatteryConstants, CostSpec, build_costs, illustrative_constants
from .cmdp import Policy, evaluate_policy, solve_cmdp
from .markov import BurstParams, build_burst_chain, burst_emissions, stationary_distribution
from .system import HarvestingSystem, Source, SystemConfig, build_kernel

__version__ = "0.1.0"

__all__ = [
    "AgingBounds",
    "BatteryConstants",
    "BurstParams",
    "CostSpec",
    "HarvestingSystem",
    "Policy",
    "Source",
    "SystemConfig",
    "build_burst_chain",
    "build_costs",
    "build_kernel",
    "burst_emissions",
    "evaluate_policy",
    "illustrative_constants",
    "solve_cmdp",
    "stationary_distribution",
]
