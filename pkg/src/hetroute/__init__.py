"""Exact solvers, simulation and actor-critic learning for routing jobs from a
central queue to heterogeneous servers."""

__version__ = "0.1.0"

from .achq import HyperParams, Schedules, StepSchedule, train, train_discounted  # noqa: E402
from .exact import (  # noqa: E402
    exact_average_cost,
    expected_response_time,
    extract_thresholds,
    linear_fit_value,
    relative_value_iteration,
    stationary_distribution,
)
from .mdp import WAIT, State, StateSpace, SystemConfig  # noqa: E402
from .policy import FASPolicy, HardThresholdPolicy, PowerOfD, SoftThresholdParams, TabularPolicy  # noqa: E402
from .simulate import TrajectoryStats, compare, simulate  # noqa: E402

__all__ = [
    "WAIT", "State", "StateSpace", "SystemConfig",
    "FASPolicy", "HardThresholdPolicy", "PowerOfD", "SoftThresholdParams", "TabularPolicy",
    "relative_value_iteration", "stationary_distribution", "exact_average_cost", "expected_response_time",
    "extract_thresholds", "linear_fit_value",
    "HyperParams", "Schedules", "StepSchedule", "train", "train_discounted",
    "TrajectoryStats", "simulate", "compare",
]
