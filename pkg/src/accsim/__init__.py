"""Microscopic highway simulator with a dual-DQN adaptive cruise control stack."""

__version__ = "0.1.0"

from .scenario import Scenario, load_scenario, load_builtin  # noqa: F401
