"""Delay-compensated boundary control of axon growth."""

from .model import (ParameterError, PhysicalParams, SteadyState, SystemMatrices,
                    compute_steady_state, error_coordinates, physical_coordinates,
                    system_matrices)

__version__ = "0.1.0"

__all__ = [
    "ParameterError", "PhysicalParams", "SteadyState", "SystemMatrices",
    "compute_steady_state", "error_coordinates", "physical_coordinates", "system_matrices",
]
