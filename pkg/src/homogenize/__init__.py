"""Multiscale Monte Carlo estimation of homogenized coefficients with matrix-free multigrid."""
from .coeffield import CoefficientField, FieldDistribution, element_coefficients, sample_field
from .estimator import EstimatorConfig, EstimatorSample, chain_domains, estimate_sample, solve_chain
from .fem import FieldVector, HHGSpace, cube_space
from .harness import CampaignConfig, McStats, exponent, run_campaign, singularity_benchmark, variance_slope
from .mesh import build_coarse_cube_mesh, build_interface_index, build_reference_hierarchy
from .multigrid import MgHierarchy, SolverConfig, solve

__version__ = "0.1.0"

__all__ = [
    "CampaignConfig",
    "CoefficientField",
    "EstimatorConfig",
    "EstimatorSample",
    "FieldDistribution",
    "FieldVector",
    "HHGSpace",
    "McStats",
    "MgHierarchy",
    "SolverConfig",
    "build_coarse_cube_mesh",
    "build_interface_index",
    "build_reference_hierarchy",
    "chain_domains",
    "cube_space",
    "element_coefficients",
    "estimate_sample",
    "exponent",
    "run_campaign",
    "sample_field",
    "singularity_benchmark",
    "solve",
    "solve_chain",
    "variance_slope",
]
