"""Finite element laboratory for periodic homogenization with rough Dirichlet data."""

from homoglab.cell import CoefficientField, HomogenizedTensor, compute_tensor, from_tag
from homoglab.experiments import ExperimentConfig, fit_rate, run_single, run_study
from homoglab.geometry import DomainSpec, distance_to_boundary
from homoglab.mesh_fem import GridFunction, Mesh, SolverConfig, build_mesh

__all__ = ["CoefficientField", "HomogenizedTensor", "compute_tensor", "from_tag", "ExperimentConfig",
           "fit_rate", "run_single", "run_study", "DomainSpec", "distance_to_boundary", "GridFunction",
           "Mesh", "SolverConfig", "build_mesh"]
__version__ = "0.1.0"
