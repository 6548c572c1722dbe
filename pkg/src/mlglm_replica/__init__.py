"""Replica predictions for exact MMSE estimation in multi-layer GLMs."""
from .channels import Activation, Layer, NetworkSpec, Prior
from .replica_solver import FixedPointResult, ReplicaState, SolverOptions, solve, solve_slm
from .scalar_estimators import SisoChannel, posterior_mean, scalar_mmse, siso_joint_moment

__all__ = [
    "Activation", "Layer", "NetworkSpec", "Prior",
    "FixedPointResult", "ReplicaState", "SolverOptions", "solve", "solve_slm",
    "SisoChannel", "posterior_mean", "scalar_mmse", "siso_joint_moment",
]
__version__ = "0.1.0"
