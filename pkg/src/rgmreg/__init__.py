"""Rigid point cloud registration by deep graph matching, on numpy."""

from .geometry import RigidTransform, apply_transform, kabsch_svd
from .network import ModelConfig, RGMNet, rgm_forward
from .pipeline import evaluate, register_icp, register_rgm

__all__ = [
    "ModelConfig",
    "RGMNet",
    "RigidTransform",
    "apply_transform",
    "evaluate",
    "kabsch_svd",
    "register_icp",
    "register_rgm",
    "rgm_forward",
]

__version__ = "0.1.0"
