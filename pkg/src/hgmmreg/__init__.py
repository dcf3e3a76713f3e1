"""Rigid point cloud registration against a hierarchical Gaussian mixture (GMM-tree)."""

from .assoc import BACKEND, AssocConfig, MomentSet, associate_adaptive, responsibilities_dense
from .geom import RigidTransform, eig_sym3, rotation_error_deg, small_angle_rotation
from .gmmtree import GmmTree, ModelConfig, build_flat_gmm, build_tree, node_complexity
from .io import PointCloud, read_cloud, subsample, write_cloud
from .mle import VirtualPointSet, criterion, solve_mstep
from .register import RegistrationConfig, RegistrationResult, Variant, register, register_icp_pt2pt

__all__ = [
    "BACKEND", "AssocConfig", "MomentSet", "associate_adaptive", "responsibilities_dense",
    "RigidTransform", "eig_sym3", "rotation_error_deg", "small_angle_rotation",
    "GmmTree", "ModelConfig", "build_flat_gmm", "build_tree", "node_complexity",
    "PointCloud", "read_cloud", "subsample", "write_cloud",
    "VirtualPointSet", "criterion", "solve_mstep",
    "RegistrationConfig", "RegistrationResult", "Variant", "register", "register_icp_pt2pt",
]
__version__ = "0.1.0"
