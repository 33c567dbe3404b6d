"""Equivariant point-network toolkit: finite rotation groups, separable
point/group convolutions on point clouds, pooling and detection heads,
analytic gradients, and a CLI for audits, benchmarks, and toy training."""

from .conv import (
    ExplicitKernel,
    FeatureMap,
    GroupKernel,
    ImplicitKernelParams,
    SixDimKernel,
    implicit_point_conv,
    make_kernel_points,
    naive_se3_conv,
    ones_feature_map,
    se3_group_conv,
    se3_point_conv,
    spconv_block,
    spherical_interpolate,
)
from .estimators import EquivariantCloudClassifier, EquivariantPoseEstimator
from .group import FiniteRotationGroup, build_group, nearest_group_element
from .sampling import NeighborhoodTable, ball_query, build_hierarchy, farthest_point_sample

__version__ = "0.1.0"

__all__ = [
    "ExplicitKernel",
    "FeatureMap",
    "GroupKernel",
    "ImplicitKernelParams",
    "SixDimKernel",
    "implicit_point_conv",
    "make_kernel_points",
    "naive_se3_conv",
    "ones_feature_map",
    "se3_group_conv",
    "se3_point_conv",
    "spconv_block",
    "spherical_interpolate",
    "EquivariantCloudClassifier",
    "EquivariantPoseEstimator",
    "FiniteRotationGroup",
    "build_group",
    "nearest_group_element",
    "NeighborhoodTable",
    "ball_query",
    "build_hierarchy",
    "farthest_point_sample",
    "__version__",
]
