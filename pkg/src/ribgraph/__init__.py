"""Skeleton-graph non-rigid registration of thoracic cartilage point clouds."""

from .core import (
    ALL_BRANCH_LABELS,
    LABEL_STERNUM,
    LABEL_UNASSIGNED,
    LEVELS,
    SIDES,
    Basis3,
    PointCloud,
    RigidTransform,
    branch_label,
    branch_side_level,
    hausdorff,
    kabsch_fit,
    kmeans_cluster,
    pca_axes,
)
from .io import load_point_cloud, save_point_cloud

__version__ = "0.1.0"
