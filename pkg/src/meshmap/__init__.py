"""Object-level mapping and localization from silhouettes and keypoints.

Mesh objects are fitted to semantic masks and keypoints through a
differentiable silhouette rasterizer; cameras are localized against known
objects starting from drifting odometry.
"""
from .liegroup import Pose
from .mesh import TriMesh, make_ellipsoid, make_icosphere
from .camera import CameraIntrinsics

__version__ = "0.1.0"

__all__ = ["Pose", "TriMesh", "make_ellipsoid", "make_icosphere", "CameraIntrinsics"]
