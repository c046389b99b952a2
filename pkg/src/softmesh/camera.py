"""Viewpoint rotation and perspective projection.

World space is right-handed: +X right, +Y up, +Z toward the camera. The
camera sits at (0, 0, distance) looking at the origin, and the field of
view is chosen so the unit ball fits tightly in the rendered image.

Image space: continuous pixel coordinates (x, y) with x right and y down;
the pixel at column c, row r has its center at (c + 0.5, r + 0.5), so an
image of side N spans [0, N] x [0, N] with center (N/2, N/2).

Viewpoint changes rotate the object while the camera stays still: yaw about
the vertical (+Y) axis is applied first, then pitch about the horizontal
(+X) axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import ShapeImage


class DegenerateInputError(ValueError):
    """A point lies at or behind the camera plane."""


@dataclass(frozen=True)
class ViewPose:
    """Object rotation in radians: yaw about +Y, pitch about +X."""

    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        if abs(self.yaw) > math.pi + 1e-12:
            raise ValueError(f"|yaw| must be <= pi, got {self.yaw}")
        if abs(self.pitch) > math.pi / 2 + 1e-12:
            raise ValueError(f"|pitch| must be <= pi/2, got {self.pitch}")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Perspective camera on the +Z axis at `distance`, looking at the origin.

    half_angle = arcsin(1/distance) makes the unit sphere's silhouette
    inscribed in the image (it touches all four edges).
    """

    distance: float = 10.0
    image_side: int = 64
    half_angle: float = field(default=0.0)

    def __post_init__(self):
        if self.distance <= 1.0:
            raise ValueError(f"camera distance must be > 1, got {self.distance}")
        expected = math.asin(1.0 / self.distance)
        if self.half_angle == 0.0:
            object.__setattr__(self, "half_angle", expected)
        elif abs(self.half_angle - expected) > 1e-9:
            raise ValueError("half_angle must equal arcsin(1/distance)")

    @property
    def pixel_scale(self) -> float:
        # Pixels per unit of x/z_cam; (N/2) * sqrt(distance^2 - 1) maps the
        # unit-sphere tangent ray exactly onto the image border.
        return 0.5 * self.image_side * math.sqrt(self.distance**2 - 1.0)


def rotation_matrix(pose: ViewPose) -> np.ndarray:
    """3x3 rotation R = R_pitch @ R_yaw (yaw applied first)."""
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return r_pitch @ r_yaw


def rotate_scene(s: ShapeImage, pose: ViewPose) -> ShapeImage:
    """Rigidly rotate every vertex of the shape image."""
    r = rotation_matrix(pose)
    flat = s.data.reshape(3, -1)
    return ShapeImage((r @ flat).reshape(s.data.shape), s.n)


def project(p3: np.ndarray, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Perspective-project world points onto the image plane.

    Accepts (..., 3) arrays. Returns ((..., 2) pixel coordinates, (...)
    camera-space depth along the optical axis). Raises DegenerateInputError
    for points at or behind the camera plane.
    """
    p3 = np.asarray(p3, dtype=np.float64)
    x, y, z = p3[..., 0], p3[..., 1], p3[..., 2]
    depth = intrinsics.distance - z
    if np.any(depth <= 0):
        raise DegenerateInputError("point at or behind the camera plane")
    half = intrinsics.image_side / 2.0
    scale = intrinsics.pixel_scale
    px = half + scale * x / depth
    py = half - scale * y / depth
    return np.stack([px, py], axis=-1), depth


def project_vjp(
    p3: np.ndarray,
    grad_px: np.ndarray,
    intrinsics: CameraIntrinsics,
) -> np.ndarray:
    """Jacobian-transpose of `project` pixel coordinates w.r.t. world points.

    grad_px has shape (..., 2); returns (..., 3). Depth carries no upstream
    co-tangent in this renderer (depths only enter discrete selections).
    """
    p3 = np.asarray(p3, dtype=np.float64)
    x, y, z = p3[..., 0], p3[..., 1], p3[..., 2]
    depth = intrinsics.distance - z
    scale = intrinsics.pixel_scale
    gx = grad_px[..., 0]
    gy = grad_px[..., 1]
    dx = gx * scale / depth
    dy = -gy * scale / depth
    # d(1/depth)/dz = +1/depth^2 since depth = distance - z.
    dz = gx * scale * x / depth**2 - gy * scale * y / depth**2
    return np.stack([dx, dy, dz], axis=-1)
