"""Pinhole camera model, posed views, and per-pixel ray generation.

Pose convention: 4x4 camera-to-world, right-handed, camera looks down
-z with +x right and +y up (the common NeRF manifest convention).
Pixel (u, v) indexes (column, row); pixel centers sit at integer
coordinates, so the image rectangle spans [-0.5, W-0.5) x [-0.5, H-0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class CameraView:
    """One posed input image."""

    image: np.ndarray            # (H,W,3) float32 in [0,1]
    pose: np.ndarray             # (4,4) float64 camera-to-world
    fx: float
    fy: float
    cx: float
    cy: float
    alpha: np.ndarray | None = None   # (H,W) float32, optional
    name: str = ""

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.pose = np.ascontiguousarray(self.pose, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ContractViolation(f"image must be (H,W,3), got {self.image.shape}")
        if self.pose.shape != (4, 4):
            raise ContractViolation(f"pose must be 4x4, got {self.pose.shape}")
        r = self.pose[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-5:
            raise ContractViolation("pose rotation block is not orthonormal")
        h, w = self.image.shape[:2]
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise ContractViolation(
                f"principal point ({self.cx},{self.cy}) outside {w}x{h} image")
        if self.alpha is not None:
            self.alpha = np.ascontiguousarray(self.alpha, dtype=np.float32)
            if self.alpha.shape != (h, w):
                raise ContractViolation("alpha shape does not match image")

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def origin(self):
        return self.pose[:3, 3].copy()


@dataclass
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,), unit norm
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ContractViolation("ray direction must be unit norm")
        if not self.near < self.far:
            raise ContractViolation("ray requires near < far")


def project(points, view):
    """World points -> continuous pixel coordinates + in-frustum flags.

    Accepts a single (3,) point or an (N,3) batch. The flag is False for
    points behind the camera or outside the image rectangle.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    r = view.pose[:3, :3]
    t = view.pose[:3, 3]
    if abs(abs(np.linalg.det(r)) - 1.0) > 1e-4:
        raise ContractViolation("degenerate pose")
    cam = (p - t) @ r   # == R.T @ (p - t) per row
    z = cam[:, 2]
    in_front = z < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(in_front, -z, 1.0)
        u = view.cx + view.fx * cam[:, 0] / depth
        v = view.cy - view.fy * cam[:, 1] / depth
    uv = np.stack([u, v], axis=1)
    inside = (in_front & (u >= -0.5) & (u < view.width - 0.5)
              & (v >= -0.5) & (v < view.height - 0.5))
    uv[~in_front] = 0.0
    if single:
        return uv[0], bool(inside[0])
    return uv, inside


def pixel_directions(view, us, vs):
    """World-space (unnormalized) directions through pixel centers."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d_cam = np.stack([(us - view.cx) / view.fx,
                      -(vs - view.cy) / view.fy,
                      -np.ones_like(us)], axis=-1)
    return d_cam @ view.pose[:3, :3].T


def generate_rays(view, near, far):
    """One ray per pixel, row-major order: origins (HW,3), dirs (HW,3)."""
    h, w = view.height, view.width
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = pixel_directions(view, ii.reshape(-1), jj.reshape(-1))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(view.pose[:3, 3], dirs.shape).copy()
    if not near < far:
        raise ContractViolation("generate_rays requires near < far")
    return origins, dirs


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_axis = eye - target
    z_axis = z_axis / np.linalg.norm(z_axis)
    x_axis = np.cross(up, z_axis)
    n = np.linalg.norm(x_axis)
    if n < 1e-8:   # looking straight along 'up'
        x_axis = np.array([1.0, 0.0, 0.0])
    else:
        x_axis = x_axis / n
    y_axis = np.cross(z_axis, x_axis)
    pose = np.eye(4)
    pose[:3, 0] = x_axis
    pose[:3, 1] = y_axis
    pose[:3, 2] = z_axis
    pose[:3, 3] = eye
    return pose
