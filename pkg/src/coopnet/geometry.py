"""Pinhole camera, SE(3) poses and the rigid flow induced by camera motion.

Pixel centers sit at integer coordinates, x grows rightward and y downward,
with the origin at the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonPositiveDepth

#: transformed points closer than this to the camera plane are invalid
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def downscaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics for an image average-pooled ``level`` times by 2x2.

        A coarse pixel ``i`` covers fine pixels ``2i`` and ``2i + 1``, so its
        center maps to ``2i + 0.5`` in the fine grid.
        """
        s = 2.0**level
        shift = (s - 1.0) / 2.0
        return CameraIntrinsics(self.fx / s, self.fy / s, (self.cx - shift) / s, (self.cy - shift) / s)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(omega) -> np.ndarray:
    """Rotation matrix of an axis-angle vector."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_right_jacobian(omega) -> np.ndarray:
    """Right Jacobian of SO(3): ``R(w + d) ~= R(w) exp(J_r(w) d)``."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * W + b * W @ W


def rotate_jacobian(omega, points) -> np.ndarray:
    """Derivative of ``R(omega) @ p`` w.r.t. ``omega`` for each point.

    Args:
        omega: axis-angle 3-vector.
        points: (..., 3) array.

    Returns:
        (..., 3, 3) array, ``out[..., i, k] = d(R p)_i / d omega_k``.
    """
    R = rodrigues(omega)
    Jr = so3_right_jacobian(omega)
    points = np.asarray(points, dtype=float)
    # -R [p]x Jr; column k of [p]x Jr is p x Jr[:, k]
    cols = np.cross(points[..., None, :], Jr.T)
    return -np.einsum("ij,...kj->...ik", R, cols)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid motion ``p -> R(rotation) p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi) -> "PoseSE3":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:6])

    @classmethod
    def from_matrix(cls, R, t) -> "PoseSE3":
        rotvec = Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()
        return cls(rotvec, t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def R(self) -> np.ndarray:
        return rodrigues(self.rotation)

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.rotation))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self * other``: apply ``other`` first, then ``self``."""
        R = self.R @ other.R
        t = self.R @ other.translation + self.translation
        return PoseSE3.from_matrix(R, t)

    def inverse(self) -> "PoseSE3":
        Rt = self.R.T
        return PoseSE3.from_matrix(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T


def project(point, K: CameraIntrinsics):
    """Project camera-frame point(s) to pixels.

    Returns:
        ``(pixel, depth)`` where pixel has shape (..., 2).
    """
    point = np.asarray(point, dtype=float)
    z = point[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    u = K.fx * point[..., 0] / z + K.cx
    v = K.fy * point[..., 1] / z + K.cy
    return np.stack([u, v], -1), z


def backproject(pixel, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) at the given depth(s) back to camera-frame 3D points."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be strictly positive")
    x = (pixel[..., 0] - K.cx) / K.fx * depth
    y = (pixel[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], -1)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel coordinates (x, y)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([xs, ys], -1)


def _transformed_points(depth, pose: PoseSE3, K: CameraIntrinsics):
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise NonPositiveDepth("depth map must be finite and strictly positive")
    grid = pixel_grid(*depth.shape)
    rays = np.stack(
        [(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy, np.ones(depth.shape)], -1
    )
    points = rays * depth[..., None]
    moved = points @ pose.R.T + pose.translation
    return grid, rays, points, moved


def rigid_flow(depth, pose: PoseSE3, K: CameraIntrinsics):
    """Flow induced by moving the camera by ``pose`` over a static scene.

    Returns:
        ``(flow, valid)``: (H, W, 2) flow and (H, W) bool mask, false where
        the transformed point falls behind the camera (flow set to 0 there).
    """
    _, _, points, moved = _transformed_points(depth, pose, K)
    z = moved[..., 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    # differencing the two projections makes the identity pose give exact zeros
    du = moved[..., 0] / zs - points[..., 0] / points[..., 2]
    dv = moved[..., 1] / zs - points[..., 1] / points[..., 2]
    flow = np.stack([K.fx * du, K.fy * dv], -1)
    flow[~valid] = 0.0
    return flow, valid


def rigid_flow_jacobians(depth, pose: PoseSE3, K: CameraIntrinsics):
    """Per-pixel Jacobians of the rigid flow.

    Returns:
        ``(d_depth, d_pose, valid)`` with d_depth of shape (H, W, 2) and
        d_pose of shape (H, W, 2, 6) ordered (rotation, translation).
    """
    _, rays, points, moved = _transformed_points(depth, pose, K)
    X, Y, Z = moved[..., 0], moved[..., 1], moved[..., 2]
    valid = Z > MIN_DEPTH
    Z = np.where(valid, Z, 1.0)
    zeros = np.zeros_like(Z)
    # d(u, v) / d(moved point)
    J_proj = np.stack(
        [
            np.stack([K.fx / Z, zeros, -K.fx * X / Z**2], -1),
            np.stack([zeros, K.fy / Z, -K.fy * Y / Z**2], -1),
        ],
        -2,
    )
    d_point_d_depth = rays @ pose.R.T
    d_depth = np.einsum("...ij,...j->...i", J_proj, d_point_d_depth)
    d_rot = np.einsum("...ij,...jk->...ik", J_proj, rotate_jacobian(pose.rotation, points))
    d_pose = np.concatenate([d_rot, J_proj], -1)
    d_depth[~valid] = 0.0
    d_pose[~valid] = 0.0
    return d_depth, d_pose, valid
