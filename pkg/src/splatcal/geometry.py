"""Pose and intrinsics math: quaternions, world-to-camera transforms, pinhole projection.

Conventions: quaternions are stored (w, x, y, z) as in COLMAP text files; poses are
world-to-camera, p_cam = R(q) @ p_world + t; fields of view are FULL angles with
focal = size / (2 * tan(fov / 2)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCamera, DomainError, ZeroQuaternion

# Gaussians closer than this to the image plane are culled (avoids the 1/z singularity).
Z_NEAR = 0.01

# Low-pass floor added to projected 2D covariances, in pixels^2.
LAMBDA_LP = 0.3


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||; raises ZeroQuaternion below 1e-9 norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-9):
        raise ZeroQuaternion("quaternion norm below 1e-9")
    # Idempotent: re-normalizing an already-unit quaternion leaves its bits alone.
    return q / np.where(np.abs(n - 1.0) < 1e-12, 1.0, n)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion rotating by `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) * axis))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert quaternion(s) (..., 4) to rotation matrix/matrices (..., 3, 3).

    Normalizes internally, so the map is smooth in the raw 4 components.
    """
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotmat_jacobian(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its derivative w.r.t. the raw quaternion components.

    Returns (R, dR) with R of shape (..., 3, 3) and dR of shape (..., 4, 3, 3),
    dR[..., k, :, :] = dR/dq_k. The chain includes the internal normalization,
    so central differences of quat_to_rotmat match dR directly.
    """
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-9):
        raise ZeroQuaternion("quaternion norm below 1e-9")
    qh = q / n
    w, x, y, z = np.moveaxis(qh, -1, 0)
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    d_hat = np.stack([
        2 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]]),
        2 * mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]]),
        2 * mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]]),
        2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]]),
    ], axis=-3)
    # d(q/||q||)/dq = (I - qh qh^T) / ||q||
    proj = (np.eye(4) - qh[..., :, None] * qh[..., None, :]) / n[..., None]
    d_raw = np.einsum("...mij,...mk->...kij", d_hat, proj)
    return quat_to_rotmat(q), d_raw


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert a 3x3 rotation matrix to a quaternion (w, x, y, z) with w >= 0."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / math.sqrt(trace + 1.0)
        q = np.array([0.25 / s, (R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_geodesic_angle(qa: np.ndarray, qb: np.ndarray) -> float:
    """Rotation angle in radians between the rotations of two quaternions."""
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    if np.array_equal(qa, qb) or np.array_equal(qa, -qb):
        return 0.0  # exact inputs give an exact zero (acos is ill-conditioned at 1)
    d = min(1.0, abs(float(np.dot(qa, qb))))
    return 2.0 * math.acos(d)


@dataclass(frozen=True)
class Camera:
    """World-to-camera pose plus pinhole intrinsics.

    t: translation (3,); q: unit quaternion (w, x, y, z); fov_x/fov_y: full
    field-of-view angles in radians; cx/cy: principal point in pixels (held
    fixed, never optimized); width/height: image size in pixels.
    """

    t: np.ndarray
    q: np.ndarray
    fov_x: float
    fov_y: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "q", quat_normalize(np.array(self.q, dtype=float).reshape(4)))
        if not (0.0 < self.fov_x < math.pi and 0.0 < self.fov_y < math.pi):
            raise DomainError(f"fov must lie in (0, pi), got ({self.fov_x}, {self.fov_y})")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be at least 1x1")
        if not (0.0 <= self.cx <= self.width and 0.0 <= self.cy <= self.height):
            raise DomainError("principal point outside the image")

    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def focal(self) -> tuple[float, float]:
        return (fov_to_focal(self.fov_x, self.width), fov_to_focal(self.fov_y, self.height))

    def replace(self, **kw) -> "Camera":
        return replace(self, **kw)


def fov_to_focal(fov: float, size: float) -> float:
    """Focal length in pixels for a full field-of-view angle."""
    if not 0.0 < fov < math.pi:
        raise DomainError(f"fov must lie in (0, pi), got {fov}")
    return size / (2.0 * math.tan(0.5 * fov))


def focal_to_fov(focal: float, size: float) -> float:
    """Inverse of fov_to_focal."""
    if focal <= 0.0:
        raise DomainError(f"focal must be positive, got {focal}")
    return 2.0 * math.atan(size / (2.0 * focal))


def dfocal_dfov(fov: float, size: float) -> float:
    """d(focal)/d(fov) for a full field-of-view angle."""
    s = math.sin(0.5 * fov)
    return -size / (4.0 * s * s)


def world_to_camera(p_world: np.ndarray, camera: Camera) -> np.ndarray:
    """Map world point(s) (..., 3) into the camera frame."""
    p_world = np.asarray(p_world, dtype=float)
    return p_world @ camera.rotation().T + camera.t


def project_point(p_cam: np.ndarray, camera: Camera, z_near: float = Z_NEAR) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) (..., 3) to pixels (..., 2).

    Raises BehindCamera if any z <= z_near; callers cull such gaussians.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    z = p_cam[..., 2]
    if np.any(z <= z_near):
        raise BehindCamera(f"point at z={float(np.min(z))} is behind the near plane")
    fx, fy = camera.focal()
    u = fx * p_cam[..., 0] / z + camera.cx
    v = fy * p_cam[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def projection_jacobian(p_cam: np.ndarray, camera: Camera) -> np.ndarray:
    """Jacobian (..., 2, 3) of project_point w.r.t. the camera-frame point."""
    p_cam = np.asarray(p_cam, dtype=float)
    x, y, z = np.moveaxis(p_cam, -1, 0)
    fx, fy = camera.focal()
    zero = np.zeros_like(z)
    inv_z = 1.0 / z
    row0 = np.stack([fx * inv_z, zero, -fx * x * inv_z * inv_z], axis=-1)
    row1 = np.stack([zero, fy * inv_z, -fy * y * inv_z * inv_z], axis=-1)
    return np.stack([row0, row1], axis=-2)


def project_covariance(
    cov3: np.ndarray,
    camera: Camera,
    p_cam: np.ndarray,
    lam_lp: float = LAMBDA_LP,
    z_near: float = Z_NEAR,
) -> np.ndarray:
    """Project world-frame 3D covariance(s) to the image plane (EWA local affine).

    Sigma2D = J @ R @ cov3 @ R^T @ J^T + lam_lp * I, with J the projection
    Jacobian at p_cam. Accepts (..., 3, 3) with matching (..., 3) points.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    if np.any(p_cam[..., 2] <= z_near):
        raise BehindCamera("covariance projection behind the near plane")
    J = projection_jacobian(p_cam, camera)
    M = J @ camera.rotation()
    cov2 = M @ np.asarray(cov3, dtype=float) @ np.swapaxes(M, -1, -2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, -1, -2))
    return cov2 + lam_lp * np.eye(2)


def build_covariance(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """3D covariance(s) R diag(scale^2) R^T from scale(s) (..., 3) and quaternion(s) (..., 4)."""
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise DomainError("scale components must be positive")
    R = quat_to_rotmat(rot)
    return (R * (scale * scale)[..., None, :]) @ np.swapaxes(R, -1, -2)


def look_at(position: np.ndarray, target: np.ndarray, up: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (q, t) for a camera at `position` whose +z axis points at `target`."""
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = target - position
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise DomainError("camera position coincides with the look-at target")
    forward = forward / n
    up = np.array([0.0, 1.0, 0.0]) if up is None else np.asarray(up, dtype=float)
    if abs(float(np.dot(up, forward))) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    cam_y = np.cross(forward, right)
    R = np.stack([right, cam_y, forward], axis=0)
    q = rotmat_to_quat(R)
    t = -R @ position
    return q, t
