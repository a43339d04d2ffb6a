"""Hessian-eigenbasis reparameterization of the entangled (tz, fov_x, fov_y) triple.

Near the loss minimum these three camera parameters are strongly coupled
(moving along the optical axis looks like zooming). Optimizing in the
eigenbasis of the loss Hessian decouples them, letting Adam's momentum
accumulate along the low-curvature directions.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import Camera
from .optim import FOV_MAX, FOV_MIN
from .camgrad import CameraGrad, grad_camera
from .scene import GaussianScene

# Finite-difference steps for the Hessian columns (the paper gives no values;
# large enough to dominate rasterizer noise, small enough for 2nd-order accuracy).
EPS_Z_FACTOR = 1e-3   # times scene extent
EPS_FOV = 1e-4        # radians

JACOBI_SWEEPS = 32
DEGENERATE_EIGENVALUE = 1e-12


@dataclass(frozen=True)
class ReparamFrame:
    """Anchor point (tz0, fov_x0, fov_y0) plus the Hessian eigenbasis.

    Columns of E are eigenvectors ordered by descending |eigenvalue|, each with
    its largest-magnitude component positive.
    """

    anchor: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray

    @classmethod
    def identity(cls, anchor: np.ndarray) -> "ReparamFrame":
        return cls(np.asarray(anchor, dtype=float).copy(), np.eye(3), np.zeros(3))


def shift_zfov(camera: Camera, dz: float = 0.0, dfx: float = 0.0, dfy: float = 0.0) -> Camera:
    """Camera with (tz, fov_x, fov_y) offset by the given amounts."""
    t = camera.t.copy()
    t[2] += dz
    return camera.replace(t=t,
                          fov_x=float(np.clip(camera.fov_x + dfx, FOV_MIN, FOV_MAX)),
                          fov_y=float(np.clip(camera.fov_y + dfy, FOV_MIN, FOV_MAX)))


def zfov_grad(grad: CameraGrad) -> np.ndarray:
    """The (tz, fov_x, fov_y) components of a camera gradient."""
    return np.array([grad.d_t[2], grad.d_fov[0], grad.d_fov[1]])


def _worker_count() -> int:
    """Internal parallelism cap from SPLATCAL_THREADS (default 1, sequential)."""
    try:
        return max(1, int(os.environ.get("SPLATCAL_THREADS", "1")))
    except ValueError:
        return 1


def hessian_from_grad_fn(grad_fn, eps: np.ndarray) -> np.ndarray:
    """Symmetrized 3x3 Hessian from central differences of a gradient function.

    `grad_fn(delta)` must return the 3-gradient at the base point offset by
    `delta` (a 3-vector); column k is [g(+eps_k e_k) - g(-eps_k e_k)] / (2 eps_k).
    The six probes are independent and run on up to SPLATCAL_THREADS workers;
    columns are assembled by index, so the result does not depend on timing.
    """
    eps = np.asarray(eps, dtype=float)
    if np.any(eps <= 0):
        raise ValueError("hessian steps must be positive")
    deltas = []
    for k in range(3):
        delta = np.zeros(3)
        delta[k] = eps[k]
        deltas += [delta, -delta]
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grads = list(pool.map(grad_fn, deltas))
    else:
        grads = [grad_fn(d) for d in deltas]
    H = np.zeros((3, 3))
    for k in range(3):
        H[:, k] = (grads[2 * k] - grads[2 * k + 1]) / (2.0 * eps[k])
    return 0.5 * (H + H.T)


def estimate_hessian(scene: GaussianScene, camera: Camera, target: np.ndarray,
                     kind: str = "l2", eps: tuple[float, float] | None = None,
                     bg=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Finite-difference Hessian of the loss over (tz, fov_x, fov_y), evaluated
    from the analytic gradient; propagates EmptyFrustum from unusable probes."""
    if eps is None:
        eps = (EPS_Z_FACTOR * scene.extent, EPS_FOV)
    eps3 = np.array([eps[0], eps[1], eps[1]])

    def grad_fn(delta):
        cam = shift_zfov(camera, *delta)
        return zfov_grad(grad_camera(scene, cam, target, kind, bg=bg))

    return hessian_from_grad_fn(grad_fn, eps3)


def eigen3_sym(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, E) with H @ E = E @ diag(eigenvalues), eigenvalues
    ordered by descending magnitude, and a deterministic sign convention (the
    largest-magnitude component of each eigenvector is positive).
    """
    A = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    V = np.eye(3)
    norm = np.linalg.norm(A)
    if norm == 0.0:
        return np.zeros(3), V

    for _ in range(JACOBI_SWEEPS):
        off = math.sqrt(A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2)
        if off <= 1e-15 * norm:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = A[p, q]
            if abs(apq) <= 1e-18 * norm:
                continue
            theta = 0.5 * (A[q, q] - A[p, p]) / apq
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            G = np.eye(3)
            G[p, p] = G[q, q] = c
            G[p, q] = s
            G[q, p] = -s
            A = G.T @ A @ G
            V = V @ G
            A[p, q] = A[q, p] = 0.0

    eigvals = np.diag(A).copy()
    order = np.argsort(-np.abs(eigvals), kind="stable")
    eigvals = eigvals[order]
    V = V[:, order]
    for j in range(3):
        k = int(np.argmax(np.abs(V[:, j])))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    return eigvals, V


def build_frame(H: np.ndarray, anchor: np.ndarray) -> ReparamFrame:
    """Eigenbasis frame for a Hessian; falls back to the identity basis when the
    Hessian is degenerate (the reparameterization then becomes a no-op)."""
    eigvals, E = eigen3_sym(H)
    norm = np.linalg.norm(H)
    if np.max(np.abs(eigvals)) < DEGENERATE_EIGENVALUE or not np.all(np.isfinite(E)):
        return ReparamFrame.identity(anchor)
    residual = np.linalg.norm(H @ E - E @ np.diag(eigvals))
    if norm > 0 and residual > 1e-6 * norm:
        return ReparamFrame.identity(anchor)
    return ReparamFrame(np.asarray(anchor, dtype=float).copy(), E, eigvals)


def abc_to_params(abc: np.ndarray, frame: ReparamFrame) -> tuple[np.ndarray, bool]:
    """Map eigenbasis coordinates back to (tz, fov_x, fov_y).

    Exact affine map anchor + E @ abc; out-of-range fovs are clamped to
    [FOV_MIN, FOV_MAX] and flagged (soft failure).
    """
    params = frame.anchor + frame.basis @ np.asarray(abc, dtype=float)
    clipped = params.copy()
    clipped[1:] = np.clip(params[1:], FOV_MIN, FOV_MAX)
    return clipped, bool(np.any(clipped != params))


def params_to_abc(params: np.ndarray, frame: ReparamFrame) -> np.ndarray:
    """Inverse of abc_to_params (E is orthogonal, so the inverse is E^T)."""
    return frame.basis.T @ (np.asarray(params, dtype=float) - frame.anchor)


def grad_abc(camera_grad: CameraGrad, frame: ReparamFrame) -> np.ndarray:
    """Chain the (tz, fov) gradient into eigenbasis coordinates: E^T g."""
    return frame.basis.T @ zfov_grad(camera_grad)
