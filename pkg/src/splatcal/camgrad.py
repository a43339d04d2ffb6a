"""Backward pass of the photometric loss with respect to camera parameters.

The gradient flows only through the projected splat centers: each splat's 2D
covariance, the visible set, and the depth order are held at their forward-pass
values. ``finite_diff_grad`` provides the matching oracle (``frozen_cov`` mode
differentiates exactly the same function; ``full`` mode re-renders honestly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyFrustum, NonFiniteGradient
from .geometry import (LAMBDA_LP, Z_NEAR, Camera, dfocal_dfov, projection_jacobian,
                       quat_rotmat_jacobian, quat_to_rotmat)
from .optim import camera_to_raw, raw_to_camera
from .renderer import (ALPHA_MAX, _expand_instances, backward_splats, cull_and_project,
                       loss, rasterize)
from .scene import GaussianScene


@dataclass
class CameraGrad:
    """Gradient of the loss w.r.t. the 9 camera parameters.

    d_q is the raw 4-component quaternion gradient (through the internal
    normalization); renormalization happens after the optimizer step.
    """

    d_t: np.ndarray
    d_q: np.ndarray
    d_fov: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_t, self.d_q, self.d_fov])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "CameraGrad":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0:3].copy(), vec[3:7].copy(), vec[7:9].copy())


def chain_duv_to_camera(duv: np.ndarray, p_world: np.ndarray, camera: Camera) -> CameraGrad:
    """Accumulate per-splat dL/duv into camera-parameter space."""
    R, dR = quat_rotmat_jacobian(camera.q)
    p_cam = p_world @ R.T + camera.t
    J = projection_jacobian(p_cam, camera)

    d_t = np.einsum("ni,nik->k", duv, J)
    dp_dq = np.einsum("kij,nj->nki", dR, p_world)
    d_q = np.einsum("ni,nij,nkj->k", duv, J, dp_dq)

    z = p_cam[:, 2]
    d_fov = np.array([
        dfocal_dfov(camera.fov_x, camera.width) * float(np.dot(duv[:, 0], p_cam[:, 0] / z)),
        dfocal_dfov(camera.fov_y, camera.height) * float(np.dot(duv[:, 1], p_cam[:, 1] / z)),
    ])
    grad = CameraGrad(d_t, d_q, d_fov)
    if not np.all(np.isfinite(grad.as_vector())):
        raise NonFiniteGradient("camera gradient contains NaN/Inf")
    return grad


def grad_camera(scene: GaussianScene, camera: Camera, target: np.ndarray, kind: str = "l2",
                bg=(0.0, 0.0, 0.0), lam_lp: float = LAMBDA_LP,
                z_near: float = Z_NEAR) -> CameraGrad:
    """Analytic camera gradient (loss flows through splat centers only)."""
    splats = cull_and_project(scene, camera, lam_lp=lam_lp, z_near=z_near)
    if len(splats) == 0:
        raise EmptyFrustum("no visible gaussian; camera unusable")
    out = backward_splats(splats, target, kind, camera.width, camera.height, bg, needs=("uv",))
    return chain_duv_to_camera(out["duv"], scene.positions[splats.index], camera)


def render_and_grad_camera(scene: GaussianScene, camera: Camera, target: np.ndarray,
                           kind: str = "l2", bg=(0.0, 0.0, 0.0), lam_lp: float = LAMBDA_LP,
                           z_near: float = Z_NEAR) -> tuple[np.ndarray, float, CameraGrad]:
    """One forward + one backward: returns (image, loss, CameraGrad)."""
    splats = cull_and_project(scene, camera, lam_lp=lam_lp, z_near=z_near)
    if len(splats) == 0:
        raise EmptyFrustum("no visible gaussian; camera unusable")
    out = backward_splats(splats, target, kind, camera.width, camera.height, bg, needs=("uv",))
    grad = chain_duv_to_camera(out["duv"], scene.positions[splats.index], camera)
    return out["image"], out["loss"], grad


class FrozenPlan:
    """The smooth branch of the rendering at a nominal camera.

    Captures the visible set, sort order, 2D covariances, per-pixel windows,
    skip/clamp masks and the early-termination pattern; only the projected
    centers move when re-evaluated at a perturbed camera. The analytic
    gradient is the exact derivative of this function at the nominal point.
    """

    def __init__(self, scene: GaussianScene, camera: Camera, bg=(0.0, 0.0, 0.0),
                 lam_lp: float = LAMBDA_LP, z_near: float = Z_NEAR):
        splats = cull_and_project(scene, camera, lam_lp=lam_lp, z_near=z_near)
        if len(splats) == 0:
            raise EmptyFrustum("no visible gaussian; camera unusable")
        self.splats = splats
        self.p_world = scene.positions[splats.index]
        self.bg = np.asarray(bg, dtype=float).reshape(3)
        self.width, self.height = camera.width, camera.height
        inst = _expand_instances(splats, camera.width, camera.height)
        hit_clamp = splats.opacity[inst.splat] * inst.g >= ALPHA_MAX
        active = inst.contrib & (inst.alpha > 0.0)
        self.inst = inst
        self.live = active & ~hit_clamp
        self.clamped = active & hit_clamp

    def loss(self, camera: Camera, target: np.ndarray, kind: str) -> float:
        """Photometric loss at `camera` along the frozen smooth branch."""
        R = quat_to_rotmat(camera.q)
        p_cam = self.p_world @ R.T + camera.t
        fx = camera.width / (2.0 * np.tan(0.5 * camera.fov_x))
        fy = camera.height / (2.0 * np.tan(0.5 * camera.fov_y))
        u = fx * p_cam[:, 0] / p_cam[:, 2] + camera.cx
        v = fy * p_cam[:, 1] / p_cam[:, 2] + camera.cy

        splats, inst = self.splats, self.inst
        ids = inst.splat
        dx = (inst.col + 0.5) - u[ids]
        dy = (inst.row + 0.5) - v[ids]
        a = splats.inv_cov[ids, 0, 0]
        b = splats.inv_cov[ids, 0, 1]
        c = splats.inv_cov[ids, 1, 1]
        g = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        alpha = np.where(self.live, splats.opacity[ids] * g, 0.0)
        alpha = np.where(self.clamped, ALPHA_MAX, alpha)

        log1m = np.log1p(-alpha)
        cl = np.cumsum(log1m)
        ex = cl - log1m
        t_before = np.exp(ex - ex[inst.seg_start][inst.seg_idx])
        w = alpha * t_before
        n_pix = self.width * self.height
        flat = np.zeros((n_pix, 3))
        colors = splats.color[ids]
        for ch in range(3):
            flat[:, ch] = np.bincount(inst.pix, weights=w * colors[:, ch], minlength=n_pix)
        t_fin = np.exp(np.bincount(inst.pix, weights=log1m, minlength=n_pix))
        flat += t_fin[:, None] * self.bg
        image = np.clip(flat.reshape(self.height, self.width, 3), 0.0, 1.0)
        return loss(image, target, kind)


def default_fd_steps(extent: float) -> np.ndarray:
    """Central-difference step sizes for the raw 9-vector."""
    return np.array([1e-4 * extent] * 3 + [1e-5] * 4 + [1e-5] * 2)


def central_difference(f, p0: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central finite differences of a scalar function of a vector."""
    p0 = np.asarray(p0, dtype=float)
    steps = np.asarray(steps, dtype=float)
    if np.any(steps <= 0):
        raise ValueError("finite-difference steps must be positive")
    grad = np.zeros_like(p0)
    for k in range(len(p0)):
        dp = np.zeros_like(p0)
        dp[k] = steps[k]
        grad[k] = (f(p0 + dp) - f(p0 - dp)) / (2.0 * steps[k])
    return grad


def finite_diff_grad(scene: GaussianScene, camera: Camera, target: np.ndarray,
                     kind: str = "l2", mode: str = "frozen_cov",
                     steps: np.ndarray | None = None, bg=(0.0, 0.0, 0.0),
                     lam_lp: float = LAMBDA_LP, z_near: float = Z_NEAR) -> CameraGrad:
    """Finite-difference camera gradient oracle.

    ``frozen_cov`` holds every splat's 2D covariance (and the forward-pass
    structure) at the nominal camera while re-projecting centers; ``full``
    re-culls and re-renders at each probe.
    """
    if mode not in ("full", "frozen_cov"):
        raise ValueError(f"mode must be 'full' or 'frozen_cov', got {mode!r}")
    if steps is None:
        steps = default_fd_steps(scene.extent)
    p0 = camera_to_raw(camera)

    if mode == "frozen_cov":
        plan = FrozenPlan(scene, camera, bg=bg, lam_lp=lam_lp, z_near=z_near)

        def f(p):
            return plan.loss(raw_to_camera(p, camera), target, kind)
    else:
        if len(cull_and_project(scene, camera, lam_lp=lam_lp, z_near=z_near)) == 0:
            raise EmptyFrustum("no visible gaussian; camera unusable")

        def f(p):
            cam = raw_to_camera(p, camera)
            splats = cull_and_project(scene, cam, lam_lp=lam_lp, z_near=z_near)
            return loss(rasterize(splats, cam.width, cam.height, bg), target, kind)

    return CameraGrad.from_vector(central_difference(f, p0, steps))
