"""Adam optimizer and the 9-value camera parameter vector.

The raw camera vector is [tx, ty, tz, qw, qx, qy, qz, fov_x, fov_y]. In
reparameterized mode the layout is [tx, ty, qw, qx, qy, qz, a, b, c] and the
(tz, fov) triple is recovered through the eigenbasis frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroQuaternion
from .geometry import Camera, quat_normalize

logger = logging.getLogger(__name__)

FOV_MIN = 1e-3
FOV_MAX = math.pi - 1e-3

# Slices of the two camera-vector layouts.
RAW_T, RAW_Q, RAW_FOV = slice(0, 3), slice(3, 7), slice(7, 9)
ABC_T, ABC_Q, ABC_ABC = slice(0, 2), slice(2, 6), slice(6, 9)


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    n: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros(cls, size: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, beta1, beta2, eps)

    @classmethod
    def zeros_like(cls, params: np.ndarray, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(params.shape), np.zeros(params.shape), 0, beta1, beta2, eps)


def adam_update(state: AdamState, grad: np.ndarray, lr: float | np.ndarray) -> np.ndarray:
    """Bias-corrected Adam increment lr * m_hat / (sqrt(v_hat) + eps).

    Mutates the moment accumulators; the caller subtracts the increment from
    its parameters (possibly after an affine change of coordinates). A
    non-finite gradient leaves the state untouched and returns zeros.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        logger.warning("non-finite gradient, step skipped (total skipped: %d)", state.skipped)
        return np.zeros(state.m.shape)
    state.n += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.n)
    v_hat = state.v / (1.0 - state.beta2 ** state.n)
    return lr * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float | np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameters.

    `lr` may be a scalar or a per-component array (per-group learning rates).
    Non-finite gradients skip the step entirely and bump `state.skipped`.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match params {params.shape}")
    return params - adam_update(state, grad, lr)


def camera_to_raw(camera: Camera) -> np.ndarray:
    """Pack a camera into the raw 9-vector [t, q, fov]."""
    return np.concatenate([camera.t, camera.q, [camera.fov_x, camera.fov_y]])


def raw_to_camera(vec: np.ndarray, template: Camera) -> Camera:
    """Rebuild a camera from a raw 9-vector; intrinsics layout comes from `template`."""
    vec = np.asarray(vec, dtype=float)
    return template.replace(t=vec[RAW_T].copy(), q=quat_normalize(vec[RAW_Q]),
                            fov_x=float(np.clip(vec[7], FOV_MIN, FOV_MAX)),
                            fov_y=float(np.clip(vec[8], FOV_MIN, FOV_MAX)))


def project_camera_params(params: np.ndarray, layout: str = "raw") -> tuple[np.ndarray, bool]:
    """Re-establish camera parameter constraints after an optimizer step.

    Renormalizes the quaternion block and, in the raw layout, clamps fov to
    [FOV_MIN, FOV_MAX]. Returns (params, fov_clamped_flag). Raises
    ZeroQuaternion if the quaternion block collapsed.
    """
    params = np.array(params, dtype=float)
    q_slice = RAW_Q if layout == "raw" else ABC_Q
    norm = float(np.linalg.norm(params[q_slice]))
    if norm < 1e-9:
        raise ZeroQuaternion("camera quaternion collapsed during optimization")
    params[q_slice] = quat_normalize(params[q_slice])
    clamped = False
    if layout == "raw":
        fov = params[RAW_FOV]
        clipped = np.clip(fov, FOV_MIN, FOV_MAX)
        clamped = bool(np.any(clipped != fov))
        params[RAW_FOV] = clipped
    return params, clamped


@dataclass
class CameraRates:
    """Per-group learning rates for camera parameters.

    `translation` is in units of scene extent; the others are absolute.
    """

    translation: float = 1e-3
    quaternion: float = 1e-4
    fov: float = 1e-4
    abc: float = 1e-3

    def vector(self, layout: str, extent: float) -> np.ndarray:
        t = self.translation * extent
        if layout == "raw":
            return np.array([t, t, t] + [self.quaternion] * 4 + [self.fov] * 2)
        return np.array([t, t] + [self.quaternion] * 4 + [self.abc] * 3)


@dataclass
class ModelRates:
    """Per-attribute-group learning rates for gaussian model training.

    `position` is in units of scene extent; the others act on the stored
    parameterization (log-scale, raw quaternion, logit-opacity, raw color).
    """

    position: float = 1.6e-4
    scale: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3


@dataclass
class OptimizerConfig:
    """Adam hyperparameters plus the camera/model learning-rate groups."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    camera: CameraRates = field(default_factory=CameraRates)
    model: ModelRates = field(default_factory=ModelRates)

    def new_state(self, size: int) -> AdamState:
        return AdamState.zeros(size, self.beta1, self.beta2, self.eps)

    def new_state_like(self, params: np.ndarray) -> AdamState:
        return AdamState.zeros_like(params, self.beta1, self.beta2, self.eps)
