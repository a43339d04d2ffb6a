"""Interleaved training loop: model-training blocks alternating with per-camera
fine-tuning under an EMA-of-PSNR-progress early-stopping rule."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .camgrad import chain_duv_to_camera
from .errors import DomainError, EmptyFrustum
from .geometry import (Camera, build_covariance, projection_jacobian, quat_rotmat_jacobian,
                       quat_to_rotmat)
from .optim import (ABC_ABC, RAW_FOV, RAW_Q, AdamState, OptimizerConfig, adam_step,
                    adam_update, camera_to_raw, project_camera_params, raw_to_camera)
from .renderer import _expand_instances, backward_splats, cull_and_project, psnr, rasterize
from .reparam import ReparamFrame, build_frame, estimate_hessian, grad_abc
from .scene import GaussianScene

logger = logging.getLogger(__name__)

OPACITY_LOGIT_CLIP = 1e-6


@dataclass(frozen=True)
class EmaScore:
    """Exponential moving average of per-step PSNR progress, in dB."""

    s: float = 0.0
    beta: float = 1.0 / 50.0
    steps_seen: int = 0


def ema_update(score: EmaScore, psnr_prev: float, psnr_next: float) -> EmaScore:
    """s' = s (1 - beta) + beta (psnr_next - psnr_prev)."""
    if not 0.0 < score.beta < 1.0:
        raise DomainError("EMA beta must lie in (0, 1)")
    s = score.s * (1.0 - score.beta) + score.beta * (psnr_next - psnr_prev)
    return EmaScore(s, score.beta, score.steps_seen + 1)


@dataclass
class ScheduleConfig:
    """Knobs of the interleaved calibration loop.

    model_steps is the M model-training iterations per phase; a camera trains
    for at least min_steps and at most max_steps, stopping early once the EMA
    progress score drops below `threshold` (strict <).
    """

    model_steps: int = 3000
    min_steps: int = 100
    max_steps: int = 1000
    threshold: float = 0.0002
    n_phases: int = 5
    camera_loss: str = "l2"
    model_loss: str = "l1"
    reparam_after_phase: int = 1
    reparam_refresh_every: int = 0   # re-estimate the Hessian frame every k phases; 0 = once
    ema_beta: float = 1.0 / 50.0
    use_reparam: bool = True
    train_fov: bool = True
    keep_best: bool = False
    refine_heldout: bool = False
    seed: int = 0
    psnr_stride: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    hessian_eps_z: float = 1e-3      # times scene extent
    hessian_eps_fov: float = 1e-4

    def __post_init__(self):
        if self.model_steps < 1:
            raise DomainError("model_steps must be at least 1")
        if not 0 <= self.min_steps <= self.max_steps:
            raise DomainError("need 0 <= min_steps <= max_steps")
        if self.threshold < 0:
            raise DomainError("threshold must be non-negative")
        if self.n_phases < 1:
            raise DomainError("need at least one phase")
        if self.camera_loss not in ("l1", "l2") or self.model_loss not in ("l1", "l2"):
            raise DomainError("losses must be 'l1' or 'l2'")
        if self.psnr_stride < 1:
            raise DomainError("psnr_stride must be at least 1")


@dataclass
class CameraPhaseRecord:
    """Per-camera outcome of one fine-tuning pass."""

    camera_id: int
    steps: int
    psnr_before: float | None
    psnr_after: float | None
    stop_reason: str
    final_score: float
    fov_clamped: bool = False
    skipped: bool = False
    trace: list = field(default_factory=list)  # (step, psnr, score)

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "steps": self.steps,
            "psnr_before": self.psnr_before,
            "psnr_after": self.psnr_after,
            "stop_reason": self.stop_reason,
            "final_score": self.final_score,
            "fov_clamped": self.fov_clamped,
            "skipped": self.skipped,
        }


@dataclass
class PhaseRecord:
    phase: int
    parameterization: str
    model_loss_trace: list
    cameras: list

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "parameterization": self.parameterization,
            "model_loss_trace": self.model_loss_trace,
            "cameras": [c.to_dict() for c in self.cameras],
        }


@dataclass
class PhaseReport:
    """Full calibration run outcome; wall-clock timings live outside the
    serialized payload so reports stay byte-identical across runs."""

    phases: list = field(default_factory=list)
    heldout: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def totals(self) -> dict:
        records = [c for p in self.phases for c in p.cameras if not c.skipped]
        steps = sum(c.steps for c in records)
        baseline = sum(1000 for _ in records)
        return {
            "camera_passes": len(records),
            "camera_steps": steps,
            "camera_steps_always_max_baseline": baseline,
            "camera_steps_saved": baseline - steps,
            "camera_steps_saved_fraction": (baseline - steps) / baseline if baseline else 0.0,
        }

    def to_dict(self) -> dict:
        return {
            "phases": [p.to_dict() for p in self.phases],
            "heldout": [c.to_dict() for c in self.heldout],
            "totals": self.totals(),
        }

    def trace_rows(self) -> list:
        """Flat (phase, camera_id, step, psnr, score) rows for the CSV trace."""
        rows = []
        for p in self.phases:
            for c in p.cameras:
                for step, value, score in c.trace:
                    rows.append((p.phase, c.camera_id, step, value, score))
        return rows


@dataclass
class _CamState:
    """Mutable loop state for one camera's fine-tuning pass.

    `vec` is always the raw 9-vector [t, q, fov]. In reparameterized mode the
    Adam moments live in (tx, ty, q, a, b, c) coordinates and the eigenbasis
    maps each update increment back onto (tz, fov); with an identity basis
    this reproduces the raw trajectory bit for bit.
    """

    scene: GaussianScene
    camera: Camera
    target: np.ndarray
    adam: AdamState
    frame: ReparamFrame | None
    vec: np.ndarray
    splats: object
    inst: object
    image: np.ndarray
    psnr: float
    fov_clamped: bool = False

    @property
    def layout(self) -> str:
        return "raw" if self.frame is None else "abc"

    @classmethod
    def create(cls, scene, camera, target, cfg, adam, frame):
        splats = cull_and_project(scene, camera)
        if len(splats) == 0:
            raise EmptyFrustum("camera sees no gaussian")
        inst = _expand_instances(splats, camera.width, camera.height)
        image = rasterize(splats, camera.width, camera.height, cfg.background, inst=inst)
        return cls(scene, camera, target, adam, frame, camera_to_raw(camera), splats, inst,
                   image, _psnr_strided(image, target, cfg.psnr_stride))


def _psnr_strided(image: np.ndarray, target: np.ndarray, stride: int) -> float:
    if stride == 1:
        return psnr(image, target)
    return psnr(image[::stride, ::stride], target[::stride, ::stride])


def _step_camera(st: _CamState, cfg: ScheduleConfig, opt: OptimizerConfig) -> float:
    """One gradient step on the camera; returns the PSNR at the new state.

    Raises EmptyFrustum if the updated camera no longer sees the scene.
    """
    out = backward_splats(st.splats, st.target, cfg.camera_loss,
                          st.camera.width, st.camera.height, cfg.background,
                          needs=("uv",), image=st.image, inst=st.inst)
    grad = chain_duv_to_camera(out["duv"], st.scene.positions[st.splats.index], st.camera)
    if not cfg.train_fov:
        grad.d_fov[:] = 0.0

    lr = opt.camera.vector(st.layout, st.scene.extent)
    vec = st.vec.copy()
    if st.frame is None:
        if not cfg.train_fov:
            lr[RAW_FOV] = 0.0
        vec -= adam_update(st.adam, grad.as_vector(), lr)
    else:
        gvec = np.concatenate([grad.d_t[0:2], grad.d_q, grad_abc(grad, st.frame)])
        delta = adam_update(st.adam, gvec, lr)
        vec[0:2] -= delta[0:2]
        vec[RAW_Q] -= delta[2:6]
        vec[[2, 7, 8]] -= st.frame.basis @ delta[ABC_ABC]
    vec, clamped = project_camera_params(vec, "raw")
    camera = raw_to_camera(vec, st.camera)

    splats = cull_and_project(st.scene, camera)
    if len(splats) == 0:
        raise EmptyFrustum("camera moved off the scene")
    st.vec = vec
    st.camera = camera
    st.splats = splats
    st.inst = _expand_instances(splats, camera.width, camera.height)
    st.fov_clamped |= clamped
    st.image = rasterize(splats, camera.width, camera.height, cfg.background, inst=st.inst)
    st.psnr = _psnr_strided(st.image, st.target, cfg.psnr_stride)
    return st.psnr


def camera_phase(scene: GaussianScene, camera: Camera, target: np.ndarray,
                 cfg: ScheduleConfig, opt: OptimizerConfig, adam: AdamState,
                 frame: ReparamFrame | None = None, camera_id: int = 0,
                 ) -> tuple[Camera, CameraPhaseRecord]:
    """Fine-tune one camera with early stopping on the EMA progress score.

    Runs between min_steps and max_steps gradient steps, updating the score
    with each step's PSNR delta and stopping as soon as the step count is at
    least min_steps and the score falls strictly below the threshold. The
    camera is left at its last state unless cfg.keep_best rolls back to the
    best-PSNR state seen.
    """
    if target.shape != (camera.height, camera.width, 3):
        raise DomainError("target dimensions do not match the camera")
    try:
        st = _CamState.create(scene, camera, target, cfg, adam, frame)
    except EmptyFrustum:
        return camera, CameraPhaseRecord(camera_id, 0, None, None,
                                         "empty_frustum", 0.0, skipped=True)
    psnr_before = st.psnr
    psnr_prev = st.psnr
    best = (st.psnr, st.camera)
    score = EmaScore(0.0, cfg.ema_beta, 0)
    trace = []
    reason = "max_steps"
    steps = 0

    for n in range(1, cfg.max_steps + 1):
        try:
            value = _step_camera(st, cfg, opt)
        except EmptyFrustum:
            reason = "empty_frustum"
            break
        steps = n
        score = ema_update(score, psnr_prev, value)
        psnr_prev = value
        trace.append((n, value, score.s))
        if value > best[0]:
            best = (value, st.camera)
        if n >= cfg.min_steps and score.s < cfg.threshold:
            reason = "threshold"
            break

    final = best[1] if cfg.keep_best else st.camera
    psnr_after = best[0] if cfg.keep_best else st.psnr
    return final, CameraPhaseRecord(camera_id, steps, psnr_before, psnr_after, reason,
                                    score.s, fov_clamped=st.fov_clamped, trace=trace)


class ModelState:
    """Trainable parameterization of a gaussian scene plus its Adam states.

    Scales are optimized in log space, opacities through a logit, rotations as
    raw quaternions renormalized after each step; colors clamp to [0, 1].
    """

    GROUPS = ("position", "scale", "rotation", "opacity", "color")

    def __init__(self, scene: GaussianScene, opt: OptimizerConfig):
        self.scene = scene
        self.position = scene.positions.copy()
        self.log_scale = np.log(scene.scales)
        self.rotation = scene.rotations.copy()
        op = np.clip(scene.opacities, OPACITY_LOGIT_CLIP, 1.0 - OPACITY_LOGIT_CLIP)
        self.logit_opacity = np.log(op) - np.log1p(-op)
        self.color = scene.colors.copy()
        self.adam = {g: opt.new_state_like(getattr(self, self._attr(g))) for g in self.GROUPS}

    @staticmethod
    def _attr(group: str) -> str:
        return {"position": "position", "scale": "log_scale", "rotation": "rotation",
                "opacity": "logit_opacity", "color": "color"}[group]

    def write_back(self):
        """Push the training parameterization into the scene arrays."""
        s = self.scene
        norms = np.maximum(np.linalg.norm(self.rotation, axis=1, keepdims=True), 1e-12)
        s.positions = self.position
        s.scales = np.exp(self.log_scale)
        s.rotations = self.rotation / norms
        s.opacities = 1.0 / (1.0 + np.exp(-self.logit_opacity))
        s.colors = np.clip(self.color, 0.0, 1.0)


def _model_gradients(state: ModelState, splats, out: dict, camera: Camera) -> dict:
    """Chain per-splat gradients to the gaussian attribute groups.

    Positions get both the projected-center path and the covariance path
    through the projection Jacobian (which depends on the camera-frame
    center); scale and rotation flow through dL/dSigma2D alone, their only
    path. The depth sort stays frozen, as in the forward pass.
    """
    idx = splats.index
    scene = state.scene
    R_cam = quat_to_rotmat(camera.q)
    p_cam = scene.positions[idx] @ R_cam.T + camera.t
    J = projection_jacobian(p_cam, camera)
    M = J @ R_cam                                    # (n, 2, 3)

    grads = {g: np.zeros_like(getattr(state, state._attr(g))) for g in ModelState.GROUPS}

    grads["color"][idx] = out["dcolor"]
    o = scene.opacities[idx]
    grads["opacity"][idx] = out["dopacity"] * o * (1.0 - o)

    cov3 = build_covariance(scene.scales[idx], scene.rotations[idx])
    cov3_cam = R_cam @ cov3 @ R_cam.T                # (n, 3, 3)
    g2 = out["dcov"]                                 # (n, 2, 2) symmetric

    # Center path plus d(J M3 J^T)/d(p_cam) through J's dependence on the center.
    d_pcam = np.einsum("nij,ni->nj", J, out["duv"])
    B = cov3_cam @ np.swapaxes(J, 1, 2)              # (n, 3, 2)
    fx, fy = camera.focal()
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z2 = 1.0 / (z * z)
    gb0 = g2[:, 0, 0] * B[:, 2, 0] + g2[:, 0, 1] * B[:, 2, 1]
    gb1 = g2[:, 1, 0] * B[:, 2, 0] + g2[:, 1, 1] * B[:, 2, 1]
    d_pcam[:, 0] += 2.0 * (-fx * inv_z2) * gb0
    d_pcam[:, 1] += 2.0 * (-fy * inv_z2) * gb1
    d_pcam[:, 2] += 2.0 * (
        -fx * inv_z2 * (g2[:, 0, 0] * B[:, 0, 0] + g2[:, 0, 1] * B[:, 0, 1])
        - fy * inv_z2 * (g2[:, 1, 0] * B[:, 1, 0] + g2[:, 1, 1] * B[:, 1, 1])
        + 2.0 * fx * x * inv_z2 / z * gb0
        + 2.0 * fy * y * inv_z2 / z * gb1)
    grads["position"][idx] = d_pcam @ R_cam

    g3 = np.einsum("nji,njk,nkl->nil", M, g2, M)     # M^T dCov M, (n, 3, 3)
    Rg, dRg = quat_rotmat_jacobian(scene.rotations[idx])
    s2 = scene.scales[idx] ** 2
    # d/d log(s_k) of R diag(s^2) R^T contracted with g3: 2 s_k^2 (Rg^T g3 Rg)_kk
    rtgr = np.einsum("nji,njk,nkl->nil", Rg, g3, Rg)
    grads["scale"][idx] = 2.0 * s2 * np.einsum("nkk->nk", rtgr)
    # d Sigma3 / dq_k = dR_k D R^T + R D dR_k^T; with symmetric g3 this is 2 <g3, dR_k D R^T>
    t_k = np.einsum("nkim,nm,njm->nkij", dRg, s2, Rg)
    grads["rotation"][idx] = 2.0 * np.einsum("nij,nkij->nk", g3, t_k)
    return grads


def model_train_steps(scene: GaussianScene, cameras: list, targets: list, steps: int,
                      state: ModelState, opt: OptimizerConfig, cfg: ScheduleConfig,
                      rng: np.random.Generator) -> list:
    """Run `steps` model-training iterations (round-robin over a seeded shuffle
    of the cameras per epoch) and return the per-step loss trace."""
    if steps < 1:
        raise DomainError("model training needs at least one step")
    trace = []
    extent = scene.extent
    order = []
    for _ in range(steps):
        if not order:
            order = list(rng.permutation(len(cameras)))
        cam_i = order.pop(0)
        camera, target = cameras[cam_i], targets[cam_i]
        splats = cull_and_project(scene, camera)
        if len(splats) == 0:
            trace.append(None)
            continue
        out = backward_splats(splats, target, cfg.model_loss, camera.width, camera.height,
                              cfg.background, needs=("uv", "cov", "opacity", "color"))
        grads = _model_gradients(state, splats, out, camera)
        if all(not np.any(grads[g]) for g in ModelState.GROUPS):
            # Perfect fit from this view; skip the no-op update so the stored
            # parameterization round-trip cannot perturb the scene bits.
            trace.append(out["loss"])
            continue
        lrs = {"position": opt.model.position * extent, "scale": opt.model.scale,
               "rotation": opt.model.rotation, "opacity": opt.model.opacity,
               "color": opt.model.color}
        for group in ModelState.GROUPS:
            attr = state._attr(group)
            updated = adam_step(state.adam[group], getattr(state, attr), grads[group], lrs[group])
            setattr(state, attr, updated)
        state.write_back()
        trace.append(out["loss"])
    return trace


def calibrate(scene: GaussianScene, cameras: list, targets: list, cfg: ScheduleConfig,
              opt: OptimizerConfig | None = None,
              heldout_cameras: list | None = None, heldout_targets: list | None = None,
              ) -> tuple[list, PhaseReport]:
    """The full interleaved loop: per phase, M model-training steps followed by
    fine-tuning every camera; after phase `reparam_after_phase` the (tz, fov)
    triple switches to Hessian-eigenbasis coordinates (per-camera frames) and
    the camera Adam states reset.

    Mutates `scene` (model training) and returns (refined cameras, report).
    """
    if not cameras:
        raise DomainError("need at least one camera")
    if len(cameras) != len(targets):
        raise DomainError("cameras and targets disagree in length")
    opt = opt or OptimizerConfig()
    cameras = list(cameras)
    rng = np.random.default_rng(cfg.seed)
    state = ModelState(scene, opt)
    adams = [opt.new_state(9) for _ in cameras]
    frames: list[ReparamFrame | None] = [None] * len(cameras)
    report = PhaseReport()

    for phase in range(1, cfg.n_phases + 1):
        t0 = time.perf_counter()
        model_trace = model_train_steps(scene, cameras, targets, cfg.model_steps,
                                        state, opt, cfg, rng)
        t1 = time.perf_counter()

        records = []
        for i, (camera, target) in enumerate(zip(cameras, targets)):
            cameras[i], record = camera_phase(scene, camera, target, cfg, opt,
                                              adams[i], frames[i], camera_id=i)
            records.append(record)
        t2 = time.perf_counter()

        parameterization = "abc" if any(f is not None for f in frames) else "raw"
        report.phases.append(PhaseRecord(phase, parameterization, model_trace, records))
        report.timings[f"phase_{phase}"] = {"model_s": t1 - t0, "cameras_s": t2 - t1}

        due = phase == cfg.reparam_after_phase or (
            cfg.reparam_refresh_every > 0 and phase > cfg.reparam_after_phase
            and (phase - cfg.reparam_after_phase) % cfg.reparam_refresh_every == 0)
        if cfg.use_reparam and cfg.train_fov and due and phase < cfg.n_phases:
            for i, camera in enumerate(cameras):
                try:
                    H = estimate_hessian(scene, camera, targets[i], cfg.camera_loss,
                                         eps=(cfg.hessian_eps_z * scene.extent,
                                              cfg.hessian_eps_fov),
                                         bg=cfg.background)
                except EmptyFrustum:
                    continue
                anchor = np.array([camera.t[2], camera.fov_x, camera.fov_y])
                frames[i] = build_frame(H, anchor)
                adams[i] = opt.new_state(9)

    if cfg.refine_heldout and heldout_cameras:
        if heldout_targets is None or len(heldout_targets) != len(heldout_cameras):
            raise DomainError("held-out cameras need matching targets")
        heldout_cameras = list(heldout_cameras)
        for i, (camera, target) in enumerate(zip(heldout_cameras, heldout_targets)):
            heldout_cameras[i], record = camera_phase(scene, camera, target, cfg, opt,
                                                      opt.new_state(9), None, camera_id=i)
            report.heldout.append(record)

    return cameras, report
