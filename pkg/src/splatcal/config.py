"""Run configuration: one JSON document drives every CLI command.

Every field has a default; unknown keys are an error so typos cannot silently
fall back to defaults. The effective (post-default) config is echoed into the
output directory of each run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

from .errors import DomainError
from .optim import CameraRates, ModelRates, OptimizerConfig
from .schedule import ScheduleConfig


@dataclass
class RunConfig:
    """Schedule, optimizer, fixture, and perturbation settings for one run."""

    # Schedule (see ScheduleConfig).
    model_steps: int = 3000
    min_steps: int = 100
    max_steps: int = 1000
    threshold: float = 0.0002
    n_phases: int = 5
    camera_loss: str = "l2"
    model_loss: str = "l1"
    reparam_after_phase: int = 1
    reparam_refresh_every: int = 0
    ema_beta: float = 1.0 / 50.0
    use_reparam: bool = True
    train_fov: bool = True
    keep_best: bool = False
    refine_heldout: bool = False
    psnr_stride: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    hessian_eps_z: float = 1e-3
    hessian_eps_fov: float = 1e-4

    # Adam.
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_translation: float = 1e-3   # times scene extent
    lr_quaternion: float = 1e-4
    lr_fov: float = 1e-4
    lr_abc: float = 1e-3
    lr_position: float = 1.6e-4    # times scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3

    # Synthetic fixtures.
    seed: int = 0
    synth_gaussians: int = 1000
    synth_layout: str = "cloud"
    synth_camera_count: int = 8
    synth_rig: str = "orbit"
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0

    # Perturbation magnitudes (translation in absolute scene units; synthetic
    # fixtures are normalized to extent 1, where 0.01 means 1% of the extent).
    perturb_dt: float = 0.01
    perturb_dtheta_deg: float = 0.5
    perturb_dfov: float = 0.01

    # Default file locations; the matching CLI flags override these.
    scene_path: str = ""
    cameras_path: str = ""
    images_path: str = ""
    targets_path: str = ""
    output_path: str = ""

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            model_steps=self.model_steps, min_steps=self.min_steps, max_steps=self.max_steps,
            threshold=self.threshold, n_phases=self.n_phases, camera_loss=self.camera_loss,
            model_loss=self.model_loss, reparam_after_phase=self.reparam_after_phase,
            reparam_refresh_every=self.reparam_refresh_every,
            ema_beta=self.ema_beta, use_reparam=self.use_reparam, train_fov=self.train_fov,
            keep_best=self.keep_best, refine_heldout=self.refine_heldout, seed=self.seed,
            psnr_stride=self.psnr_stride, background=tuple(self.background),
            hessian_eps_z=self.hessian_eps_z, hessian_eps_fov=self.hessian_eps_fov)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            beta1=self.adam_beta1, beta2=self.adam_beta2, eps=self.adam_eps,
            camera=CameraRates(self.lr_translation, self.lr_quaternion, self.lr_fov, self.lr_abc),
            model=ModelRates(self.lr_position, self.lr_scale, self.lr_rotation,
                             self.lr_opacity, self.lr_color))

    def fov_radians(self) -> float:
        return math.radians(self.fov_deg)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["background"] = list(self.background)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - cls.field_names()
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "background" in kwargs:
            kwargs["background"] = tuple(float(x) for x in kwargs["background"])
        cfg = cls(**kwargs)
        cfg.schedule()  # validates the schedule fields
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DomainError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise DomainError("config JSON must be an object")
        return cls.from_dict(data)

    def apply_overrides(self, pairs: list) -> "RunConfig":
        """Apply `key=value` strings on top of this config (values parsed as JSON
        when possible, else kept as strings)."""
        data = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise DomainError(f"override {pair!r} is not key=value")
            key, _, value = pair.partition("=")
            key = key.strip()
            if key not in self.field_names():
                raise DomainError(f"unknown config key {key!r}")
            try:
                data[key] = json.loads(value)
            except json.JSONDecodeError:
                data[key] = value
        return RunConfig.from_dict(data)
