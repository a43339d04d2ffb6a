"""Gaussian scene container and deterministic synthetic-scene generators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import Camera, look_at, quat_from_axis_angle, quat_multiply, quat_normalize

LAYOUTS = ("cloud", "grid", "textured_wall")
RIGS = ("orbit", "arc")


@dataclass(frozen=True)
class Gaussian:
    """A single anisotropic gaussian: position, per-axis scale, rotation, opacity, RGB color."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.array(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "scale", np.array(self.scale, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", quat_normalize(np.array(self.rotation, dtype=float).reshape(4)))
        object.__setattr__(self, "color", np.array(self.color, dtype=float).reshape(3))
        if np.any(self.scale <= 0):
            raise DomainError("gaussian scale must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise DomainError("opacity must lie in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise DomainError("color channels must lie in [0, 1]")


@dataclass
class GaussianScene:
    """Array-of-structs gaussian container; rows across the arrays describe one gaussian.

    Immutable by convention outside model-training steps, which require
    exclusive access. `extent` is the bounding-sphere radius around the
    centroid (floored at 1.0 for degenerate single-point scenes so that
    extent-scaled learning rates stay meaningful).
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    extent: float = field(default=0.0)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        if not (len(self.scales) == len(self.rotations) == len(self.opacities) == len(self.colors) == n):
            raise DomainError("scene arrays disagree on gaussian count")
        if self.extent == 0.0:
            self.extent = compute_extent(self.positions)

    def __len__(self) -> int:
        return len(self.positions)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.rotations[i],
                        float(self.opacities[i]), self.colors[i])

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian]) -> "GaussianScene":
        if not gaussians:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                       np.zeros(0), np.zeros((0, 3)), extent=1.0)
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.positions.copy(), self.scales.copy(), self.rotations.copy(),
                             self.opacities.copy(), self.colors.copy(), extent=self.extent)


def compute_extent(positions: np.ndarray) -> float:
    """Bounding-sphere radius around the centroid, floored at 1.0 when degenerate."""
    if len(positions) == 0:
        return 1.0
    centroid = positions.mean(axis=0)
    r = float(np.max(np.linalg.norm(positions - centroid, axis=1)))
    return r if r > 1e-12 else 1.0


def merge_scenes(a: GaussianScene, b: GaussianScene) -> GaussianScene:
    """Concatenate two scenes and recompute the extent."""
    return GaussianScene(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.scales, b.scales]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.opacities, b.opacities]),
        np.concatenate([a.colors, b.colors]),
    )


def _normalize_positions(positions: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the bounding sphere to radius 1."""
    positions = positions - positions.mean(axis=0)
    r = np.max(np.linalg.norm(positions, axis=1))
    if r > 1e-12:
        positions = positions / r
    return positions


def _random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def synth_scene(seed: int, n: int, layout: str = "cloud") -> GaussianScene:
    """Deterministic synthetic scene with `n` gaussians inside the unit sphere.

    Layouts: `cloud` (random blob), `grid` (regular lattice), `textured_wall`
    (flat plane with a high-frequency color pattern, so that depth/fov
    entanglement produces a measurable loss landscape). Opacities lie in
    [0.3, 1.0] and anisotropy ratios stay at or below 10.
    """
    if layout not in LAYOUTS:
        raise DomainError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if n < 1:
        raise DomainError("scene needs at least one gaussian")
    rng = np.random.default_rng(seed)

    if layout == "grid":
        if n == 1:
            return GaussianScene(
                np.zeros((1, 3)),
                np.full((1, 3), 0.05),
                np.array([[1.0, 0.0, 0.0, 0.0]]),
                np.ones(1),
                np.full((1, 3), 0.8),
                extent=1.0,
            )
        m = max(2, math.ceil(n ** (1.0 / 3.0)))
        axis = np.linspace(-1.0, 1.0, m)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)[:n]
        positions = _normalize_positions(positions)
        spacing = 2.0 / (m - 1)
        scales = np.full((n, 3), 0.35 * spacing)
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        colors = 0.15 + 0.7 * rng.random((n, 3))
    elif layout == "cloud":
        # Uniform in the unit ball: direction * radius with r ~ U^(1/3).
        direction = rng.normal(size=(n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.random(n) ** (1.0 / 3.0)
        positions = _normalize_positions(direction * radius[:, None])
        base = 0.012 + 0.018 * rng.random(n)
        aniso = 1.0 + 2.0 * rng.random((n, 3))  # ratio max/min <= 3 < 10
        scales = base[:, None] * aniso
        rotations = _random_rotations(rng, n)
        colors = rng.random((n, 3))
    else:  # textured_wall
        m = max(2, math.ceil(math.sqrt(n)))
        axis = np.linspace(-1.0, 1.0, m)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        flat = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
        spacing = 2.0 / (m - 1)
        flat = flat + rng.uniform(-0.2, 0.2, size=flat.shape) * spacing
        positions = np.column_stack([flat, np.zeros(n)])
        positions = _normalize_positions(positions)
        # Flat pancakes facing +z; in-plane sigma covers the lattice spacing.
        s_plane = 0.38 * spacing * (0.8 + 0.4 * rng.random(n))
        scales = np.column_stack([s_plane, s_plane, np.maximum(s_plane / 10.0, 1e-4)])
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        # High-frequency checker/sinusoid mix keyed off the plane coordinates.
        u, v = positions[:, 0], positions[:, 1]
        checker = ((np.floor(u * 6) + np.floor(v * 6)) % 2.0)
        colors = np.column_stack([
            0.5 + 0.45 * np.sin(11.0 * u) * np.cos(7.0 * v),
            0.15 + 0.7 * checker,
            0.5 + 0.45 * np.sin(9.0 * v + 3.0 * u),
        ])
        colors = np.clip(colors + rng.uniform(-0.08, 0.08, size=(n, 3)), 0.0, 1.0)

    opacities = 0.3 + 0.7 * rng.random(n)
    return GaussianScene(positions, scales, rotations, opacities, np.clip(colors, 0.0, 1.0))


def synth_cameras(seed: int, k: int, scene: GaussianScene, rig: str = "orbit",
                  width: int = 128, height: int = 128, fov: float = math.radians(60.0)) -> list[Camera]:
    """Deterministic camera rig looking at the scene centroid.

    `orbit`: evenly spaced ring in the z=0 plane (adjacent angular separation
    exactly 2*pi/k). `arc`: a cone on the +z side (for wall scenes that must
    be seen face-on). Distances lie in [2, 4] scene extents.
    """
    if rig not in RIGS:
        raise DomainError(f"unknown rig {rig!r}; expected one of {RIGS}")
    if k < 1:
        raise DomainError("need at least one camera")
    rng = np.random.default_rng(seed)
    centroid = scene.positions.mean(axis=0) if len(scene) else np.zeros(3)
    distance = float(rng.uniform(2.0, 4.0)) * scene.extent
    phase = float(rng.uniform(0.0, 2.0 * math.pi))

    golden = math.pi * (3.0 - math.sqrt(5.0))
    cameras = []
    for i in range(k):
        if rig == "orbit":
            theta = phase + 2.0 * math.pi * i / k
            offset = distance * np.array([math.cos(theta), math.sin(theta), 0.0])
            up = np.array([0.0, 0.0, 1.0])
        else:
            # Golden-angle azimuths with polar angles spread over [15, 70] deg:
            # oblique views give the wall depth parallax and triangulate the cloud.
            theta = phase + golden * i
            polar = math.radians(15.0 + 55.0 * (i + 0.5) / k)
            offset = distance * np.array([
                math.sin(polar) * math.cos(theta),
                math.sin(polar) * math.sin(theta),
                math.cos(polar),
            ])
            up = np.array([0.0, 1.0, 0.0])
        q, t = look_at(centroid + offset, centroid, up=up)
        cameras.append(Camera(t=t, q=q, fov_x=fov, fov_y=fov,
                              cx=width / 2.0, cy=height / 2.0, width=width, height=height))
    return cameras


def perturb_camera(camera: Camera, seed: int, dt: float = 0.0, dtheta: float = 0.0,
                   dfov: float = 0.0) -> Camera:
    """Randomly perturb a camera: translation uniform in a ball of radius `dt`,
    rotation about a uniform axis by an angle uniform in [0, dtheta], and both
    fovs multiplied by a single (1 + u) with u uniform in [-dfov, dfov].
    """
    if dt < 0 or dtheta < 0 or dfov < 0:
        raise DomainError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = dt * rng.random() ** (1.0 / 3.0)
    t = camera.t + radius * direction if dt > 0 else camera.t.copy()

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = dtheta * rng.random()
    if angle > 0:
        q = quat_normalize(quat_multiply(quat_from_axis_angle(axis, angle), camera.q))
    else:
        q = camera.q.copy()

    u = rng.uniform(-dfov, dfov) if dfov > 0 else 0.0
    return camera.replace(t=t, q=q, fov_x=camera.fov_x * (1.0 + u), fov_y=camera.fov_y * (1.0 + u))
