"""Forward splatting rasterizer, photometric losses, and PSNR.

Images are float64 arrays of shape (height, width, 3) with channels in [0, 1].
Pixel (r, c) has its center at continuous coordinates (u, v) = (c + 0.5, r + 0.5).

Compositing is evaluated on a flat list of (splat, pixel) instances sorted by
(pixel, depth rank); transmittance chains become segmented cumulative products,
so renders and backward passes are single numpy passes with no per-pixel loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .geometry import (LAMBDA_LP, Z_NEAR, Camera, build_covariance, project_covariance,
                       project_point, world_to_camera)
from .scene import GaussianScene

# 3DGS compositing conventions.
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4
PSNR_CAP = 99.0

LOSS_KINDS = ("l1", "l2")


@dataclass
class SplatList:
    """Visible gaussians projected to one camera, sorted by (depth, source index).

    uv: (N, 2) pixel means; cov: (N, 2, 2) projected covariances (all invertible,
    det > 0); inv_cov: (N, 2, 2); depth: (N,) camera-space z; opacity: (N,);
    color: (N, 3); index: (N,) row into the source scene.
    """

    uv: np.ndarray
    cov: np.ndarray
    inv_cov: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.uv)


def _inv2x2(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverses and determinants of a stack of 2x2 symmetric matrices."""
    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov)
    inv[:, 0, 0] = c
    inv[:, 1, 1] = a
    inv[:, 0, 1] = -b
    inv[:, 1, 0] = -b
    safe = np.where(det > 0, det, 1.0)
    return inv / safe[:, None, None], det


def _ellipse_hits_rect(uv: np.ndarray, inv_cov: np.ndarray, width: int, height: int,
                       q_max: float = 9.0) -> np.ndarray:
    """Exact test: does the {q <= q_max} ellipse intersect the rect [0,W]x[0,H]?

    Minimizes the quadratic form over the rectangle with the active-set cases
    (interior / four edges, corners covered by clamping) and compares to q_max.
    """
    u, v = uv[:, 0], uv[:, 1]
    a = inv_cov[:, 0, 0]
    b = inv_cov[:, 0, 1]
    c = inv_cov[:, 1, 1]
    inside = (u >= 0) & (u <= width) & (v >= 0) & (v <= height)

    def q_at(x, y):
        dx, dy = x - u, y - v
        return a * dx * dx + 2 * b * dx * dy + c * dy * dy

    best = np.full(len(uv), np.inf)
    for x_edge in (0.0, float(width)):
        y_star = np.clip(v - b * (x_edge - u) / c, 0.0, float(height))
        best = np.minimum(best, q_at(x_edge, y_star))
    for y_edge in (0.0, float(height)):
        x_star = np.clip(u - b * (y_edge - v) / a, 0.0, float(width))
        best = np.minimum(best, q_at(x_star, y_edge))
    return inside | (best <= q_max)


def cull_and_project(scene: GaussianScene, camera: Camera,
                     lam_lp: float = LAMBDA_LP, z_near: float = Z_NEAR) -> SplatList:
    """Project all gaussians and keep those in front of the near plane whose
    3-sigma ellipse intersects the image rectangle, sorted front to back."""
    n = len(scene)
    if n == 0:
        empty = np.zeros((0,))
        return SplatList(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 2, 2)),
                         empty, empty, np.zeros((0, 3)), np.zeros(0, dtype=int))
    p_cam = world_to_camera(scene.positions, camera)
    front = p_cam[:, 2] > z_near
    idx = np.nonzero(front)[0]
    p_cam = p_cam[idx]

    uv = project_point(p_cam, camera, z_near=z_near)
    cov3 = build_covariance(scene.scales[idx], scene.rotations[idx])
    cov2 = project_covariance(cov3, camera, p_cam, lam_lp=lam_lp, z_near=z_near)
    inv_cov, det = _inv2x2(cov2)
    ok = det > 0
    ok[ok] = _ellipse_hits_rect(uv[ok], inv_cov[ok], camera.width, camera.height)

    idx, uv, cov2, inv_cov = idx[ok], uv[ok], cov2[ok], inv_cov[ok]
    depth = p_cam[ok, 2]
    order = np.lexsort((idx, depth))
    idx = idx[order]
    return SplatList(uv[order], cov2[order], inv_cov[order], depth[order],
                     scene.opacities[idx].copy(), scene.colors[idx].copy(), idx)


@dataclass
class Instances:
    """Flat (splat, pixel) pairs covering each splat's alpha support, sorted by
    (pixel id, splat rank), plus the evaluated alpha stage and transmittance
    chain for this splat configuration. `splat` indexes the SplatList.
    """

    splat: np.ndarray
    pix: np.ndarray
    row: np.ndarray
    col: np.ndarray
    seg_start: np.ndarray   # bool, True at the first instance of each pixel run
    seg_idx: np.ndarray     # pixel-run ordinal per instance
    alpha: np.ndarray       # clamped at ALPHA_MAX, zeroed below ALPHA_MIN
    g: np.ndarray           # unclamped gaussian falloff
    dx: np.ndarray
    dy: np.ndarray
    t_before: np.ndarray    # transmittance in front of each instance
    contrib: np.ndarray     # applied before the per-pixel early-out
    t_final: np.ndarray     # (n_pix,) final transmittance per pixel

    def __len__(self) -> int:
        return len(self.splat)


def _empty_instances(n_pix: int) -> Instances:
    z = np.zeros(0, dtype=np.int64)
    f = np.zeros(0)
    return Instances(z, z, z, z, np.zeros(0, dtype=bool), z, f, f, f, f, f,
                     np.zeros(0, dtype=bool), np.ones(n_pix))


def _expand_instances(splats: SplatList, width: int, height: int) -> Instances:
    """Enumerate every (splat, pixel) pair where alpha can reach ALPHA_MIN.

    The support of o * exp(-q/2) >= ALPHA_MIN is the ellipse q <= rho^2 with
    rho^2 = 2 ln(o / ALPHA_MIN); pixels are enumerated row by row over the
    exact ellipse slice, so every instance skipped here would have been
    dropped by the skip threshold anyway.
    """
    n = len(splats)
    n_pix = width * height
    rho2 = 2.0 * np.log(np.maximum(splats.opacity / ALPHA_MIN, 1.0))
    u, v = splats.uv[:, 0], splats.uv[:, 1]
    sy = np.sqrt(splats.cov[:, 1, 1] * rho2)
    r0 = np.clip(np.ceil(v - sy - 0.5).astype(np.int64), 0, height)
    r1 = np.clip(np.floor(v + sy - 0.5).astype(np.int64) + 1, 0, height)
    heights = np.maximum(r1 - r0, 0)
    n_pairs = int(heights.sum())
    if n_pairs == 0:
        return _empty_instances(n_pix)

    # Stage 1: (splat, row) pairs with the exact column span of the ellipse slice.
    pair_splat = np.repeat(np.arange(n), heights)
    pair_row = r0[pair_splat] + (np.arange(n_pairs) - np.repeat(np.cumsum(heights) - heights, heights))
    pair_dy = (pair_row + 0.5) - v[pair_splat]
    a = splats.inv_cov[pair_splat, 0, 0]
    b = splats.inv_cov[pair_splat, 0, 1]
    det = splats.inv_cov[:, 0, 0] * splats.inv_cov[:, 1, 1] - splats.inv_cov[:, 0, 1] ** 2
    disc = np.maximum(a * rho2[pair_splat] - det[pair_splat] * pair_dy * pair_dy, 0.0)
    half = np.sqrt(disc) / a
    mid = u[pair_splat] - b * pair_dy / a
    lo = np.clip(np.ceil(mid - half - 0.5).astype(np.int64), 0, width)
    hi = np.clip(np.floor(mid + half - 0.5).astype(np.int64) + 1, 0, width)
    counts = np.maximum(hi - lo, 0)
    total = int(counts.sum())
    if total == 0:
        return _empty_instances(n_pix)

    # Stage 2: pairs to pixels.
    pair_id = np.repeat(np.arange(n_pairs), counts)
    col = lo[pair_id] + (np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts))
    row = pair_row[pair_id]
    splat = pair_splat[pair_id]
    key_dtype = np.uint16 if width * height < 65536 else np.int32
    pix = (row * width + col).astype(key_dtype)
    order = np.argsort(pix, kind="stable")  # stable keeps splat rank order per pixel
    splat, pix, row, col = splat[order], pix[order], row[order], col[order]
    seg_start = np.empty(total, dtype=bool)
    seg_start[0] = True
    seg_start[1:] = pix[1:] != pix[:-1]
    seg_idx = np.cumsum(seg_start) - 1

    # Alpha stage at this splat configuration.
    dx = (col + 0.5) - splats.uv[splat, 0]
    dy = (row + 0.5) - splats.uv[splat, 1]
    ai = splats.inv_cov[splat, 0, 0]
    bi = splats.inv_cov[splat, 0, 1]
    ci = splats.inv_cov[splat, 1, 1]
    g = np.exp(-0.5 * (ai * dx * dx + 2.0 * bi * dx * dy + ci * dy * dy))
    raw = splats.opacity[splat] * g
    alpha = np.where(raw >= ALPHA_MIN, np.minimum(raw, ALPHA_MAX), 0.0)

    # Segmented front-to-back transmittance chain; the splat that would push T
    # below T_EPS is itself refused (3DGS convention) and ends its pixel.
    log1m = np.log1p(-alpha)            # alpha <= ALPHA_MAX keeps 1 - alpha >= 0.01
    cl = np.cumsum(log1m)
    ex = cl - log1m
    t_before = np.exp(ex - ex[seg_start][seg_idx])
    contrib = t_before * (1.0 - alpha) >= T_EPS   # prefix: the product is nonincreasing
    t_final = np.exp(np.bincount(pix, weights=np.where(contrib, log1m, 0.0), minlength=n_pix))
    return Instances(splat, pix, row, col, seg_start, seg_idx, alpha, g, dx, dy,
                     t_before, contrib, t_final)


def rasterize(splats: SplatList, width: int, height: int,
              bg: np.ndarray | tuple = (0.0, 0.0, 0.0),
              inst: Instances | None = None) -> np.ndarray:
    """Alpha-composite sorted splats front to back over a constant background."""
    bg = np.asarray(bg, dtype=float).reshape(3)
    n_pix = width * height
    if len(splats) == 0:
        return np.clip(np.tile(bg, (height, width, 1)), 0.0, 1.0)
    if inst is None:
        inst = _expand_instances(splats, width, height)
    flat = np.zeros((n_pix, 3))
    if len(inst):
        w = inst.alpha * inst.t_before * inst.contrib
        colors = splats.color[inst.splat]
        for ch in range(3):
            flat[:, ch] = np.bincount(inst.pix, weights=w * colors[:, ch], minlength=n_pix)
    flat += inst.t_final[:, None] * bg
    return np.clip(flat.reshape(height, width, 3), 0.0, 1.0)


def loss(image: np.ndarray, target: np.ndarray, kind: str = "l2") -> float:
    """Mean absolute (l1) or mean squared (l2) error over all pixel channels."""
    _check_kind(kind)
    _check_dims(image, target)
    delta = image - target
    if kind == "l1":
        return float(np.mean(np.abs(delta)))
    return float(np.mean(delta * delta))


def loss_grad_image(image: np.ndarray, target: np.ndarray, kind: str = "l2") -> np.ndarray:
    """d(loss)/d(pixel channel); L1 uses the subgradient sign with sign(0) = 0."""
    _check_kind(kind)
    _check_dims(image, target)
    n = image.size
    delta = image - target
    if kind == "l1":
        return np.sign(delta) / n
    return 2.0 * delta / n


def psnr(image: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-peak images, capped at 99 dB."""
    mse = loss(image, target, "l2")
    if mse < 1e-12:
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def _check_kind(kind: str):
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")


def _check_dims(image: np.ndarray, target: np.ndarray):
    if image.shape != target.shape:
        raise DimensionMismatch(f"image shapes differ: {image.shape} vs {target.shape}")


def backward_splats(splats: SplatList, target: np.ndarray, kind: str, width: int, height: int,
                    bg: np.ndarray | tuple = (0.0, 0.0, 0.0),
                    needs: tuple = ("uv",), image: np.ndarray | None = None,
                    inst: Instances | None = None) -> dict:
    """Gradients of the photometric loss w.r.t. per-splat quantities.

    Differentiates the exact compositing chain with the splat set, sort order,
    clamp/skip/termination pattern, and 2D covariances of the forward pass held
    fixed. `needs` selects among "uv", "opacity", "color", "cov". The returned
    dict always carries the forward "image" and scalar "loss". Callers that
    already rasterized exactly these splats may pass `image` to skip the
    internal forward pass.
    """
    bg = np.asarray(bg, dtype=float).reshape(3)
    if inst is None and len(splats):
        inst = _expand_instances(splats, width, height)
    if image is None:
        image = rasterize(splats, width, height, bg, inst=inst)
    out = {"image": image, "loss": loss(image, target, kind)}
    n = len(splats)
    if "uv" in needs:
        out["duv"] = np.zeros((n, 2))
    if "opacity" in needs:
        out["dopacity"] = np.zeros(n)
    if "color" in needs:
        out["dcolor"] = np.zeros((n, 3))
    if "cov" in needs:
        out["dcov"] = np.zeros((n, 2, 2))
    if n == 0 or len(inst) == 0:
        return out

    alpha, g, dx, dy = inst.alpha, inst.g, inst.dx, inst.dy
    t_before, contrib = inst.t_before, inst.contrib
    w = alpha * t_before * contrib
    ids = inst.splat
    n_pix = width * height

    grad_flat = loss_grad_image(image, target, kind).reshape(n_pix, 3)
    gpix = grad_flat[inst.pix]                                # (A, 3)
    a1 = np.einsum("ij,ij->i", splats.color[ids], gpix)       # grad . color per instance

    if "color" in needs:
        for ch in range(3):
            out["dcolor"][:, ch] = np.bincount(ids, weights=w * gpix[:, ch], minlength=n)

    # dL/dalpha_i = T_i (grad.c_i) - (grad . [everything composited behind i]) / (1 - alpha_i)
    s = a1 * w
    cs = np.cumsum(s)
    cum_incl = cs - (cs - s)[inst.seg_start][inst.seg_idx]
    seg_total = np.bincount(inst.pix, weights=s, minlength=n_pix)
    gbg = grad_flat @ bg
    suffix = (seg_total[inst.pix] - cum_incl) + inst.t_final[inst.pix] * gbg[inst.pix]
    dalpha = np.where(contrib, t_before * a1 - suffix / (1.0 - alpha), 0.0)

    # The clamped branch of min(ALPHA_MAX, o*g) and skipped entries carry no gradient.
    live_mask = contrib & (alpha > 0.0) & (splats.opacity[ids] * g < ALPHA_MAX)
    live = np.where(live_mask, dalpha, 0.0)

    if "opacity" in needs:
        out["dopacity"][:] = np.bincount(ids, weights=live * g, minlength=n)
    if "uv" in needs:
        # d(alpha)/d(uv) = alpha * inv_cov @ (pixel - uv)
        a = splats.inv_cov[ids, 0, 0]
        b = splats.inv_cov[ids, 0, 1]
        c = splats.inv_cov[ids, 1, 1]
        factor = live * alpha
        out["duv"][:, 0] = np.bincount(ids, weights=factor * (a * dx + b * dy), minlength=n)
        out["duv"][:, 1] = np.bincount(ids, weights=factor * (b * dx + c * dy), minlength=n)
    if "cov" in needs:
        # dL/d(inv_cov) = -alpha/2 * d d^T, then chain through the matrix inverse.
        factor = -0.5 * live * alpha
        m = np.empty((n, 2, 2))
        m[:, 0, 0] = np.bincount(ids, weights=factor * dx * dx, minlength=n)
        m[:, 0, 1] = np.bincount(ids, weights=factor * dx * dy, minlength=n)
        m[:, 1, 0] = m[:, 0, 1]
        m[:, 1, 1] = np.bincount(ids, weights=factor * dy * dy, minlength=n)
        out["dcov"][:] = -splats.inv_cov @ m @ splats.inv_cov
    return out


def backward_duv(splats: SplatList, image: np.ndarray, target: np.ndarray,
                 kind: str = "l2", bg: np.ndarray | tuple = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Exact dL/duv per splat for an image rendered from these splats."""
    _check_dims(image, target)
    height, width = image.shape[:2]
    return backward_splats(splats, target, kind, width, height, bg,
                           needs=("uv",), image=image)["duv"]
