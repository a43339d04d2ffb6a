"""Command-line interface: synth | render | perturb | calibrate | eval | hessian.

Every command is deterministic given its config (all seeds explicit); the
effective config is echoed into the output directory so a run is reproducible
from its outputs alone. Exit codes: 0 success, 2 config/validation error,
3 I/O error, 4 numerical failure (no usable camera).
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .config import RunConfig
from .errors import CameraIdMismatch, DomainError, SplatCalError
from .geometry import quat_geodesic_angle, world_to_camera
from .renderer import cull_and_project, psnr, rasterize
from .reparam import build_frame, estimate_hessian
from .scene import merge_scenes, perturb_camera, synth_cameras, synth_scene
from .schedule import calibrate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

LOCK_NAME = ".splatcal.lock"


class OutputLock:
    """One process per output directory; stale locks abort with exit code 3."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.path.open("x").close()
        except FileExistsError:
            raise OSError(f"output directory is locked by {self.path} "
                          f"(remove it if no other run is active)")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(Path(args.config).read_text())
    overrides = list(getattr(args, "set", None) or [])
    # Dedicated flags mirror the ablation arms of the calibration experiment.
    if getattr(args, "no_reparam", False):
        overrides.append("use_reparam=false")
    if getattr(args, "no_fov", False):
        overrides.append("train_fov=false")
    if getattr(args, "camera_loss", None):
        overrides.append(f"camera_loss={args.camera_loss}")
    if getattr(args, "phases", None) is not None:
        overrides.append(f"n_phases={args.phases}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.apply_overrides(overrides)


def _echo_config(cfg: RunConfig, out_dir: Path):
    (out_dir / "effective_config.json").write_text(cfg.to_json())


def _resolve_path(args, cfg: RunConfig, flag: str, field: str) -> Path:
    """CLI flag wins; falls back to the config's path field."""
    value = getattr(args, flag, None) or getattr(cfg, field)
    if not value:
        raise DomainError(f"--{flag} not given and config {field!r} is empty")
    return Path(value)


def _load_calibration(cameras_path: str, images_path: str) -> dict:
    recon = sio.parse_colmap_text(Path(cameras_path).read_text(),
                                  Path(images_path).read_text())
    return sio.reconstruction_to_cameras(recon)


def _write_calibration(cameras: dict, out_dir: Path, names: dict | None = None):
    recon = sio.cameras_to_reconstruction(cameras, names)
    cam_text, img_text = sio.write_colmap_text(recon)
    (out_dir / "cameras.txt").write_text(cam_text)
    (out_dir / "images.txt").write_text(img_text)


def _target_name(image_id: int) -> str:
    return f"target_{image_id:04d}.pfm"


def _synth_fixture(cfg: RunConfig):
    """Scene + ground-truth cameras from the config (layouts may be combined
    with '+', e.g. 'textured_wall+cloud' splits the budget evenly)."""
    layouts = cfg.synth_layout.split("+")
    per = cfg.synth_gaussians // len(layouts)
    counts = [per] * len(layouts)
    counts[0] += cfg.synth_gaussians - per * len(layouts)
    scene = None
    for j, (layout, count) in enumerate(zip(layouts, counts)):
        part = synth_scene(cfg.seed + j, count, layout)
        scene = part if scene is None else merge_scenes(scene, part)
    cameras = synth_cameras(cfg.seed + 100, cfg.synth_camera_count, scene, cfg.synth_rig,
                            width=cfg.width, height=cfg.height, fov=cfg.fov_radians())
    return scene, {i + 1: c for i, c in enumerate(cameras)}


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_path(args, cfg, "out", "output_path")
    with OutputLock(out_dir):
        _echo_config(cfg, out_dir)
        scene, cameras = _synth_fixture(cfg)
        (out_dir / "scene.ply").write_bytes(sio.write_ply_gaussians(scene))
        names = {i: _target_name(i) for i in cameras}
        _write_calibration(cameras, out_dir, names)
        # Render targets from the round-tripped files, not the in-memory fixture,
        # so re-rendering from the written tree reproduces them bit-exactly.
        scene = sio.read_ply_gaussians((out_dir / "scene.ply").read_bytes())
        cameras = _load_calibration(out_dir / "cameras.txt", out_dir / "images.txt")
        tdir = out_dir / "targets"
        tdir.mkdir(exist_ok=True)
        for i, cam in sorted(cameras.items()):
            image = rasterize(cull_and_project(scene, cam), cam.width, cam.height,
                              cfg.background)
            (tdir / names[i]).write_bytes(sio.write_image(image, "pfm"))
            if args.ppm:
                (tdir / names[i].replace(".pfm", ".ppm")).write_bytes(
                    sio.write_image(image, "ppm"))
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_path(args, cfg, "out", "output_path")
    scene = sio.read_ply_gaussians(_resolve_path(args, cfg, "scene", "scene_path").read_bytes())
    cameras = _load_calibration(_resolve_path(args, cfg, "cameras", "cameras_path"),
                                _resolve_path(args, cfg, "images", "images_path"))
    with OutputLock(out_dir):
        _echo_config(cfg, out_dir)
        for i, cam in sorted(cameras.items()):
            image = rasterize(cull_and_project(scene, cam), cam.width, cam.height,
                              cfg.background)
            name = f"render_{i:04d}.{args.format}"
            (out_dir / name).write_bytes(sio.write_image(image, args.format))
    return EXIT_OK


def cmd_perturb(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_path(args, cfg, "out", "output_path")
    cameras_path = _resolve_path(args, cfg, "cameras", "cameras_path")
    images_path = _resolve_path(args, cfg, "images", "images_path")
    cameras = _load_calibration(cameras_path, images_path)
    recon_in = sio.parse_colmap_text(cameras_path.read_text(), images_path.read_text())
    names = {i: im.name for i, im in recon_in.images.items()}
    with OutputLock(out_dir):
        _echo_config(cfg, out_dir)
        sidecar = {"seed": cfg.seed, "dt": cfg.perturb_dt, "dtheta_deg": cfg.perturb_dtheta_deg,
                   "dfov": cfg.perturb_dfov, "cameras": {}}
        perturbed = {}
        for i, cam in sorted(cameras.items()):
            new = perturb_camera(cam, cfg.seed + i, dt=cfg.perturb_dt,
                                 dtheta=math.radians(cfg.perturb_dtheta_deg),
                                 dfov=cfg.perturb_dfov)
            perturbed[i] = new
            sidecar["cameras"][str(i)] = {
                "dt_vec": (new.t - cam.t).tolist(),
                "rotation_deg": math.degrees(quat_geodesic_angle(new.q, cam.q)),
                "fov_factor": new.fov_x / cam.fov_x,
            }
        _write_calibration(perturbed, out_dir, names)
        (out_dir / "ground_truth.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_path(args, cfg, "out", "output_path")
    scene = sio.read_ply_gaussians(_resolve_path(args, cfg, "scene", "scene_path").read_bytes())
    cameras_path = _resolve_path(args, cfg, "cameras", "cameras_path")
    images_path = _resolve_path(args, cfg, "images", "images_path")
    cameras = _load_calibration(cameras_path, images_path)
    recon_in = sio.parse_colmap_text(cameras_path.read_text(), images_path.read_text())
    names = {i: im.name for i, im in recon_in.images.items()}
    targets_dir = _resolve_path(args, cfg, "targets", "targets_path")
    ids = sorted(cameras)
    targets = []
    for i in ids:
        path = targets_dir / names[i]
        if not path.exists():
            path = targets_dir / _target_name(i)
        targets.append(sio.read_image(path.read_bytes()))

    with OutputLock(out_dir):
        _echo_config(cfg, out_dir)
        cam_list = [cameras[i] for i in ids]
        refined, report = calibrate(scene, cam_list, targets, cfg.schedule(), cfg.optimizer())
        refined_map = dict(zip(ids, refined))
        _write_calibration(refined_map, out_dir, names)
        (out_dir / "scene_refined.ply").write_bytes(sio.write_ply_gaussians(scene))
        (out_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        buf = _stdio.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["phase", "camera_id", "step", "psnr", "score"])
        for row in report.trace_rows():
            writer.writerow([row[0], row[1], row[2], "%.17g" % row[3], "%.17g" % row[4]])
        (out_dir / "trace.csv").write_text(buf.getvalue())
        (out_dir / "run_meta.json").write_text(
            json.dumps({"timings_s": report.timings}, indent=2, sort_keys=True) + "\n")
        skipped = sum(1 for p in report.phases for c in p.cameras if c.skipped)
        total = sum(len(p.cameras) for p in report.phases)
    if total and skipped == total:
        logger.error("every camera was skipped (empty frustum)")
        return EXIT_NUMERIC
    return EXIT_OK


def _pose_errors(cams_a: dict, cams_b: dict) -> dict:
    common = sorted(set(cams_a) & set(cams_b))
    if set(cams_a) != set(cams_b):
        raise CameraIdMismatch(f"calibrations disagree on ids "
                               f"({sorted(set(cams_a) ^ set(cams_b))})")
    out = {}
    for i in common:
        a, b = cams_a[i], cams_b[i]
        out[str(i)] = {
            "translation": float(np.linalg.norm(a.t - b.t)),
            "rotation_deg": math.degrees(quat_geodesic_angle(a.q, b.q)),
            "fov_rel": 0.5 * (abs(a.fov_x - b.fov_x) / b.fov_x
                              + abs(a.fov_y - b.fov_y) / b.fov_y),
        }
    return out


def displacement_histogram(scene, cams_a: dict, cams_b: dict,
                           bin_width: float = 0.1) -> tuple[np.ndarray, np.ndarray, dict]:
    """Analytic reprojection displacements between two calibrations.

    Projects every gaussian center through both calibrations (camera by
    camera), keeps centers in front of both and inside camera A's image, and
    histograms the pixel displacement norms in `bin_width` bins.
    """
    from .geometry import project_point
    all_disp = []
    per_camera = {}
    for i in sorted(set(cams_a) & set(cams_b)):
        a, b = cams_a[i], cams_b[i]
        pa = world_to_camera(scene.positions, a)
        pb = world_to_camera(scene.positions, b)
        ok = (pa[:, 2] > 0.01) & (pb[:, 2] > 0.01)
        uva = project_point(pa[ok], a, z_near=0.0)
        uvb = project_point(pb[ok], b, z_near=0.0)
        inside = ((uva[:, 0] >= 0) & (uva[:, 0] <= a.width)
                  & (uva[:, 1] >= 0) & (uva[:, 1] <= a.height))
        disp = np.linalg.norm(uva[inside] - uvb[inside], axis=1)
        all_disp.append(disp)
        per_camera[str(i)] = float(np.median(disp)) if len(disp) else 0.0
    disp = np.concatenate(all_disp) if all_disp else np.zeros(0)
    if len(disp):
        n_bins = int(np.floor(disp.max() / bin_width)) + 1
        counts, edges = np.histogram(disp, bins=n_bins,
                                     range=(0.0, n_bins * bin_width))
    else:
        counts, edges = np.zeros(1, dtype=int), np.array([0.0, bin_width])
    return counts, edges, per_camera


def cmd_eval(args) -> int:
    cams_a = _load_calibration(args.cameras_a, args.images_a)
    cams_b = _load_calibration(args.cameras_b, args.images_b)
    out_dir = Path(args.out)
    metrics = {"pose_errors": _pose_errors(cams_a, cams_b)}
    if args.ground_truth:
        metrics["ground_truth"] = json.loads(Path(args.ground_truth).read_text())

    with OutputLock(out_dir):
        if args.scene:
            scene = sio.read_ply_gaussians(Path(args.scene).read_bytes())
            counts, edges, per_cam = displacement_histogram(scene, cams_a, cams_b)
            metrics["median_displacement_px"] = per_cam
            buf = _stdio.StringIO()
            writer = csv.writer(buf)
            writer.writerow(["bin_lo_px", "bin_hi_px", "count"])
            for k, count in enumerate(counts):
                writer.writerow(["%.1f" % edges[k], "%.1f" % edges[k + 1], int(count)])
            (out_dir / "displacement_histogram.csv").write_text(buf.getvalue())
            psnrs = {}
            for i in sorted(cams_a):
                a, b = cams_a[i], cams_b[i]
                im_a = rasterize(cull_and_project(scene, a), a.width, a.height)
                im_b = rasterize(cull_and_project(scene, b), b.width, b.height)
                psnrs[str(i)] = psnr(im_a, im_b)
            metrics["render_psnr_a_vs_b"] = psnrs
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_hessian(args) -> int:
    cfg = _load_config(args)
    scene = sio.read_ply_gaussians(_resolve_path(args, cfg, "scene", "scene_path").read_bytes())
    cameras_path = _resolve_path(args, cfg, "cameras", "cameras_path")
    images_path = _resolve_path(args, cfg, "images", "images_path")
    cameras = _load_calibration(cameras_path, images_path)
    if args.image_id not in cameras:
        raise CameraIdMismatch(f"image id {args.image_id} not in calibration")
    cam = cameras[args.image_id]
    recon_in = sio.parse_colmap_text(cameras_path.read_text(), images_path.read_text())
    name = recon_in.images[args.image_id].name
    path = _resolve_path(args, cfg, "targets", "targets_path") / name
    if not path.exists():
        path = Path(args.targets) / _target_name(args.image_id)
    target = sio.read_image(path.read_bytes())

    H = estimate_hessian(scene, cam, target, cfg.camera_loss,
                         eps=(cfg.hessian_eps_z * scene.extent, cfg.hessian_eps_fov),
                         bg=cfg.background)
    frame = build_frame(H, np.array([cam.t[2], cam.fov_x, cam.fov_y]))
    lines = ["hessian over (tz, fov_x, fov_y):"]
    for r in range(3):
        lines.append("  " + "  ".join("% .9e" % H[r, k] for k in range(3)))
    lines.append("eigenvalues: " + "  ".join("% .9e" % v for v in frame.eigenvalues))
    lines.append("eigenbasis (columns):")
    for r in range(3):
        lines.append("  " + "  ".join("% .9f" % frame.basis[r, k] for k in range(3)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatcal",
                                     description="Camera calibration refinement on a "
                                                 "gaussian-splat renderer")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth", help="generate a synthetic scene, cameras, and targets")
    common(p)
    p.add_argument("--out")
    p.add_argument("--ppm", action="store_true", help="also write 8-bit previews")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render a calibration against a scene")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--cameras")
    p.add_argument("--images")
    p.add_argument("--out")
    p.add_argument("--format", choices=("pfm", "ppm"), default="pfm")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("perturb", help="perturb a calibration, recording ground truth")
    common(p)
    p.add_argument("--cameras")
    p.add_argument("--images")
    p.add_argument("--out")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("calibrate", help="refine a calibration against target images")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--cameras")
    p.add_argument("--images")
    p.add_argument("--targets")
    p.add_argument("--out")
    p.add_argument("--no-reparam", action="store_true",
                   help="ablation: keep raw (tz, fov) parameters")
    p.add_argument("--no-fov", action="store_true",
                   help="ablation: freeze fov (implies --no-reparam)")
    p.add_argument("--camera-loss", choices=("l1", "l2"),
                   help="ablation: camera-phase loss")
    p.add_argument("--phases", type=int, help="ablation: number of phases")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="compare two calibrations")
    p.add_argument("--cameras-a", required=True)
    p.add_argument("--images-a", required=True)
    p.add_argument("--cameras-b", required=True)
    p.add_argument("--images-b", required=True)
    p.add_argument("--ground-truth", help="sidecar JSON from perturb")
    p.add_argument("--scene", help="PLY scene for displacement histogram and PSNR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hessian", help="dump the (tz, fov) Hessian of one camera")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--cameras")
    p.add_argument("--images")
    p.add_argument("--targets")
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_hessian)
    return parser


def main(argv: list | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DomainError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, SplatCalError) as exc:
        if isinstance(exc, OSError):
            logger.error("I/O error: %s", exc)
            return EXIT_IO
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
