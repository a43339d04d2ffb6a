"""Persistence: COLMAP text calibration, binary PLY gaussian scenes, PPM/PFM images.

All writers are deterministic (sorted ids, fixed float formatting) so repeated
runs produce byte-identical files; all parsers fail loudly with positional
diagnostics rather than silently truncating.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (DanglingCameraRef, DomainError, ImageFormatError, MissingProperty,
                     ParseError, PlyHeaderError, UnsupportedCameraModel)
from .geometry import Camera, focal_to_fov, fov_to_focal
from .scene import GaussianScene

logger = logging.getLogger(__name__)

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")

# Float formatting for text calibration files: 17 significant digits round-trips
# IEEE doubles exactly.
FMT = "%.17g"


@dataclass
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class ColmapImage:
    image_id: int
    q: np.ndarray     # (w, x, y, z), world-to-camera
    t: np.ndarray
    camera_id: int
    name: str


@dataclass
class ColmapReconstruction:
    """COLMAP sparse calibration: intrinsics per camera id, pose per image id."""

    cameras: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)


def parse_colmap_text(cameras_text: str, images_text: str) -> ColmapReconstruction:
    """Parse COLMAP cameras.txt / images.txt (PINHOLE and SIMPLE_PINHOLE only).

    POINTS2D lines of images.txt are skipped; every image must reference an
    existing camera id.
    """
    recon = ColmapReconstruction()
    for lineno, line in enumerate(cameras_text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            camera_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad camera line: {exc}", lineno) from exc
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError("PINHOLE expects 4 params (fx fy cx cy)", lineno)
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError("SIMPLE_PINHOLE expects 3 params (f cx cy)", lineno)
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            raise UnsupportedCameraModel(f"camera model {model!r} not supported "
                                         f"(line {lineno}); use PINHOLE or SIMPLE_PINHOLE")
        recon.cameras[camera_id] = ColmapCamera(camera_id, model, width, height, fx, fy, cx, cy)

    expect_pose = True
    for lineno, line in enumerate(images_text.splitlines(), start=1):
        stripped = line.strip()
        if not expect_pose:
            expect_pose = True          # POINTS2D line (possibly empty): skipped
            continue
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) < 10:
            raise ParseError("image line needs id, q(4), t(3), camera id, name", lineno)
        try:
            image_id = int(parts[0])
            q = np.array([float(p) for p in parts[1:5]])
            t = np.array([float(p) for p in parts[5:8]])
            camera_id = int(parts[8])
        except ValueError as exc:
            raise ParseError(f"bad image line: {exc}", lineno) from exc
        name = " ".join(parts[9:])
        if camera_id not in recon.cameras:
            raise DanglingCameraRef(f"image {image_id} references missing camera {camera_id} "
                                    f"(line {lineno})")
        recon.images[image_id] = ColmapImage(image_id, q, t, camera_id, name)
        expect_pose = False
    return recon


def write_colmap_text(recon: ColmapReconstruction) -> tuple[str, str]:
    """Serialize a reconstruction to (cameras.txt, images.txt) content."""
    cam_lines = ["# Camera list with one line of data per camera:",
                 "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cid in sorted(recon.cameras):
        c = recon.cameras[cid]
        if c.model == "SIMPLE_PINHOLE":
            params = (FMT % c.fx, FMT % c.cx, FMT % c.cy)
        else:
            params = (FMT % c.fx, FMT % c.fy, FMT % c.cx, FMT % c.cy)
        cam_lines.append(f"{c.camera_id} {c.model} {c.width} {c.height} " + " ".join(params))

    img_lines = ["# Image list with two lines of data per image:",
                 "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
                 "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for iid in sorted(recon.images):
        im = recon.images[iid]
        vals = " ".join(FMT % x for x in (*im.q, *im.t))
        img_lines.append(f"{im.image_id} {vals} {im.camera_id} {im.name}")
        img_lines.append("")
    return "\n".join(cam_lines) + "\n", "\n".join(img_lines) + "\n"


def reconstruction_to_cameras(recon: ColmapReconstruction) -> dict:
    """Image id -> Camera, converting focals to full field-of-view angles."""
    out = {}
    for iid in sorted(recon.images):
        im = recon.images[iid]
        c = recon.cameras[im.camera_id]
        out[iid] = Camera(t=im.t, q=im.q,
                          fov_x=focal_to_fov(c.fx, c.width),
                          fov_y=focal_to_fov(c.fy, c.height),
                          cx=c.cx, cy=c.cy, width=c.width, height=c.height)
    return out


def cameras_to_reconstruction(cameras: dict, names: dict | None = None) -> ColmapReconstruction:
    """Image id -> Camera into a reconstruction with one PINHOLE entry per image."""
    recon = ColmapReconstruction()
    for iid in sorted(cameras):
        cam = cameras[iid]
        recon.cameras[iid] = ColmapCamera(iid, "PINHOLE", cam.width, cam.height,
                                          fov_to_focal(cam.fov_x, cam.width),
                                          fov_to_focal(cam.fov_y, cam.height),
                                          cam.cx, cam.cy)
        name = names[iid] if names else f"image_{iid:04d}.png"
        recon.images[iid] = ColmapImage(iid, cam.q.copy(), cam.t.copy(), iid, name)
    return recon


# PLY property layout mirroring public 3DGS checkpoints: positions, log-scales,
# quaternion, logit-opacity, DC color.
PLY_PROPS = ("x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
             "f_dc_0", "f_dc_1", "f_dc_2")


def write_ply_gaussians(scene: GaussianScene) -> bytes:
    """Binary little-endian PLY with log-scales and logit-opacities (float32)."""
    if np.any(scene.scales <= 0):
        raise DomainError("cannot store non-positive scales as log")
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PLY_PROPS]
    header.append("end_header")

    with np.errstate(divide="ignore"):  # opacity exactly 0 or 1 stores +-inf logit
        logit = np.log(scene.opacities) - np.log1p(-scene.opacities)
    data = np.empty((n, len(PLY_PROPS)), dtype="<f4")
    data[:, 0:3] = scene.positions
    data[:, 3:6] = np.log(scene.scales)
    data[:, 6:10] = scene.rotations
    data[:, 10] = logit
    data[:, 11:14] = scene.colors
    return ("\n".join(header) + "\n").encode("ascii") + data.tobytes()


def read_ply_gaussians(data: bytes) -> GaussianScene:
    """Parse a binary little-endian PLY written by write_ply_gaussians (or a
    public 3DGS checkpoint; f_rest_* spherical-harmonic residuals are ignored
    with a warning)."""
    end = data.find(b"end_header")
    if end < 0:
        raise PlyHeaderError("no end_header")
    header_bytes = data[:end]
    try:
        lines = header_bytes.decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise PlyHeaderError(f"non-ascii header: {exc}") from exc
    if not lines or lines[0].strip() != "ply":
        raise PlyHeaderError("missing 'ply' magic")

    n = None
    props = []
    fmt = None
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                n = int(parts[2])
            elif int(parts[2]) != 0:
                raise PlyHeaderError(f"unsupported non-empty element {parts[1]!r}")
        elif parts[0] == "property":
            if parts[1] != "float":
                raise PlyHeaderError(f"property {parts[-1]!r} must be float32, got {parts[1]!r}")
            props.append(parts[2])
    if fmt != "binary_little_endian":
        raise PlyHeaderError(f"format must be binary_little_endian, got {fmt!r}")
    if n is None:
        raise PlyHeaderError("no vertex element")

    ignored = [p for p in props if p.startswith("f_rest_")]
    if ignored:
        logger.warning("ignoring %d spherical-harmonic residual properties", len(ignored))
    for required in PLY_PROPS:
        if required not in props:
            raise MissingProperty(required)

    body = data[end + len(b"end_header"):]
    newline = body.find(b"\n")
    if newline < 0:
        raise PlyHeaderError("no newline after end_header")
    body = body[newline + 1:]
    count = n * len(props)
    raw = np.frombuffer(body[:4 * count], dtype="<f4")
    if len(raw) != count:
        raise PlyHeaderError(f"body too short: expected {count} floats, got {len(raw)}")
    table = raw.reshape(n, len(props)).astype(float)
    col = {p: table[:, i] for i, p in enumerate(props)}

    positions = np.stack([col["x"], col["y"], col["z"]], axis=1)
    scales = np.exp(np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1))
    rotations = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    opacities = 1.0 / (1.0 + np.exp(-col["opacity"]))
    colors = np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1)
    return GaussianScene(positions, scales, rotations, opacities, np.clip(colors, 0.0, 1.0))


def write_image(image: np.ndarray, fmt: str = "pfm") -> bytes:
    """Encode an image as PFM (float32, bit-exact) or PPM P6 (8-bit export)."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DomainError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if fmt == "pfm":
        header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
        # PFM stores scanlines bottom to top.
        return header + image[::-1].astype("<f4").tobytes()
    if fmt == "ppm":
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        return header + quantized.tobytes()
    raise DomainError(f"unknown image format {fmt!r}")


def read_image(data: bytes) -> np.ndarray:
    """Decode a PFM or PPM P6 image to float64 (H, W, 3)."""
    if data[:2] == b"PF":
        return _read_pfm(data)
    if data[:2] == b"P6":
        return _read_ppm(data)
    raise ImageFormatError(f"unknown magic {data[:2]!r}", 0)


def _read_tokens(data: bytes, count: int, start: int) -> tuple[list, int]:
    """Read whitespace-separated header tokens; returns (tokens, next offset)."""
    tokens = []
    pos = start
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated header", pos)
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if pos >= len(data):
        raise ImageFormatError("missing header terminator", pos)
    return tokens, pos + 1  # single whitespace terminates the header


def _read_pfm(data: bytes) -> np.ndarray:
    tokens, offset = _read_tokens(data, 4, 0)
    if tokens[0] != b"PF":
        raise ImageFormatError("not a color PFM", 0)
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"bad PFM header: {exc}", offset) from exc
    count = w * h * 3
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[offset:offset + 4 * count]
    if len(body) != 4 * count:
        raise ImageFormatError(f"expected {count} floats, got {len(body) // 4}", offset)
    return np.frombuffer(body, dtype=dtype).reshape(h, w, 3)[::-1].astype(float)


def _read_ppm(data: bytes) -> np.ndarray:
    tokens, offset = _read_tokens(data, 4, 0)
    if tokens[0] != b"P6":
        raise ImageFormatError("not a P6 PPM", 0)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"bad PPM header: {exc}", offset) from exc
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}", offset)
    count = w * h * 3
    raw = np.frombuffer(data[offset:offset + count], dtype=np.uint8)
    if len(raw) != count:
        raise ImageFormatError(f"expected {count} bytes, got {len(raw)}", offset)
    return raw.reshape(h, w, 3).astype(float) / 255.0
