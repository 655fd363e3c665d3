"""Deterministic z-buffered triangle rasterizer.

Produces per-pixel texture coordinates, a binary coverage mask, depth,
flat-shaded normals and triangle indices.  Geometry is not differentiated:
shape inputs are sampled, not trained, so gradients only ever flow through
texture sampling and compositing downstream of this module.

Conventions:
  * camera on the +z axis looking toward -z; depth = -z_cam, smaller is closer
  * pixel centers at (ix + 0.5, iy + 0.5), y growing downward
  * winding: outward triangles facing the camera have negative signed area
    in pixel coordinates; back-face culling drops area >= 0
  * ties on edges resolved with a top-left fill rule; depth ties go to the
    lowest triangle index
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .checkpoint import _Reader
from .errors import BadMagicError, FileFormatError, ValidationError
from .morphable import MorphableModel

MAGIC = b"FFRO"
VERSION = 1

SENTINEL_TRI = -1


@dataclass(frozen=True)
class Pose:
    """Yaw/pitch in degrees; yaw about the vertical axis, then pitch."""

    yaw: float
    pitch: float

    def __post_init__(self):
        if not (-180.0 <= self.yaw <= 180.0 and -90.0 <= self.pitch <= 90.0):
            raise ValidationError(
                f"pose out of range: yaw={self.yaw}, pitch={self.pitch}"
            )


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: uniform scale plus principal point."""

    scale: float  # pixels per model unit
    cx: float
    cy: float
    near: float = -1e9
    far: float = 1e9

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError(f"camera scale must be positive, got {self.scale}")
        if not self.near < self.far:
            raise ValidationError(f"camera near ({self.near}) must be < far ({self.far})")

    @classmethod
    def fit(cls, resolution: int, subject_radius: float, fill: float = 0.85) -> "Camera":
        scale = fill * (resolution / 2.0) / subject_radius
        return cls(scale=scale, cx=resolution / 2.0, cy=resolution / 2.0)


@dataclass
class RasterOutput:
    uv: np.ndarray  # (H, W, 2) in [0, 1]; zero where uncovered
    mask: np.ndarray  # (H, W) uint8, exactly {0, 1}
    depth: np.ndarray  # (H, W); zero where uncovered
    normals: np.ndarray  # (H, W, 3) unit camera-space normals; zero where uncovered
    tri_index: np.ndarray  # (H, W) int32; -1 where uncovered

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mask.shape


def rotation_matrix(pose: Pose) -> np.ndarray:
    yaw = np.deg2rad(pose.yaw)
    pitch = np.deg2rad(pose.pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return r_pitch @ r_yaw


def pose_transform(
    vertices: np.ndarray, pose: Pose, camera: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate and project to screen space.

    Returns (screen, cam): screen is (n, 3) rows of (x_px, y_px, depth),
    cam is the rotated camera-space vertices (used for flat normals).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    cam = vertices @ rotation_matrix(pose).T
    screen = np.empty_like(cam)
    screen[:, 0] = camera.cx + camera.scale * cam[:, 0]
    screen[:, 1] = camera.cy - camera.scale * cam[:, 1]
    screen[:, 2] = -cam[:, 2]
    return screen, cam


@numba.njit(cache=True)
def _raster_kernel(
    tri_ids, corners, depths, uvs, normals, near, far,
    zbuf, mask, out_uv, out_depth, out_norm, out_tri,
):  # pragma: no cover - exercised via rasterize()
    h, w = mask.shape
    n_tri = tri_ids.shape[0]
    for t in range(n_tri):
        ax, ay = corners[t, 0, 0], corners[t, 0, 1]
        bx, by = corners[t, 1, 0], corners[t, 1, 1]
        cx, cy = corners[t, 2, 0], corners[t, 2, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        minx = min(ax, min(bx, cx))
        maxx = max(ax, max(bx, cx))
        miny = min(ay, min(by, cy))
        maxy = max(ay, max(by, cy))
        x0 = max(0, int(np.ceil(minx - 0.5)))
        x1 = min(w - 1, int(np.floor(maxx - 0.5)))
        y0 = max(0, int(np.ceil(miny - 0.5)))
        y1 = min(h - 1, int(np.floor(maxy - 0.5)))
        # edge vectors for the top-left tie rule
        e0x, e0y = cx - bx, cy - by
        e1x, e1y = ax - cx, ay - cy
        e2x, e2y = bx - ax, by - ay
        tl0 = (e0y == 0.0 and e0x > 0.0) or e0y < 0.0
        tl1 = (e1y == 0.0 and e1x > 0.0) or e1y < 0.0
        tl2 = (e2y == 0.0 and e2x > 0.0) or e2y < 0.0
        for iy in range(y0, y1 + 1):
            py = iy + 0.5
            for ix in range(x0, x1 + 1):
                px = ix + 0.5
                w0 = e0x * (py - by) - e0y * (px - bx)
                w1 = e1x * (py - cy) - e1y * (px - cx)
                w2 = e2x * (py - ay) - e2y * (px - ax)
                ok0 = w0 > 0.0 or (w0 == 0.0 and tl0)
                ok1 = w1 > 0.0 or (w1 == 0.0 and tl1)
                ok2 = w2 > 0.0 or (w2 == 0.0 and tl2)
                if not (ok0 and ok1 and ok2):
                    continue
                b0 = w0 / area2
                b1 = w1 / area2
                b2 = w2 / area2
                d = b0 * depths[t, 0] + b1 * depths[t, 1] + b2 * depths[t, 2]
                if d < near or d > far:
                    continue
                if d < zbuf[iy, ix]:
                    zbuf[iy, ix] = d
                    mask[iy, ix] = 1
                    out_depth[iy, ix] = d
                    out_tri[iy, ix] = tri_ids[t]
                    for q in range(2):
                        out_uv[iy, ix, q] = (
                            b0 * uvs[t, 0, q] + b1 * uvs[t, 1, q] + b2 * uvs[t, 2, q]
                        )
                    for q in range(3):
                        out_norm[iy, ix, q] = normals[t, q]


def _prepare_triangles(model, screen, cam):
    """Screen-space per-triangle data for front-facing triangles.

    Front faces have negative pixel-space area (outward winding plus the
    screen y flip); they are reordered to positive area so the kernel's
    inside test and fill rule apply uniformly.
    """
    tris = model.triangles
    p = screen[tris][:, :, :2]  # (T, 3, 2)
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    keep = area2 < 0.0
    idx = np.nonzero(keep)[0]
    corners = p[idx][:, [0, 2, 1], :]
    depths = screen[tris[idx]][:, [0, 2, 1], 2]
    uvs = model.texcoords[idx][:, [0, 2, 1], :]
    v = cam[tris[idx]]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    n /= norms
    n[n[:, 2] < 0] *= -1.0  # flat normals face the camera
    return idx.astype(np.int32), corners, depths, uvs, n


def rasterize(
    model: MorphableModel,
    vertices: np.ndarray,
    pose: Pose,
    camera: Camera,
    resolution: tuple[int, int],
) -> RasterOutput:
    """Render per-pixel UVs, coverage, depth, normals and triangle ids."""
    h, w = resolution
    screen, cam = pose_transform(vertices, pose, camera)
    tri_ids, corners, depths, uvs, normals = _prepare_triangles(model, screen, cam)

    zbuf = np.full((h, w), np.inf)
    mask = np.zeros((h, w), np.uint8)
    out_uv = np.zeros((h, w, 2))
    out_depth = np.zeros((h, w))
    out_norm = np.zeros((h, w, 3))
    out_tri = np.full((h, w), SENTINEL_TRI, np.int32)
    if tri_ids.size:
        _raster_kernel(
            tri_ids,
            np.ascontiguousarray(corners),
            np.ascontiguousarray(depths),
            np.ascontiguousarray(uvs),
            np.ascontiguousarray(normals),
            camera.near,
            camera.far,
            zbuf,
            mask,
            out_uv,
            out_depth,
            out_norm,
            out_tri,
        )
    return RasterOutput(
        uv=out_uv, mask=mask, depth=out_depth, normals=out_norm, tri_index=out_tri
    )


# ---------------------------------------------------------------------------
# debug dump


def save_raster(raster: RasterOutput, path) -> None:
    """Dump all channels as a float32 binary for offline inspection."""
    h, w = raster.mask.shape
    chunks = [
        MAGIC,
        struct.pack("<3I", VERSION, h, w),
        np.ascontiguousarray(raster.uv, dtype="<f4").tobytes(),
        np.ascontiguousarray(raster.mask, dtype="<f4").tobytes(),
        np.ascontiguousarray(raster.depth, dtype="<f4").tobytes(),
        np.ascontiguousarray(raster.normals, dtype="<f4").tobytes(),
        np.ascontiguousarray(raster.tri_index, dtype="<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(chunks))


def load_raster(path) -> RasterOutput:
    rd = _Reader(Path(path).read_bytes(), str(path))
    if rd.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a raster dump (bad magic)")
    version, h, w = struct.unpack("<3I", rd.take(12))
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported raster dump version {version}")

    def f32(count, shape):
        return np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)

    uv = f32(h * w * 2, (h, w, 2))
    mask = f32(h * w, (h, w)).astype(np.uint8)
    depth = f32(h * w, (h, w))
    normals = f32(h * w * 3, (h, w, 3))
    tri = f32(h * w, (h, w)).astype(np.int32)
    return RasterOutput(uv=uv, mask=mask, depth=depth, normals=normals, tri_index=tri)


def save_debug_pngs(raster: RasterOutput, prefix) -> None:
    """Write mask and UV visualisations next to `prefix`."""
    from PIL import Image

    prefix = Path(prefix)
    Image.fromarray(raster.mask * 255, mode="L").save(prefix.with_suffix(".mask.png"))
    uv_img = np.zeros(raster.uv.shape[:2] + (3,), np.uint8)
    uv_img[:, :, 0] = np.round(raster.uv[:, :, 0] * 255).astype(np.uint8)
    uv_img[:, :, 1] = np.round(raster.uv[:, :, 1] * 255).astype(np.uint8)
    Image.fromarray(uv_img, mode="RGB").save(prefix.with_suffix(".uv.png"))
