"""Dataset plumbing: manifests, the procedural toy dataset, pose statistics.

The toy dataset stands in for a posed face photo collection: each image is
the toy head carrying a procedurally painted texture (per-identity base
color, smooth low-frequency mottling, eye/mouth decals at canonical chart
positions) rendered over a flat-noise background at a uniformly sampled
pose, with the exact pose recorded in the manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError
from .imageio import encode_png
from .morphable import MorphableModel, sample_shape_expression
from .projection import sample_texture_array
from .rasterize import Pose, rasterize
from .synthesis import identity_stream, scene_camera

YAW_LIMIT = 180.0
PITCH_LIMIT = 90.0

DEFAULT_YAW_RANGE = (-90.0, 90.0)
DEFAULT_PITCH_RANGE = (-45.0, 45.0)


@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    yaw: float
    pitch: float


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)


def ingest_manifest(path) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest of {path, yaw, pitch}."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            try:
                img_path = root / str(obj["path"])
                yaw = float(obj["yaw"])
                pitch = float(obj["pitch"])
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(
                    f"{path}: line {lineno}: expected path/yaw/pitch fields ({e})"
                ) from e
            if not (math.isfinite(yaw) and math.isfinite(pitch)):
                raise ManifestError(f"{path}: line {lineno}: non-finite pose")
            if abs(yaw) > YAW_LIMIT or abs(pitch) > PITCH_LIMIT:
                raise ManifestError(
                    f"{path}: line {lineno}: pose out of range (yaw={yaw}, pitch={pitch})"
                )
            if not img_path.exists():
                raise ManifestError(
                    f"{path}: line {lineno}: image does not exist: {img_path}"
                )
            records.append(ManifestRecord(path=img_path, yaw=yaw, pitch=pitch))
    if not records:
        raise ConfigError(f"empty manifest: {path}")
    return DatasetManifest(root=root, records=records)


def write_manifest(path, records: list[dict]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# procedural toy textures


def _upsample_smooth(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly stretch a coarse (g, g, c) grid to (size, size, c)."""
    g = grid.shape[0]
    pos = np.linspace(0.0, g - 1.0, size)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, g - 1)
    t = pos - lo
    rows = grid[lo] * (1 - t)[:, None, None] + grid[hi] * t[:, None, None]
    out = (
        rows[:, lo] * (1 - t)[None, :, None] + rows[:, hi] * t[None, :, None]
    )
    return out


def _disk(tex: np.ndarray, center_uv, radius_uv, color) -> None:
    size = tex.shape[0]
    cy = center_uv[1] * size
    cx = center_uv[0] * size
    ry = radius_uv[1] * size
    rx = radius_uv[0] * size
    yy, xx = np.mgrid[0:size, 0:size]
    inside = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
    tex[inside] = color


def paint_toy_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Identity texture: base tone + smooth mottling + eye/mouth decals.

    Returns (size, size, 3) in [-1, 1].  The face front sits at the chart
    center, so decals live at fixed offsets from (0.5, 0.5).
    """
    r = rng.uniform(0.45, 0.9)
    g = r * rng.uniform(0.55, 0.85)
    b = g * rng.uniform(0.55, 0.9)
    base = np.array([r, g, b])
    coarse = rng.standard_normal((8, 8, 3)) * 0.06
    tex = base[None, None, :] + _upsample_smooth(coarse, size)
    eye = np.array([0.08, 0.07, 0.06])
    mouth = np.array([0.45, 0.15, 0.15])
    _disk(tex, (0.5 - 0.055, 0.45), (0.020, 0.012), eye)
    _disk(tex, (0.5 + 0.055, 0.45), (0.020, 0.012), eye)
    _disk(tex, (0.5, 0.57), (0.040, 0.016), mouth)
    return np.clip(tex * 2.0 - 1.0, -1.0, 1.0)


def render_toy_face(
    model: MorphableModel,
    texture: np.ndarray,
    beta: np.ndarray,
    psi: np.ndarray,
    pose: Pose,
    resolution: int,
    background: np.ndarray,
):
    """Render one painted-texture face over a background; plain numpy."""
    from .morphable import instance_shape

    camera = scene_camera(model, resolution)
    verts = instance_shape(model, beta, psi)
    raster = rasterize(model, verts, pose, camera, (resolution, resolution))
    face = sample_texture_array(texture, raster)
    k = raster.mask.astype(texture.dtype)[:, :, None]
    img = background * (1.0 - k) + face * k
    return img, raster


def make_toy_dataset(
    model: MorphableModel,
    n_images: int,
    out_dir,
    resolution: int = 64,
    seed: int = 0,
    yaw_range=DEFAULT_YAW_RANGE,
    pitch_range=DEFAULT_PITCH_RANGE,
) -> Path:
    """Fabricate a posed toy dataset; returns the manifest path.

    Deterministic in `seed`: each image draws from its own counter-based
    stream, so the output is identical no matter how work is ordered.
    """
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tex_size = 2 * resolution
    records = []
    for i in range(n_images):
        rng = identity_stream(seed, i, 0)
        texture = paint_toy_texture(rng, tex_size).astype(np.float32)
        beta, psi = sample_shape_expression(rng, model.n_shape, model.n_expression)
        yaw = rng.uniform(*yaw_range)
        pitch = rng.uniform(*pitch_range)
        bg_base = rng.uniform(-0.6, 0.6, size=3).astype(np.float32)
        speckle = rng.uniform(-0.12, 0.12, size=(resolution, resolution, 3))
        background = np.clip(bg_base[None, None, :] + speckle, -1, 1).astype(np.float32)
        img, _ = render_toy_face(
            model, texture, beta, psi, Pose(yaw, pitch), resolution, background
        )
        name = f"img_{i:05d}.png"
        encode_png(img.transpose(2, 0, 1), out_dir / name)
        records.append({"path": name, "yaw": yaw, "pitch": pitch})
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return manifest_path


# ---------------------------------------------------------------------------
# pose statistics


def pose_stats(manifest: DatasetManifest, bin_width: float = 5.0) -> str:
    """Yaw/pitch histograms as CSV text with normalised frequencies."""
    if not manifest.records:
        raise ConfigError("empty manifest")
    lo, hi = -180.0, 180.0
    n_bins = int(round((hi - lo) / bin_width))
    edges = np.linspace(lo, hi, n_bins + 1)
    yaws = np.array([r.yaw for r in manifest.records])
    pitches = np.array([r.pitch for r in manifest.records])
    hy, _ = np.histogram(yaws, bins=edges)
    hp, _ = np.histogram(pitches, bins=edges)
    fy = hy / hy.sum()
    fp = hp / hp.sum()
    lines = ["bin_low,bin_high,yaw_freq,pitch_freq"]
    for i in range(n_bins):
        lines.append(
            f"{edges[i]:.1f},{edges[i + 1]:.1f},{fy[i]:.9f},{fp[i]:.9f}"
        )
    return "\n".join(lines) + "\n"
