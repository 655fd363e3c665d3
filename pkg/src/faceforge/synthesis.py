"""Synthetic-identity dataset generation from a trained checkpoint.

Each identity fixes (z_texture, beta) once; every image of that identity
redraws background latent, expression, pose and lighting.  Per-image
counter-based random streams keep the output byte-identical regardless of
evaluation order, so generation could be parallelised without changing a
single pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imageio import center_crop, encode_png
from .lighting import apply_lighting, sample_light_coeffs, shading_map
from .morphable import MorphableModel, instance_shape
from .networks import GanModel
from .projection import composite, texture_sample
from .rasterize import Camera, Pose, RasterOutput, rasterize

DEFAULT_YAW_RANGE = (-90.0, 90.0)
DEFAULT_PITCH_RANGE = (-45.0, 45.0)

AMBIENT_ONLY = np.array([1.0, 0, 0, 0, 0, 0, 0, 0, 0])


def scene_camera(model: MorphableModel, resolution: int, fill: float = 0.8) -> Camera:
    """The camera every pipeline stage shares: head centered, mostly filling."""
    return Camera.fit(resolution, model.radius, fill=fill)


def identity_stream(seed: int, ident: int, image: int) -> np.random.Generator:
    """Counter-based stream for (identity, image); splittable and stable."""
    key = np.array([np.uint64(seed), (np.uint64(ident) << np.uint64(32)) | np.uint64(image)])
    return np.random.default_rng(np.random.Philox(key=key))


@dataclass
class SynthesisConfig:
    num_identities: int
    images_per_identity: int = 120
    yaw_range: tuple[float, float] = DEFAULT_YAW_RANGE
    pitch_range: tuple[float, float] = DEFAULT_PITCH_RANGE
    resolution: int = 64
    crop: int = 56
    lighting: bool = True
    seed: int = 0
    export_textures: bool = False

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_identity < 1:
            raise ConfigError("identity and image counts must be positive")
        if self.crop > self.resolution:
            raise ConfigError(
                f"crop {self.crop} exceeds output resolution {self.resolution}"
            )
        if not (-180 <= self.yaw_range[0] <= self.yaw_range[1] <= 180):
            raise ConfigError(f"bad yaw range {self.yaw_range}")
        if not (-90 <= self.pitch_range[0] <= self.pitch_range[1] <= 90):
            raise ConfigError(f"bad pitch range {self.pitch_range}")


@dataclass
class SynthesisResult:
    manifest_path: Path
    image_count: int
    identity_dirs: list[Path] = field(default_factory=list)


def _draw_image_params(rng, cfg: SynthesisConfig, net_cfg):
    z_b = rng.standard_normal(net_cfg.n_background)
    psi = rng.standard_normal(net_cfg.n_expression)
    yaw = rng.uniform(*cfg.yaw_range)
    pitch = rng.uniform(*cfg.pitch_range)
    sh = sample_light_coeffs(rng)
    return z_b, psi, yaw, pitch, sh


def synthesize_dataset(
    gan: GanModel,
    model: MorphableModel,
    cfg: SynthesisConfig,
    out_dir,
) -> SynthesisResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net_cfg = gan.cfg
    if cfg.resolution != net_cfg.image_res:
        raise ConfigError(
            f"requested resolution {cfg.resolution} but the checkpoint renders "
            f"{net_cfg.image_res}"
        )
    camera = scene_camera(model, cfg.resolution)
    manifest_path = out_dir / "identities.jsonl"
    id_dirs = []
    count = 0
    with manifest_path.open("w") as mf:
        for ident in range(cfg.num_identities):
            id_rng = identity_stream(cfg.seed, ident, 0)
            z_t = id_rng.standard_normal(net_cfg.n_texture)
            beta = id_rng.standard_normal(net_cfg.n_shape)
            id_dir = out_dir / f"id_{ident:05d}"
            id_dir.mkdir(exist_ok=True)
            id_dirs.append(id_dir)
            texture = gan.texture_generator.forward(z_t[None], beta[None])
            tex_np = texture.data  # (1, 2H, 2W, 3)
            if cfg.export_textures:
                encode_png(tex_np[0].transpose(2, 0, 1), id_dir / "texture.png")
            for j in range(cfg.images_per_identity):
                rng = identity_stream(cfg.seed, ident, j + 1)
                z_b, psi, yaw, pitch, sh = _draw_image_params(rng, cfg, net_cfg)
                img, raster = _render_one(
                    gan, model, camera, cfg.resolution,
                    tex_np, z_t, z_b, beta, psi, Pose(yaw, pitch),
                )
                applied = sh if cfg.lighting else AMBIENT_ONLY
                if cfg.lighting:
                    img = apply_lighting(img, shading_map(raster, sh))
                img = center_crop(img, cfg.crop)
                name = f"img_{j:03d}.png"
                encode_png(img, id_dir / name)
                rec = {
                    "id": ident,
                    "img": j,
                    "path": f"{id_dir.name}/{name}",
                    "yaw": yaw,
                    "pitch": pitch,
                    "z_T": [float(v) for v in z_t],
                    "z_B": [float(v) for v in z_b],
                    "beta": [float(v) for v in beta],
                    "psi": [float(v) for v in psi],
                    "sh": [float(v) for v in applied],
                }
                mf.write(json.dumps(rec) + "\n")
                count += 1
    return SynthesisResult(
        manifest_path=manifest_path, image_count=count, identity_dirs=id_dirs
    )


def _render_one(
    gan, model, camera, resolution, tex_np, z_t, z_b, beta, psi, pose
) -> tuple[np.ndarray, RasterOutput]:
    """One composed image as (3, H, W) float; no gradients involved."""
    verts = instance_shape(model, beta, psi)
    raster = rasterize(model, verts, pose, camera, (resolution, resolution))
    from .autodiff import Tensor

    face = texture_sample(Tensor(tex_np), [raster])
    background = gan.background_generator.forward(
        z_b[None], z_t[None], beta[None], psi[None],
        np.array([[pose.yaw, pose.pitch]]),
    )
    img = composite(background, face, raster.mask[None])
    return img.data[0].transpose(2, 0, 1), raster


def render_single(
    gan: GanModel,
    model: MorphableModel,
    pose: Pose,
    seed: int = 0,
    latents: dict | None = None,
    lighting_coeffs: np.ndarray | None = None,
) -> tuple[np.ndarray, RasterOutput, np.ndarray]:
    """One-off render from explicit or seeded latents.

    Returns (image (3, H, W), raster, texture (3, 2H, 2W)).  `latents` may
    pin any of z_T / z_B / beta / psi; the rest are drawn from `seed`.
    """
    net_cfg = gan.cfg
    rng = identity_stream(seed, 0, 0)
    given = latents or {}
    z_t = np.asarray(given.get("z_T", rng.standard_normal(net_cfg.n_texture)))
    beta = np.asarray(given.get("beta", rng.standard_normal(net_cfg.n_shape)))
    z_b = np.asarray(given.get("z_B", rng.standard_normal(net_cfg.n_background)))
    psi = np.asarray(given.get("psi", rng.standard_normal(net_cfg.n_expression)))
    camera = scene_camera(model, net_cfg.image_res)
    texture = gan.texture_generator.forward(z_t[None], beta[None])
    img, raster = _render_one(
        gan, model, camera, net_cfg.image_res, texture.data, z_t, z_b, beta, psi, pose
    )
    if lighting_coeffs is not None:
        img = apply_lighting(img, shading_map(raster, lighting_coeffs))
    return img, raster, texture.data[0].transpose(2, 0, 1)
