"""Generator and critic architectures.

Three convolutional networks assembled from the autodiff ops:

* ``TextureGenerator`` maps (z_texture, shape params) to a texture map at
  twice the image resolution.  It never sees pose, expression or the
  background latent, which is what makes identity manipulation-proof by
  construction: any variation of those inputs cannot change the texture.
* ``BackgroundGenerator`` receives every latent plus the normalised pose so
  it can harmonise the backdrop with the rendered subject.
* ``Critic`` scores an image conditioned on pose, supplied as two
  spatially-constant extra channels; no output squash (Wasserstein critic).

Blocks follow the usual progressive-GAN recipe at fixed size: bilinear
upscaling, 3x3 convs, pixel norm, leaky ReLU, and a frozen per-layer noise
map with a trained per-channel gain.  No growing, no equalised LR.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import FileFormatError, ShapeError, ValidationError
from .rasterize import Pose

POSE_YAW_SCALE = 90.0
POSE_PITCH_SCALE = 45.0

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class NetworkConfig:
    image_res: int = 64
    n_texture: int = 64
    n_background: int = 64
    n_shape: int = 32
    n_expression: int = 32
    channels_base: int = 128  # width of the 4x4 grid
    channels_min: int = 16  # floor as resolution grows
    dtype: str = "float32"

    def __post_init__(self):
        r = self.image_res
        if r < 8 or r & (r - 1):
            raise ValidationError(f"image_res must be a power of two >= 8, got {r}")

    @property
    def texture_res(self) -> int:
        return 2 * self.image_res

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def width(self, res: int) -> int:
        return int(max(self.channels_min, min(self.channels_base, self.channels_base * 4 // res)))

    def to_manifest(self) -> dict:
        return {
            "image_res": self.image_res,
            "n_texture": self.n_texture,
            "n_background": self.n_background,
            "n_shape": self.n_shape,
            "n_expression": self.n_expression,
            "channels_base": self.channels_base,
            "channels_min": self.channels_min,
            "dtype": self.dtype,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "NetworkConfig":
        try:
            return cls(**{k: manifest[k] for k in cls.__dataclass_fields__})
        except KeyError as e:
            raise FileFormatError(f"checkpoint manifest missing field {e}") from e


@dataclass
class LatentBundle:
    """Per-sample random inputs: identity latents, residual latents, pose."""

    z_texture: np.ndarray
    z_background: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    pose: Pose


def pose_features(poses: np.ndarray) -> np.ndarray:
    """(n, 2) degrees -> (n, 2) normalized to roughly [-1, 1]."""
    poses = np.asarray(poses, dtype=np.float64)
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] / POSE_YAW_SCALE
    out[:, 1] = poses[:, 1] / POSE_PITCH_SCALE
    return out


def make_pose_channels(pose: Pose, resolution: tuple[int, int]) -> Tensor:
    """Spatially-constant (2, H, W) conditioning channels for one pose."""
    h, w = resolution
    feats = pose_features(np.array([[pose.yaw, pose.pitch]]))[0]
    data = np.empty((2, h, w))
    data[0] = feats[0]
    data[1] = feats[1]
    return ad.constant(data)


def _pose_maps(poses: np.ndarray, resolution: int, dtype) -> np.ndarray:
    """(n, 2) degrees -> (n, res, res, 2) constant conditioning maps."""
    feats = pose_features(poses).astype(dtype)
    n = feats.shape[0]
    out = np.empty((n, resolution, resolution, 2), dtype)
    out[:] = feats[:, None, None, :]
    return out


def _he_init(rng, shape, fan_in, dtype, gain=2.0):
    std = np.sqrt(gain / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class _SynthesisTrunk:
    """Shared upsampling trunk used by both generators."""

    def __init__(self, cfg: NetworkConfig, in_dim: int, out_res: int, rng):
        dt = cfg.np_dtype
        self.cfg = cfg
        self.out_res = out_res
        self.resolutions = []
        r = 8
        while r <= out_res:
            self.resolutions.append(r)
            r *= 2
        c0 = cfg.width(4)
        self.params: dict[str, Tensor] = {}
        self.noise: dict[str, Tensor] = {}
        self.params["dense.w"] = ad.parameter(
            _he_init(rng, (in_dim, 16 * c0), in_dim, dt), "dense.w"
        )
        self.params["dense.b"] = ad.parameter(np.zeros(16 * c0, dt), "dense.b")
        c_in = c0
        for r in self.resolutions:
            c_out = cfg.width(r)
            self.params[f"b{r}.conv.w"] = ad.parameter(
                _he_init(rng, (c_out, c_in, 3, 3), c_in * 9, dt), f"b{r}.conv.w"
            )
            self.params[f"b{r}.conv.b"] = ad.parameter(np.zeros(c_out, dt), f"b{r}.conv.b")
            self.params[f"b{r}.noise_gain"] = ad.parameter(
                np.zeros(c_out, dt), f"b{r}.noise_gain"
            )
            self.noise[f"b{r}.noise"] = ad.constant(
                rng.standard_normal((r, r)).astype(dt)
            )
            c_in = c_out
        self.params["rgb.w"] = ad.parameter(
            _he_init(rng, (3, c_in, 3, 3), c_in * 9, dt, gain=1.0), "rgb.w"
        )
        self.params["rgb.b"] = ad.parameter(np.zeros(3, dt), "rgb.b")

    def run(self, vec: np.ndarray) -> Tensor:
        """(n, in_dim) input vectors -> (n, out_res, out_res, 3) in [-1, 1]."""
        cfg = self.cfg
        p = self.params
        x = ad.dense(ad.constant(vec), p["dense.w"], p["dense.b"])
        c0 = cfg.width(4)
        h = ad.reshape(x, (vec.shape[0], 4, 4, c0))
        for r in self.resolutions:
            h = ad.upsample_bilinear2x(h)
            h = ad.conv2d(h, p[f"b{r}.conv.w"], p[f"b{r}.conv.b"])
            h = ad.pixel_norm(h)
            h = ad.leaky_relu(h, LEAKY_SLOPE)
            h = ad.inject_static_noise(h, self.noise[f"b{r}.noise"], p[f"b{r}.noise_gain"])
        rgb = ad.conv2d(h, p["rgb.w"], p["rgb.b"])
        return ad.tanh(rgb)


class TextureGenerator:
    """Texture CNN; a function of (z_texture, beta) only."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.trunk = _SynthesisTrunk(
            cfg, cfg.n_texture + cfg.n_shape, cfg.texture_res, rng
        )

    def forward(self, z_texture: np.ndarray, beta: np.ndarray) -> Tensor:
        z_texture = np.atleast_2d(z_texture)
        beta = np.atleast_2d(beta)
        if z_texture.shape[1] != self.cfg.n_texture or beta.shape[1] != self.cfg.n_shape:
            raise ShapeError(
                f"texture generator inputs {z_texture.shape}, {beta.shape} do not "
                f"match config ({self.cfg.n_texture}, {self.cfg.n_shape})"
            )
        vec = np.concatenate([z_texture, beta], axis=1).astype(self.cfg.np_dtype)
        return self.trunk.run(vec)

    def forward_single(self, z_texture: np.ndarray, beta: np.ndarray) -> Tensor:
        """Single-sample convenience returning a (3, 2H, 2W) texture."""
        out = self.forward(z_texture[None], beta[None])
        r = self.cfg.texture_res
        return ad.transpose(ad.reshape(out, (r, r, 3)), (2, 0, 1))

    @property
    def params(self):
        return self.trunk.params

    @property
    def noise(self):
        return self.trunk.noise


class BackgroundGenerator:
    """Background CNN; receives every latent plus the normalised pose."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        in_dim = cfg.n_background + cfg.n_texture + cfg.n_shape + cfg.n_expression + 2
        self.trunk = _SynthesisTrunk(cfg, in_dim, cfg.image_res, rng)

    def forward(
        self,
        z_background: np.ndarray,
        z_texture: np.ndarray,
        beta: np.ndarray,
        psi: np.ndarray,
        poses: np.ndarray,
    ) -> Tensor:
        z_background = np.atleast_2d(z_background)
        z_texture = np.atleast_2d(z_texture)
        beta = np.atleast_2d(beta)
        psi = np.atleast_2d(psi)
        poses = np.atleast_2d(poses)
        vec = np.concatenate(
            [z_background, z_texture, beta, psi, pose_features(poses)], axis=1
        ).astype(self.cfg.np_dtype)
        expected = self.trunk.params["dense.w"].shape[0]
        if vec.shape[1] != expected:
            raise ShapeError(
                f"background generator input width {vec.shape[1]}, expected {expected}"
            )
        return self.trunk.run(vec)

    @property
    def params(self):
        return self.trunk.params

    @property
    def noise(self):
        return self.trunk.noise


class Critic:
    """Pose-conditioned Wasserstein critic over (image, pose channels)."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.resolutions = []
        r = cfg.image_res
        while r >= 8:
            self.resolutions.append(r)
            r //= 2
        c_in = cfg.width(cfg.image_res)
        self.params["fromrgb.w"] = ad.parameter(
            _he_init(rng, (c_in, 5, 3, 3), 5 * 9, dt), "fromrgb.w"
        )
        self.params["fromrgb.b"] = ad.parameter(np.zeros(c_in, dt), "fromrgb.b")
        for r in self.resolutions:
            c_out = cfg.width(r // 2)
            self.params[f"b{r}.conv.w"] = ad.parameter(
                _he_init(rng, (c_out, c_in, 3, 3), c_in * 9, dt), f"b{r}.conv.w"
            )
            self.params[f"b{r}.conv.b"] = ad.parameter(np.zeros(c_out, dt), f"b{r}.conv.b")
            c_in = c_out
        c4 = cfg.width(4)
        self.params["final.conv.w"] = ad.parameter(
            _he_init(rng, (c4, c_in, 3, 3), c_in * 9, dt), "final.conv.w"
        )
        self.params["final.conv.b"] = ad.parameter(np.zeros(c4, dt), "final.conv.b")
        self.params["score.w"] = ad.parameter(
            _he_init(rng, (16 * c4, 1), 16 * c4, dt, gain=1.0), "score.w"
        )
        self.params["score.b"] = ad.parameter(np.zeros(1, dt), "score.b")

    def forward(self, images: Tensor, poses: np.ndarray) -> Tensor:
        """(n, H, W, 3) images + (n, 2) poses in degrees -> (n, 1) scores."""
        cfg = self.cfg
        n, h, w, c = images.shape
        if (h, w, c) != (cfg.image_res, cfg.image_res, 3):
            raise ShapeError(
                f"critic expects (n, {cfg.image_res}, {cfg.image_res}, 3), got {images.shape}"
            )
        pose_t = ad.constant(_pose_maps(poses, cfg.image_res, cfg.np_dtype))
        x = ad.concat_channels([images, pose_t])
        x = ad.leaky_relu(
            ad.conv2d(x, self.params["fromrgb.w"], self.params["fromrgb.b"]), LEAKY_SLOPE
        )
        for r in self.resolutions:
            x = ad.conv2d(x, self.params[f"b{r}.conv.w"], self.params[f"b{r}.conv.b"])
            x = ad.leaky_relu(x, LEAKY_SLOPE)
            x = ad.avgpool2x(x)
        x = ad.conv2d(x, self.params["final.conv.w"], self.params["final.conv.b"])
        x = ad.leaky_relu(x, LEAKY_SLOPE)
        flat = ad.reshape(x, (n, 16 * self.cfg.width(4)))
        return ad.dense(flat, self.params["score.w"], self.params["score.b"])

    def forward_single(self, image_chw: Tensor, pose: Pose) -> Tensor:
        """(3, H, W) image + pose -> scalar score tensor."""
        c, h, w = image_chw.shape
        nhwc = ad.reshape(ad.transpose(image_chw, (1, 2, 0)), (1, h, w, c))
        score = self.forward(nhwc, np.array([[pose.yaw, pose.pitch]]))
        return ad.reshape(score, ())


@dataclass
class GanModel:
    """The three networks plus their shared configuration."""

    cfg: NetworkConfig
    texture_generator: TextureGenerator
    background_generator: BackgroundGenerator
    critic: Critic
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: NetworkConfig, seed: int) -> "GanModel":
        ss = np.random.SeedSequence(seed)
        s_tex, s_bg, s_critic = ss.spawn(3)
        return cls(
            cfg=cfg,
            texture_generator=TextureGenerator(cfg, np.random.default_rng(s_tex)),
            background_generator=BackgroundGenerator(cfg, np.random.default_rng(s_bg)),
            critic=Critic(cfg, np.random.default_rng(s_critic)),
        )

    def generator_params(self) -> list[Tensor]:
        out = [t for _, t in sorted(self.texture_generator.params.items())]
        out += [t for _, t in sorted(self.background_generator.params.items())]
        return out

    def critic_params(self) -> list[Tensor]:
        return [t for _, t in sorted(self.critic.params.items())]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (
            ("texture_generator", self.texture_generator),
            ("background_generator", self.background_generator),
        ):
            for k, v in net.params.items():
                out[f"{prefix}.{k}"] = v.data
            for k, v in net.noise.items():
                out[f"{prefix}.{k}"] = v.data
        for k, v in self.critic.params.items():
            out[f"critic.{k}"] = v.data
        return out

    def save(self, path, extra: dict | None = None) -> None:
        manifest = self.cfg.to_manifest()
        if extra:
            manifest.update(extra)
        write_checkpoint(path, self.named_arrays(), manifest)

    @classmethod
    def load(cls, path) -> "GanModel":
        params, manifest = read_checkpoint(path)
        cfg = NetworkConfig.from_manifest(manifest)
        model = cls.build(cfg, seed=0)
        own = model.named_arrays()
        missing = sorted(set(own) - set(params))
        unexpected = sorted(set(params) - set(own))
        if missing or unexpected:
            raise FileFormatError(
                f"{path}: checkpoint does not match architecture "
                f"(missing {missing[:3]}, unexpected {unexpected[:3]})"
            )
        dt = cfg.np_dtype
        for prefix, net in (
            ("texture_generator", model.texture_generator),
            ("background_generator", model.background_generator),
        ):
            for k, v in net.params.items():
                _assign(v, params[f"{prefix}.{k}"], dt, f"{prefix}.{k}", path)
            for k, v in net.noise.items():
                _assign(v, params[f"{prefix}.{k}"], dt, f"{prefix}.{k}", path)
        for k, v in model.critic.params.items():
            _assign(v, params[f"critic.{k}"], dt, f"critic.{k}", path)
        model.extra = {
            k: v for k, v in manifest.items() if k not in cfg.to_manifest()
        }
        return model


def _assign(tensor: Tensor, array: np.ndarray, dtype, name: str, path) -> None:
    if tensor.data.shape != array.shape:
        raise FileFormatError(
            f"{path}: parameter {name} has shape {array.shape}, expected "
            f"{tensor.data.shape}"
        )
    tensor.data = array.astype(dtype)
