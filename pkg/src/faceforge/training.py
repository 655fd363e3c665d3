"""WGAN-GP training of the pose-conditioned generator pair.

The critic maximises the score gap between real and generated images (we
minimise fake-minus-real plus the gradient penalty), and the generator
minimises the negated critic score of its outputs.  Real images never enter
the generator objective, and no pixel-space comparison between real and
generated images exists anywhere; the only term that mixes them is the
penalty interpolation point.

Everything is seeded: batches, interpolation factors and evaluation draws
all derive from the run seed, so reruns produce byte-identical metrics logs
and checkpoints.  Log records are JSON lines of
``{step, critic_loss, gen_loss, wasserstein_estimate, grad_penalty}`` plus
``hist_l1`` on evaluation steps; wall-clock timing goes to stderr only so
the log stays deterministic.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .dataset import DatasetManifest
from .errors import ConfigError, TrainingDiverged
from .imageio import decode_png
from .morphable import MorphableModel, instance_shape
from .networks import GanModel, NetworkConfig
from .optim import AdamState, adam_step
from .projection import composite, texture_sample
from .rasterize import Camera, Pose, rasterize
from .synthesis import scene_camera
from .training_eval import masked_histogram_l1


@dataclass
class TrainingConfig:
    steps: int = 2000  # generator steps
    batch_size: int = 16
    n_critic: int = 3
    gp_weight: float = 10.0
    lr: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    seed: int = 0
    holdout: int = 256  # trailing manifest entries reserved for evaluation
    eval_every: int = 100
    eval_count: int = 256
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.n_critic < 1:
            raise ConfigError("steps, batch_size and n_critic must be positive")
        if self.gp_weight < 0:
            raise ConfigError("gradient penalty weight must be >= 0")


@dataclass
class TrainingBatch:
    real_images: np.ndarray  # (b, h, w, 3) float32 in [-1, 1]
    real_poses: np.ndarray  # (b, 2) degrees
    fake_poses: np.ndarray  # (b, 2) degrees, drawn independently from the pool
    z_texture: np.ndarray  # (b, n_texture) standard normal
    z_background: np.ndarray
    beta: np.ndarray
    psi: np.ndarray


class _RealData:
    """All manifest images decoded once into memory, NHWC float32."""

    def __init__(self, manifest: DatasetManifest, holdout: int):
        n = len(manifest.records)
        if holdout >= n:
            raise ConfigError(f"holdout {holdout} leaves no training data (n={n})")
        images = []
        poses = np.empty((n, 2))
        for i, rec in enumerate(manifest.records):
            img = decode_png(rec.path)  # (3, h, w)
            images.append(img.transpose(1, 2, 0))
            poses[i] = (rec.yaw, rec.pitch)
        self.images = np.stack(images)
        self.poses = poses
        self.train_count = n - holdout
        self.holdout = holdout


def sample_inputs(
    data: _RealData, net_cfg: NetworkConfig, batch: int, rng: np.random.Generator
) -> TrainingBatch:
    """Draw one training batch; draw order is fixed for reproducibility."""
    n = data.train_count
    real_idx = rng.integers(0, n, size=batch)
    pose_idx = rng.integers(0, n, size=batch)
    z_t = rng.standard_normal((batch, net_cfg.n_texture))
    z_b = rng.standard_normal((batch, net_cfg.n_background))
    beta = rng.standard_normal((batch, net_cfg.n_shape))
    psi = rng.standard_normal((batch, net_cfg.n_expression))
    return TrainingBatch(
        real_images=data.images[real_idx],
        real_poses=data.poses[real_idx],
        fake_poses=data.poses[pose_idx],
        z_texture=z_t,
        z_background=z_b,
        beta=beta,
        psi=psi,
    )


def generate_batch(
    gan: GanModel,
    model: MorphableModel,
    camera: Camera,
    batch: TrainingBatch,
) -> tuple[Tensor, Tensor, list]:
    """Run the full generator: texture, render, sample, composite.

    Returns (images (b, h, w, 3), texture maps, rasters).
    """
    res = gan.cfg.image_res
    rasters = []
    for i in range(batch.beta.shape[0]):
        verts = instance_shape(model, batch.beta[i], batch.psi[i])
        pose = Pose(float(batch.fake_poses[i, 0]), float(batch.fake_poses[i, 1]))
        rasters.append(rasterize(model, verts, pose, camera, (res, res)))
    textures = gan.texture_generator.forward(batch.z_texture, batch.beta)
    face = texture_sample(textures, rasters)
    background = gan.background_generator.forward(
        batch.z_background, batch.z_texture, batch.beta, batch.psi, batch.fake_poses
    )
    masks = np.stack([r.mask for r in rasters])
    images = composite(background, face, masks)
    return images, textures, rasters


def gradient_penalty(
    real: np.ndarray,
    fake: np.ndarray,
    poses: np.ndarray,
    gan: GanModel,
    u: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Two-sided penalty on the critic's input gradient norm.

    `u` holds the per-sample interpolation factors.  The gradient is taken
    w.r.t. the interpolated image pixels only; pose channels are separate
    constant inputs.  Returns (penalty, interpolation leaf).
    """
    dt = real.dtype
    mix = (u * real + (1.0 - u) * fake).astype(dt)
    xhat = Tensor(mix, requires_grad=True)
    scores = gan.critic.forward(xhat, poses)
    grad = backward(ad.sum_all(scores), wrt=[xhat], create_graph=True)[xhat]
    sq = ad.sum_axes(ad.mul(grad, grad), (1, 2, 3))
    norm = ad.pow_const(ad.add_const(sq, 1e-12), 0.5)
    penalty = ad.mean_all(ad.pow_const(ad.add_const(norm, -1.0), 2.0))
    return penalty, xhat


def critic_loss(
    real: np.ndarray,
    fake: np.ndarray,
    real_poses: np.ndarray,
    fake_poses: np.ndarray,
    gan: GanModel,
    gp_weight: float,
    u: np.ndarray,
) -> tuple[Tensor, dict]:
    """Critic objective: mean fake score - mean real score + weighted penalty."""
    score_real = ad.mean_all(gan.critic.forward(Tensor(real), real_poses))
    score_fake = ad.mean_all(gan.critic.forward(Tensor(fake), fake_poses))
    penalty, xhat = gradient_penalty(real, fake, fake_poses, gan, u)
    loss = ad.add(
        ad.sub(score_fake, score_real), ad.mul_const(penalty, gp_weight)
    )
    parts = {
        "score_real": score_real,
        "score_fake": score_fake,
        "penalty": penalty,
        "xhat": xhat,
        "wasserstein": float(score_real.data - score_fake.data),
    }
    return loss, parts


def generator_loss(images: Tensor, poses: np.ndarray, gan: GanModel) -> Tensor:
    """Negated mean critic score of generated images.

    Descending this raises the critic's score of the generator's output,
    the adversarial complement of the critic objective above.
    """
    return ad.neg(ad.mean_all(gan.critic.forward(images, poses)))


@dataclass
class TrainingResult:
    metrics_path: Path
    checkpoint_path: Path
    steps: int
    history: list = field(default_factory=list)


def train(
    cfg: TrainingConfig,
    manifest: DatasetManifest,
    model: MorphableModel,
    net_cfg: NetworkConfig,
    out_dir,
    log_status: bool = True,
) -> TrainingResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    data = _RealData(manifest, cfg.holdout)
    camera = scene_camera(model, net_cfg.image_res)

    ss = np.random.SeedSequence(cfg.seed)
    s_net, s_train = ss.spawn(2)
    gan = GanModel.build(net_cfg, seed=int(s_net.generate_state(1)[0]))
    rng = np.random.default_rng(s_train)

    g_params = gan.generator_params()
    d_params = gan.critic_params()
    g_state = AdamState.for_params(
        g_params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2
    )
    d_state = AdamState.for_params(
        d_params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2
    )

    eval_ctx = _EvalContext(cfg, data, model, camera) if cfg.eval_every else None

    def diagnostic_abort(step: int, what: str) -> None:
        diag = out_dir / "checkpoint_diverged.ffck"
        gan.save(diag, extra={"step": step, "diverged": what})
        raise TrainingDiverged(f"non-finite {what} at step {step}; wrote {diag}")

    history = []
    t_start = time.perf_counter()
    with metrics_path.open("w") as log:
        for step in range(1, cfg.steps + 1):
            for _ in range(cfg.n_critic):
                batch = sample_inputs(data, net_cfg, cfg.batch_size, rng)
                fake_imgs, _, _ = generate_batch(gan, model, camera, batch)
                fake_np = fake_imgs.data
                u = rng.uniform(size=(cfg.batch_size, 1, 1, 1)).astype(fake_np.dtype)
                with Tape():
                    loss, parts = critic_loss(
                        batch.real_images,
                        fake_np,
                        batch.real_poses,
                        batch.fake_poses,
                        gan,
                        cfg.gp_weight,
                        u,
                    )
                    if not np.isfinite(loss.data):
                        diagnostic_abort(step, "critic loss")
                    backward(loss, wrt=d_params)
                adam_step(d_params, d_state)
                last_critic = (
                    float(loss.data),
                    parts["wasserstein"],
                    float(parts["penalty"].data),
                )

            batch = sample_inputs(data, net_cfg, cfg.batch_size, rng)
            with Tape():
                images, _, _ = generate_batch(gan, model, camera, batch)
                g_loss = generator_loss(images, batch.fake_poses, gan)
                if not np.isfinite(g_loss.data):
                    diagnostic_abort(step, "generator loss")
                backward(g_loss, wrt=g_params)
            adam_step(g_params, g_state)

            record = {
                "step": step,
                "critic_loss": last_critic[0],
                "gen_loss": float(g_loss.data),
                "wasserstein_estimate": last_critic[1],
                "grad_penalty": last_critic[2],
            }
            if eval_ctx is not None and (
                step % cfg.eval_every == 0 or step == 1 or step == cfg.steps
            ):
                record["hist_l1"] = eval_ctx.evaluate(gan, step)
            log.write(json.dumps(record) + "\n")
            log.flush()
            history.append(record)
            if log_status and (step % 50 == 0 or step == 1):
                rate = (time.perf_counter() - t_start) / step
                print(
                    f"[train] step {step}/{cfg.steps} "
                    f"critic={record['critic_loss']:+.3f} "
                    f"gen={record['gen_loss']:+.3f} "
                    f"w={record['wasserstein_estimate']:+.3f} "
                    f"gp={record['grad_penalty']:.4f} "
                    f"({rate:.2f}s/step)",
                    file=sys.stderr,
                    flush=True,
                )
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                gan.save(out_dir / f"checkpoint_{step:06d}.ffck", extra={"step": step})

    final = out_dir / "checkpoint_final.ffck"
    gan.save(final, extra={"step": cfg.steps})
    return TrainingResult(
        metrics_path=metrics_path,
        checkpoint_path=final,
        steps=cfg.steps,
        history=history,
    )


class _EvalContext:
    """Held-out histogram evaluation; everything cached and seeded."""

    def __init__(self, cfg: TrainingConfig, data: _RealData, model, camera):
        self.cfg = cfg
        self.model = model
        self.camera = camera
        count = min(cfg.eval_count, data.holdout) if data.holdout else 0
        if count == 0:
            self.real_images = None
            return
        self.real_images = data.images[data.train_count : data.train_count + count]
        self.real_poses = data.poses[data.train_count : data.train_count + count]
        res = self.real_images.shape[1]
        # Approximate held-out masks with the mean head at the labelled pose;
        # shape offsets are a few percent so the face region barely moves.
        masks = []
        for i in range(count):
            pose = Pose(float(self.real_poses[i, 0]), float(self.real_poses[i, 1]))
            r = rasterize(model, model.mean_shape, pose, camera, (res, res))
            masks.append(r.mask)
        self.real_masks = np.stack(masks)

    def evaluate(self, gan: GanModel, step: int) -> float:
        if self.real_images is None:
            return float("nan")
        cfg = self.cfg
        count = self.real_images.shape[0]
        rng = np.random.default_rng(
            np.random.Philox(key=np.array([cfg.seed, step], np.uint64))
        )
        gen_pixels = []
        bs = cfg.batch_size
        data_stub = _FakePool(self.real_poses)
        net_cfg = gan.cfg
        done = 0
        while done < count:
            b = min(bs, count - done)
            batch = sample_inputs(data_stub, net_cfg, b, rng)
            imgs, _, rasters = generate_batch(gan, self.model, self.camera, batch)
            arr = imgs.data
            for i, r in enumerate(rasters):
                sel = r.mask.astype(bool)
                gen_pixels.append(arr[i][sel])
            done += b
        gen_pixels = np.concatenate(gen_pixels)
        real_pixels = self.real_images[self.real_masks.astype(bool)]
        return masked_histogram_l1(gen_pixels, real_pixels)


class _FakePool:
    """Pose pool adapter so evaluation reuses ``sample_inputs``."""

    def __init__(self, poses: np.ndarray):
        self.images = np.zeros((len(poses), 1, 1, 3), np.float32)
        self.poses = poses
        self.train_count = len(poses)
