"""Inverse texture mapping and mask compositing.

``texture_sample`` bilinearly samples a generated texture at the per-pixel
UVs produced by the rasterizer.  The UVs are fixed inputs, so sampling is a
linear map of the texture: forward is a weighted gather, backward a
deterministic scatter-add of the same weights.  ``composite`` blends the
sampled face over a generated background with the binary coverage mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _emit
from .errors import ShapeError
from .rasterize import RasterOutput


@dataclass
class SamplingPlan:
    """Precomputed gather indices/weights for a batch of rasterizations."""

    rows: np.ndarray  # (P,) flat output pixel index over (n*h*w)
    idx: np.ndarray  # (P, 4) flat texel index over (n*ht*wt)
    weights: np.ndarray  # (P, 4)
    out_hw: tuple[int, int]
    tex_hw: tuple[int, int]
    batch: int


def build_sampling_plan(
    rasters: list[RasterOutput], tex_h: int, tex_w: int, dtype=np.float32
) -> SamplingPlan:
    h, w = rasters[0].mask.shape
    for r in rasters:
        if r.mask.shape != (h, w):
            raise ShapeError("rasters in a batch must share a resolution")
    if (tex_h, tex_w) != (2 * h, 2 * w):
        raise ShapeError(
            f"texture {(tex_h, tex_w)} must be exactly twice the render {(h, w)}"
        )
    rows_parts, idx_parts, w_parts = [], [], []
    for s, r in enumerate(rasters):
        iy, ix = np.nonzero(r.mask)
        uv = r.uv[iy, ix]
        px = np.clip(uv[:, 0] * tex_w - 0.5, 0.0, tex_w - 1.0)
        py = np.clip(uv[:, 1] * tex_h - 0.5, 0.0, tex_h - 1.0)
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        x0 = np.minimum(x0, tex_w - 1)
        y0 = np.minimum(y0, tex_h - 1)
        x1 = np.minimum(x0 + 1, tex_w - 1)
        y1 = np.minimum(y0 + 1, tex_h - 1)
        tx = px - x0
        ty = py - y0
        base = s * tex_h * tex_w
        idx_parts.append(
            np.stack(
                [
                    base + y0 * tex_w + x0,
                    base + y0 * tex_w + x1,
                    base + y1 * tex_w + x0,
                    base + y1 * tex_w + x1,
                ],
                axis=1,
            )
        )
        w_parts.append(
            np.stack(
                [(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx], axis=1
            ).astype(dtype)
        )
        rows_parts.append(s * h * w + iy * w + ix)
    return SamplingPlan(
        rows=np.concatenate(rows_parts),
        idx=np.concatenate(idx_parts),
        weights=np.concatenate(w_parts),
        out_hw=(h, w),
        tex_hw=(tex_h, tex_w),
        batch=len(rasters),
    )


def uv_gather(tex: Tensor, plan: SamplingPlan) -> Tensor:
    """Bilinear gather from NHWC textures; zero outside the coverage mask."""
    n, th, tw, c = tex.shape
    h, w = plan.out_hw
    t2 = tex.data.reshape(-1, c)
    wts = plan.weights.astype(tex.data.dtype)
    acc = (
        t2[plan.idx[:, 0]] * wts[:, 0, None]
        + t2[plan.idx[:, 1]] * wts[:, 1, None]
        + t2[plan.idx[:, 2]] * wts[:, 2, None]
        + t2[plan.idx[:, 3]] * wts[:, 3, None]
    )
    out = np.zeros((n * h * w, c), tex.data.dtype)
    out[plan.rows] = acc
    out = out.reshape(n, h, w, c)

    def bwd(g, need):
        return (uv_scatter(g, plan, (n, th, tw, c)),)

    return _emit("uv_gather", (tex,), out, bwd)


def uv_scatter(g: Tensor, plan: SamplingPlan, tex_shape) -> Tensor:
    """Adjoint of ``uv_gather``: scatter-add in fixed index order."""
    n, th, tw, c = tex_shape
    g2 = g.data.reshape(-1, c)[plan.rows]
    wts = plan.weights.astype(g.data.dtype)
    out = np.zeros((n * th * tw, c), g.data.dtype)
    for q in range(4):
        np.add.at(out, plan.idx[:, q], g2 * wts[:, q, None])
    out = out.reshape(tex_shape)

    def bwd(u, need):
        return (uv_gather(u, plan),)

    return _emit("uv_scatter", (g,), out, bwd)


def texture_sample(texture: Tensor, raster) -> Tensor:
    """Sample a texture at rasterized UVs.

    Accepts the single-image form (texture (3, 2H, 2W), one raster, returns
    (3, H, W)) or a batch (texture (n, 2H, 2W, 3) NHWC with a raster list).
    """
    if isinstance(raster, RasterOutput):
        if texture.ndim != 3:
            raise ShapeError(f"expected (3, 2H, 2W) texture, got {texture.shape}")
        c, th, tw = texture.shape
        plan = build_sampling_plan([raster], th, tw, dtype=texture.data.dtype)
        nhwc = ad.reshape(ad.transpose(texture, (1, 2, 0)), (1, th, tw, c))
        out = uv_gather(nhwc, plan)
        h, w = plan.out_hw
        return ad.transpose(ad.reshape(out, (h, w, c)), (2, 0, 1))
    rasters = list(raster)
    n, th, tw, c = texture.shape
    if n != len(rasters):
        raise ShapeError(f"batch of {n} textures with {len(rasters)} rasters")
    plan = build_sampling_plan(rasters, th, tw, dtype=texture.data.dtype)
    return uv_gather(texture, plan)


def sample_texture_array(texture: np.ndarray, raster: RasterOutput) -> np.ndarray:
    """Plain-numpy single-image sampling for non-trained pipelines.

    `texture` is (2H, 2W, 3); returns (H, W, 3), zero where uncovered.
    """
    th, tw, c = texture.shape
    plan = build_sampling_plan([raster], th, tw, dtype=texture.dtype)
    t2 = texture.reshape(-1, c)
    acc = sum(t2[plan.idx[:, q]] * plan.weights[:, q, None] for q in range(4))
    h, w = plan.out_hw
    out = np.zeros((h * w, c), texture.dtype)
    out[plan.rows] = acc
    return out.reshape(h, w, c)


def composite(background: Tensor, face: Tensor, mask: np.ndarray) -> Tensor:
    """Blend: (1 - K) * background + K * face, with K the binary mask.

    Shapes: (3, H, W) images with (H, W) mask, or NHWC batches with an
    (n, h, w) or (n, h, w, 1) mask.  Selection is exact because K is
    binary, and gradients split exactly along the mask.
    """
    if background.shape != face.shape:
        raise ShapeError(
            f"composite: background {background.shape} vs face {face.shape}"
        )
    if background.ndim == 3:
        if mask.shape != background.shape[1:]:
            raise ShapeError(
                f"composite: mask {mask.shape} for image {background.shape}"
            )
        k = mask[None, :, :]
    else:
        if mask.ndim == 3:
            mask = mask[:, :, :, None]
        if mask.shape != background.shape[:3] + (1,):
            raise ShapeError(
                f"composite: mask {mask.shape} for batch {background.shape}"
            )
        k = mask
    k = ad.constant(np.asarray(k, dtype=background.data.dtype))
    inv = ad.constant(1.0 - k.data)
    return ad.add(ad.mul(background, inv), ad.mul(face, k))
