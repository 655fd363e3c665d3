"""Band-2 spherical-harmonic white-light shading for dataset augmentation.

Lighting is applied after generation as an augmentation step only; nothing
here participates in training gradients.  The basis is scaled so its first
entry is exactly 1, making the first coefficient a direct ambient
multiplier; the remaining terms keep their conventional constants relative
to that normalisation.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .rasterize import RasterOutput

AMBIENT_RANGE = (0.6, 1.4)
DIRECTIONAL_RANGE = (-0.4, 0.4)

_SQRT3 = np.sqrt(3.0)
_SQRT15 = np.sqrt(15.0)
_SQRT5_HALF = np.sqrt(5.0) / 2.0


def sh_basis(normal: np.ndarray) -> np.ndarray:
    """Evaluate the 9-term real SH basis at unit normals.

    Accepts a single 3-vector or an (..., 3) array; returns (..., 9).
    Order: 1, x, y, z, xy, yz, (3z^2 - 1), xz, (x^2 - y^2), with the usual
    constants divided through by the ambient term's constant.
    """
    n = np.asarray(normal, dtype=np.float64)
    single = n.ndim == 1
    if single:
        n = n[None, :]
    if n.shape[-1] != 3:
        raise ShapeError(f"normals must have a trailing 3-axis, got {n.shape}")
    lengths = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(lengths - 1.0) > 1e-5):
        raise ContractError("sh_basis requires unit normals")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    out = np.empty(n.shape[:-1] + (9,))
    out[..., 0] = 1.0
    out[..., 1] = _SQRT3 * x
    out[..., 2] = _SQRT3 * y
    out[..., 3] = _SQRT3 * z
    out[..., 4] = _SQRT15 * x * y
    out[..., 5] = _SQRT15 * y * z
    out[..., 6] = _SQRT5_HALF * (3.0 * z * z - 1.0)
    out[..., 7] = _SQRT15 * x * z
    out[..., 8] = 0.5 * _SQRT15 * (x * x - y * y)
    return out[0] if single else out


def shading_map(raster: RasterOutput, coeffs: np.ndarray) -> np.ndarray:
    """Per-pixel irradiance: SH dot product on covered pixels, 1 elsewhere."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (9,):
        raise ShapeError(f"expected 9 SH coefficients, got {coeffs.shape}")
    out = np.ones(raster.mask.shape)
    iy, ix = np.nonzero(raster.mask)
    if iy.size:
        basis = sh_basis(raster.normals[iy, ix])
        out[iy, ix] = np.maximum(basis @ coeffs, 0.0)
    return out


def apply_lighting(image: np.ndarray, shading: np.ndarray) -> np.ndarray:
    """Multiply a [-1, 1] image by a shading map in linear [0, 1] space."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    if shading.shape != image.shape[1:]:
        raise ShapeError(f"shading {shading.shape} for image {image.shape}")
    dt = image.dtype if image.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    s = shading.astype(dt)[None, :, :]
    linear = (image + dt.type(1.0)) * dt.type(0.5)
    lit = np.clip(linear * s, 0.0, 1.0)
    return lit * dt.type(2.0) - dt.type(1.0)


def sample_light_coeffs(rng: np.random.Generator) -> np.ndarray:
    """Ambient in [0.6, 1.4], the eight directional terms in [-0.4, 0.4]."""
    out = np.empty(9)
    out[0] = rng.uniform(*AMBIENT_RANGE)
    out[1:] = rng.uniform(DIRECTIONAL_RANGE[0], DIRECTIONAL_RANGE[1], size=8)
    return out
