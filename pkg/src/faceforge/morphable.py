"""Linear morphable head model: mean mesh plus shape/expression bases.

Shape instances are plain linear combinations; joints and articulation are
out of scope.  A procedural icosphere-based head stands in for licensed
scan-derived assets, with a single-chart polar texture unwrap so the texture
space has no seams.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import _Reader
from .errors import BadMagicError, FileFormatError, ShapeError, ValidationError

MAGIC = b"M3DM"
VERSION = 1

# Mild head-like asymmetry: slightly taller than wide, slightly shallower
# front-to-back.  Keeping the depth factor close to 1 keeps silhouette area
# nearly constant under yaw while remaining monotone toward profile.
HEAD_SEMI_AXES = (1.0, 1.12, 0.985)

SHAPE_RMS_FRACTION = 0.02
EXPRESSION_RMS_FRACTION = 0.01


@dataclass
class MorphableModel:
    mean_shape: np.ndarray  # (n_vertices, 3)
    shape_basis: np.ndarray  # (n_shape, n_vertices, 3)
    expression_basis: np.ndarray  # (n_expression, n_vertices, 3)
    triangles: np.ndarray  # (n_triangles, 3) vertex indices
    texcoords: np.ndarray  # (n_triangles, 3, 2) in [0, 1]

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expression_basis = np.asarray(self.expression_basis, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.texcoords = np.asarray(self.texcoords, dtype=np.float64)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.mean_shape, axis=1).mean())

    def validate(self) -> None:
        nv = self.n_vertices
        if self.mean_shape.shape != (nv, 3):
            raise ValidationError(f"mean shape must be (n, 3), got {self.mean_shape.shape}")
        centroid = np.abs(self.mean_shape.mean(axis=0)).max()
        if centroid > 1e-6:
            raise ValidationError(
                f"mean shape is not centered (centroid offset {centroid:.3e})"
            )
        for label, basis in (("shape", self.shape_basis), ("expression", self.expression_basis)):
            if basis.ndim != 3 or basis.shape[1:] != (nv, 3):
                raise ValidationError(
                    f"{label} basis must be (k, {nv}, 3), got {basis.shape}"
                )
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValidationError(f"triangles must be (m, 3), got {self.triangles.shape}")
        bad = np.nonzero((self.triangles < 0) | (self.triangles >= nv))[0]
        if bad.size:
            t = int(bad[0])
            raise ValidationError(
                f"triangle {t} references vertex {int(self.triangles[t].max())} "
                f"(model has {nv} vertices)"
            )
        if self.texcoords.shape != (self.n_triangles, 3, 2):
            raise ValidationError(
                f"texcoords must be ({self.n_triangles}, 3, 2), got {self.texcoords.shape}"
            )
        if self.texcoords.min() < 0.0 or self.texcoords.max() > 1.0:
            raise ValidationError("texture coordinates out of [0, 1]")


def instance_shape(
    model: MorphableModel, beta: np.ndarray, psi: np.ndarray
) -> np.ndarray:
    """Mean shape plus linear shape/expression offsets; exact and affine."""
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if beta.shape != (model.n_shape,):
        raise ShapeError(
            f"shape parameters {beta.shape} do not match basis ({model.n_shape},)"
        )
    if psi.shape != (model.n_expression,):
        raise ShapeError(
            f"expression parameters {psi.shape} do not match basis ({model.n_expression},)"
        )
    out = model.mean_shape.copy()
    if model.n_shape:
        out += np.tensordot(beta, model.shape_basis, axes=1)
    if model.n_expression:
        out += np.tensordot(psi, model.expression_basis, axes=1)
    return out


def sample_shape_expression(
    rng: np.random.Generator, n_shape: int, n_expression: int
) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal shape and expression parameter draws."""
    beta = rng.standard_normal(n_shape)
    psi = rng.standard_normal(n_expression)
    return beta, psi


# ---------------------------------------------------------------------------
# icosphere + procedural toy head


def icosphere(n_subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Subdivided unit icosahedron with outward-wound triangles."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    vlist = [tuple(v) for v in verts]
    for _ in range(n_subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            idx = cache.get(key)
            if idx is None:
                m = (np.array(vlist[i]) + np.array(vlist[j])) / 2.0
                m /= np.linalg.norm(m)
                idx = len(vlist)
                vlist.append(tuple(m))
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new_faces, dtype=np.int64)
    verts = np.array(vlist, dtype=np.float64)
    # enforce outward winding
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    inward = np.einsum("ij,ij->i", normals, (v0 + v1 + v2)) < 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return verts, faces


def _polar_unwrap(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Single-chart azimuthal unwrap about +z; continuous except one point.

    Returns per-triangle corner UVs.  The back-pole corner of any incident
    triangle is re-anchored to the circular mean azimuth of its other
    corners so no triangle degenerates into a sliver across the chart.
    """
    d = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    alpha = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    rho = 0.5 * alpha / np.pi
    s = np.hypot(d[:, 0], d[:, 1])
    safe = s > 1e-12
    cosaz = np.where(safe, d[:, 0] / np.where(safe, s, 1.0), 1.0)
    sinaz = np.where(safe, d[:, 1] / np.where(safe, s, 1.0), 0.0)
    u = 0.5 + rho * cosaz
    v = 0.5 - rho * sinaz
    uv = np.stack([u, v], axis=1)
    tex = uv[faces]  # (n_tri, 3, 2)
    pole = rho > 0.4999
    for t in range(faces.shape[0]):
        for j in range(3):
            if pole[faces[t, j]]:
                others = [q for q in range(3) if q != j]
                rel = tex[t, others] - 0.5
                mean = rel.mean(axis=0)
                norm = np.hypot(mean[0], mean[1])
                if norm < 1e-12:
                    mean = np.array([1.0, 0.0])
                    norm = 1.0
                tex[t, j] = 0.5 + 0.5 * mean / norm
    return np.clip(tex, 0.0, 1.0)


def _smooth_fields(
    rng: np.random.Generator, points: np.ndarray, count: int, n_waves: int = 6
) -> np.ndarray:
    """Random smooth displacement fields: sums of low-frequency plane waves."""
    fields = np.zeros((count, points.shape[0], 3))
    for m in range(count):
        for axis in range(3):
            dirs = rng.standard_normal((n_waves, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            freq = rng.uniform(0.5, 2.5, size=n_waves)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
            amp = rng.standard_normal(n_waves)
            arg = (points @ dirs.T) * freq + phase
            fields[m, :, axis] = np.sin(arg) @ amp
    return fields


def make_toy_model(
    n_subdivisions: int, n_shape: int, n_expression: int, seed: int
) -> MorphableModel:
    """Procedural head: subdivided icosphere, polar unwrap, smooth bases.

    Deterministic in `seed`; all arrays are rounded through float32 so the
    in-memory model round-trips bit-exactly through the file format.
    """
    if n_subdivisions < 1:
        raise ValidationError("n_subdivisions must be >= 1")
    rng = np.random.default_rng(seed)
    verts, faces = icosphere(n_subdivisions)
    tex = _polar_unwrap(verts, faces)
    mean = verts * np.array(HEAD_SEMI_AXES)
    mean -= mean.mean(axis=0)
    radius = float(np.linalg.norm(mean, axis=1).mean())

    total = n_shape + n_expression
    fields = _smooth_fields(rng, verts, total)
    flat = fields.reshape(total, -1)
    # two rounds of modified Gram-Schmidt for numerically clean orthogonality
    for _ in range(2):
        for i in range(total):
            for j in range(i):
                flat[i] -= (flat[i] @ flat[j]) / (flat[j] @ flat[j]) * flat[j]
    nv = verts.shape[0]
    rms = np.sqrt((flat**2).sum(axis=1) / nv)
    targets = np.concatenate(
        [
            np.full(n_shape, SHAPE_RMS_FRACTION * radius),
            np.full(n_expression, EXPRESSION_RMS_FRACTION * radius),
        ]
    )
    flat *= (targets / rms)[:, None]
    fields = flat.reshape(total, nv, 3)

    def f32_exact(a):
        return a.astype(np.float32).astype(np.float64)

    mean = f32_exact(mean)
    mean -= mean.mean(axis=0)  # re-center after rounding
    mean = f32_exact(mean)
    return MorphableModel(
        mean_shape=mean,
        shape_basis=f32_exact(fields[:n_shape]),
        expression_basis=f32_exact(fields[n_shape:]),
        triangles=faces,
        texcoords=f32_exact(tex),
    )


# ---------------------------------------------------------------------------
# file format


def save_model(model: MorphableModel, path) -> None:
    path = Path(path)
    chunks = [
        MAGIC,
        struct.pack(
            "<5I", VERSION, model.n_vertices, model.n_shape, model.n_expression,
            model.n_triangles,
        ),
        np.ascontiguousarray(model.mean_shape, dtype="<f4").tobytes(),
        np.ascontiguousarray(model.shape_basis, dtype="<f4").tobytes(),
        np.ascontiguousarray(model.expression_basis, dtype="<f4").tobytes(),
        np.ascontiguousarray(model.triangles, dtype="<u4").tobytes(),
        np.ascontiguousarray(model.texcoords, dtype="<f4").tobytes(),
    ]
    path.write_bytes(b"".join(chunks))


def load_model(path) -> MorphableModel:
    path = Path(path)
    rd = _Reader(path.read_bytes(), str(path))
    if rd.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a morphable model file (bad magic)")
    version, nv, ns, ne, nt = struct.unpack("<5I", rd.take(20))
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported model version {version}")

    def f32(count, shape):
        arr = np.frombuffer(rd.take(4 * count), dtype="<f4")
        return arr.astype(np.float64).reshape(shape)

    mean = f32(nv * 3, (nv, 3))
    shape_basis = f32(ns * nv * 3, (ns, nv, 3))
    expr_basis = f32(ne * nv * 3, (ne, nv, 3))
    tris = np.frombuffer(rd.take(4 * nt * 3), dtype="<u4").astype(np.int64).reshape(nt, 3)
    tex = f32(nt * 6, (nt, 3, 2))
    return MorphableModel(
        mean_shape=mean,
        shape_basis=shape_basis,
        expression_basis=expr_basis,
        triangles=tris,
        texcoords=tex,
    )
