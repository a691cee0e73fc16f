"""Synthetic anisotropic tube phantoms and the ``ZSTK`` / PGM stack formats.

ZSTK layout (all little-endian)::

    offset  size  field
    0       4     magic b"ZSTK"
    4       4     u32 version (1)
    8       12    u32 N_z, N_x, N_y
    20      24    f64 voxel scale s_x, s_y, s_z
    44      4     u32 flags: bit 0 labels present, bit 1 mask present
    48      ...   f32 image voxels, slice-major (N_z, N_x, N_y)
            ...   f32 label voxels (if flag bit 0)
            ...   f32 mask voxels (if flag bit 1)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

MAGIC = b"ZSTK"
VERSION = 1
_HEADER = struct.Struct("<4sI3I3dI")
FLAG_LABELS = 1
FLAG_MASK = 2


@dataclass
class ImageStack:
    """``N_z`` grayscale slices of ``N_x x N_y`` with physical voxel scale ``(s_x, s_y, s_z)``."""

    image: np.ndarray
    voxel_scale: tuple = (1.0, 1.0, 1.0)
    labels: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3:
            raise DimensionError(f"stack image must be N_z x N_x x N_y, got {self.image.shape}")
        for name in ("labels", "mask"):
            arr = getattr(self, name)
            if arr is not None and np.shape(arr) != self.image.shape:
                raise DimensionError(f"{name} shape {np.shape(arr)} != image shape {self.image.shape}")
        self.voxel_scale = tuple(float(s) for s in self.voxel_scale)

    @property
    def n_slices(self):
        return self.image.shape[0]

    @property
    def anisotropy(self):
        sx, _, sz = self.voxel_scale
        return sz / sx

    def slice(self, z):
        return self.image[z][None]


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple = (12, 48, 48)  # N_z, N_x, N_y
    anisotropy: float = 4.0  # s_z / s_x with s_x = s_y = 1
    n_tubes: int = 3
    radius_range: tuple = (2.0, 4.0)
    noise: float = 0.1
    illumination: float = 0.2
    background: float = 0.2
    foreground: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.radius_range[0] < 1:
            raise ConfigError("tube radius must be >= 1 voxel")
        if not 0 <= self.noise < 1:
            raise ConfigError(f"noise level must lie in [0, 1), got {self.noise}")
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ConfigError(f"extents must be three positive ints, got {self.extents}")


def _segment_distance(points, a, b):
    """Distance from each row of ``points`` to segment ``ab``."""
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def voxel_centers(extents, voxel_scale):
    """Physical ``(x, y, z)`` of every voxel center, shaped ``(N_z*N_x*N_y, 3)``."""
    nz, nx, ny = extents
    sx, sy, sz = voxel_scale
    z, x, y = np.meshgrid(np.arange(nz) * sz, np.arange(nx) * sx, np.arange(ny) * sy, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def render_capsules(extents, voxel_scale, capsules):
    """Soft occupancy (one-voxel falloff) and hard labels of a set of ``(a, b, radius)`` capsules."""
    pts = voxel_centers(extents, voxel_scale)
    signed = np.full(len(pts), -np.inf)
    for a, b, r in capsules:
        d = _segment_distance(pts, np.asarray(a, float), np.asarray(b, float))
        signed = np.maximum(signed, r - d)
    soft = np.clip(0.5 + signed / voxel_scale[0], 0.0, 1.0)
    labels = (signed >= 0).astype(np.float32)
    return soft.reshape(extents), labels.reshape(extents)


def random_capsules(cfg, rng):
    nz, nx, ny = cfg.extents
    scale = (1.0, 1.0, cfg.anisotropy)
    box = np.array([nx * scale[0], ny * scale[1], nz * scale[2]])
    caps = []
    for _ in range(cfg.n_tubes):
        r = rng.uniform(*cfg.radius_range)
        if 2 * r > min(nx, ny):
            raise ConfigError(f"tube radius {r:.2f} does not fit in a {nx}x{ny} slice")
        center = rng.uniform(0.2, 0.8, size=3) * box
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        half = 0.5 * rng.uniform(0.6, 1.2) * np.linalg.norm(box)
        caps.append((center - half * direction, center + half * direction, r))
    return caps


def generate_phantom(cfg):
    """Random tubes rendered in physical space, sampled on the anisotropic grid."""
    rng = np.random.default_rng(cfg.seed)
    scale = (1.0, 1.0, float(cfg.anisotropy))
    caps = random_capsules(cfg, rng)
    if caps:
        soft, labels = render_capsules(cfg.extents, scale, caps)
    else:
        soft = np.zeros(cfg.extents)
        labels = np.zeros(cfg.extents, dtype=np.float32)
    clean = cfg.background + (cfg.foreground - cfg.background) * soft
    nz, nx, ny = cfg.extents
    if cfg.illumination:
        # smooth in-plane ramp with a random direction, centered on zero
        theta = rng.uniform(0, 2 * np.pi)
        gx, gy = np.meshgrid(np.linspace(-0.5, 0.5, nx), np.linspace(-0.5, 0.5, ny), indexing="ij")
        ramp = np.cos(theta) * gx + np.sin(theta) * gy
        clean = clean + cfg.illumination * ramp[None]
    if cfg.noise:
        clean = clean + cfg.noise * rng.normal(size=clean.shape)
    image = np.clip(clean, 0.0, 1.0).astype(np.float32)
    return ImageStack(image, scale, labels.astype(np.float32), None)


def sparse_mask(n_slices, extent, every=5):
    """Evaluation mask selecting every ``every``-th slice (1-based positions every, 2*every, ...)."""
    mask = np.zeros((n_slices,) + tuple(extent), dtype=np.float32)
    mask[every - 1::every] = 1.0
    return mask


# I/O --------------------------------------------------------------------------------

def write_stack(stack, path):
    nz, nx, ny = stack.image.shape
    flags = (FLAG_LABELS if stack.labels is not None else 0) | (FLAG_MASK if stack.mask is not None else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, nz, nx, ny, *stack.voxel_scale, flags))
        for arr in (stack.image, stack.labels, stack.mask):
            if arr is not None:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_stack(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated ZSTK header in {path}", len(buf))
    magic, version, nz, nx, ny, sx, sy, sz, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported ZSTK version {version}", 4)
    count = nz * nx * ny
    blocks = 1 + bool(flags & FLAG_LABELS) + bool(flags & FLAG_MASK)
    need = _HEADER.size + 4 * count * blocks
    if len(buf) < need:
        raise FormatError(f"truncated ZSTK payload: need {need} bytes, have {len(buf)}", len(buf))
    off = _HEADER.size
    arrays = []
    for _ in range(blocks):
        arrays.append(np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(nz, nx, ny).copy())
        off += 4 * count
    image = arrays.pop(0)
    labels = arrays.pop(0) if flags & FLAG_LABELS else None
    mask = arrays.pop(0) if flags & FLAG_MASK else None
    return ImageStack(image, (sx, sy, sz), labels, mask)


def quantize_u8(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(image, path):
    """8-bit binary PGM (P5) of a 2D array with values in [0, 1]."""
    q = quantize_u8(image)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path):
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}", pos)
    if len(buf) < pos + w * h:
        raise FormatError("truncated PGM payload", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()

