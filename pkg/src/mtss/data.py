"""Seeded synthetic image sources.

Everything here is a pure function of its arguments and a numpy Generator.
Images are float64 HWC arrays with RGB in [0, 1].
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("square", "disk", "triangle", "cross")

# each shape class has a typical colour, so colour is partly predictable from form
_SHAPE_COLORS = np.array([
    [0.85, 0.20, 0.15],
    [0.15, 0.35, 0.85],
    [0.20, 0.75, 0.25],
    [0.90, 0.80, 0.15],
])


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent counter-based RNG stream for ``(seed, *keys)``.

    String keys are folded through crc32 so the stream is stable across runs.
    """
    ints = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        ints.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(ints))


def shape_mask(kind: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if kind == "disk":
        return dy * dy + dx * dx <= radius * radius
    if kind == "triangle":
        return (dy <= radius * 0.8) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if kind == "cross":
        arm = radius * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise ValueError(f"unknown shape {kind!r}")


def _smooth_noise(rng, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0, c1 = rng.random(3) * 0.6 + 0.2, rng.random(3) * 0.6 + 0.2
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = (np.cos(angle) * yy + np.sin(angle) * xx)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    img += 0.15 * (_smooth_noise(rng, size)[..., None] - 0.5)
    img += 0.03 * rng.standard_normal((size, size, 1))
    return np.clip(img, 0.0, 1.0)


def object_color(rng: np.random.Generator, shape_idx: int) -> np.ndarray:
    return np.clip(_SHAPE_COLORS[shape_idx] + rng.normal(0, 0.08, 3), 0.0, 1.0)


def paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray, rng: np.random.Generator) -> None:
    shade = 1.0 - 0.25 * _smooth_noise(rng, img.shape[0], 3)
    img[mask] = np.clip(color[None, :] * shade[mask][:, None], 0.0, 1.0)


def scene_image(rng: np.random.Generator, size: int = 32, objects: tuple[int, int] = (1, 3)) -> np.ndarray:
    """Gradient/texture background with a few coloured shapes."""
    img = background(rng, size)
    for _ in range(rng.integers(objects[0], objects[1] + 1)):
        k = int(rng.integers(len(SHAPES)))
        r = rng.uniform(0.15, 0.3) * size
        cy, cx = rng.uniform(r, size - r, 2)
        paint(img, shape_mask(SHAPES[k], size, cy, cx, r), object_color(rng, k), rng)
    return img


def scene_batch(rng: np.random.Generator, n: int, size: int = 32) -> np.ndarray:
    return np.stack([scene_image(rng, size) for _ in range(n)])


# ---------------------------------------------------------------------------
# downstream sets
# ---------------------------------------------------------------------------

def shape_classification_set(rng: np.random.Generator, n: int, size: int = 32, distractors: int = 1):
    """Images with one large labelled shape plus small distractors; label = shape index.

    The labelled object's colour is drawn uniformly so that colour alone does
    not reveal the class.
    """
    images = np.empty((n, size, size, 3))
    labels = rng.integers(len(SHAPES), size=n)
    for i in range(n):
        img = background(rng, size)
        for _ in range(distractors):
            k = int(rng.integers(len(SHAPES)))
            r = rng.uniform(0.08, 0.12) * size
            cy, cx = rng.uniform(r, size - r, 2)
            paint(img, shape_mask(SHAPES[k], size, cy, cx, r), object_color(rng, k), rng)
        r = rng.uniform(0.25, 0.35) * size
        cy, cx = rng.uniform(r, size - r, 2)
        paint(img, shape_mask(SHAPES[labels[i]], size, cy, cx, r), rng.random(3) * 0.8 + 0.1, rng)
        images[i] = img
    return images, labels


def depth_set(rng: np.random.Generator, n: int, size: int = 32, near: float = 1.0, far: float = 8.0):
    """Ground-plane scenes whose brightness falls off with depth.

    Returns images ``(n, size, size, 3)`` and strictly positive depth maps
    ``(n, size, size)``.
    """
    images = np.empty((n, size, size, 3))
    depths = np.empty((n, size, size))
    rows = (np.arange(size) + 0.5) / size
    for i in range(n):
        horizon = rng.uniform(0.2, 0.45)
        t = np.clip((rows - horizon) / (1 - horizon), 0.0, 1.0)
        # sky beyond the horizon sits at the far plane
        d = far / (1.0 + t * (far / near - 1.0))
        depth = np.repeat(d[:, None], size, axis=1)
        for _ in range(rng.integers(1, 3)):
            base = rng.uniform(horizon + 0.1, 1.0)
            tb = (base - horizon) / (1 - horizon)
            od = far / (1.0 + tb * (far / near - 1.0))
            r = size * rng.uniform(0.08, 0.18)
            cx = rng.uniform(r, size - r)
            cy = base * size - r
            m = shape_mask(SHAPES[int(rng.integers(len(SHAPES)))], size, cy, cx, r)
            depth[m] = od
        tint = rng.random(3) * 0.5 + 0.5
        fog = 1.0 / (1.0 + 0.35 * (depth - near))
        img = tint * fog[..., None]
        img *= 1.0 - 0.2 * _smooth_noise(rng, size, 6)[..., None]
        images[i] = np.clip(img, 0.0, 1.0)
        depths[i] = depth
    return images, depths


# ---------------------------------------------------------------------------
# motion
# ---------------------------------------------------------------------------

@dataclass
class MotionConfig:
    frames: int = 10
    size: int = 16
    camera_velocity: tuple[int, int] | None = None
    objects: int = 2
    # object velocities; None draws one per object
    object_velocities: list[tuple[int, int]] | None = None
    object_shapes: list[str] | None = None
    object_radius: float | None = None
    max_speed: int = 1


@dataclass
class MotionSequence:
    frames: np.ndarray          # (T, H, W, 3)
    motion: np.ndarray          # (H, W, 2) image-space velocity at frame 0
    camera_velocity: np.ndarray  # (2,)


# shapes that tend to move on their own; the others ride along with the scene
_MOVERS = {"disk": 0.85, "triangle": 0.85, "square": 0.1, "cross": 0.1}


def synth_motion_sequence(cfg: MotionConfig, rng: np.random.Generator) -> MotionSequence:
    """Translating textured background with independently moving shapes.

    Velocities are integer pixels per frame in image space, so ground-truth
    motion is exact. The background texture is periodic and shifts with the
    camera velocity.
    """
    if cfg.frames < 2:
        raise ValueError("motion sequence needs at least 2 frames")
    if cfg.size < 4:
        raise ValueError(f"frame size {cfg.size} too small")
    s = cfg.size
    cam = (np.array(cfg.camera_velocity, dtype=np.int64) if cfg.camera_velocity is not None
           else rng.integers(-cfg.max_speed, cfg.max_speed + 1, 2))
    bg = background(rng, s)
    motion = np.broadcast_to(cam.astype(np.float64), (s, s, 2)).copy()
    objs = []
    for k in range(cfg.objects):
        shape = cfg.object_shapes[k] if cfg.object_shapes else SHAPES[int(rng.integers(len(SHAPES)))]
        if cfg.object_velocities is not None:
            vel = np.array(cfg.object_velocities[k], dtype=np.int64)
        elif rng.random() < _MOVERS[shape]:
            vel = cam + rng.choice([-1, 1], 2) * rng.integers(1, cfg.max_speed + 1, 2)
        else:
            vel = cam.copy()
        r = cfg.object_radius if cfg.object_radius is not None else rng.uniform(0.15, 0.28) * s
        cy, cx = rng.uniform(r, s - r, 2)
        color = object_color(rng, SHAPES.index(shape))
        objs.append((shape, cy, cx, r, vel, color))
        motion[shape_mask(shape, s, cy, cx, r)] = vel
    frames = np.empty((cfg.frames, s, s, 3))
    for t in range(cfg.frames):
        img = np.roll(bg, shift=tuple(int(v) for v in cam * t), axis=(0, 1))
        for shape, cy, cx, r, vel, color in objs:
            m = shape_mask(shape, s, cy + vel[0] * t, cx + vel[1] * t, r)
            img[m] = color
        frames[t] = img
    return MotionSequence(frames, motion, cam.astype(np.float64))


@dataclass
class MotionSample:
    frame: np.ndarray  # (H, W, 3)
    mask: np.ndarray   # (H / factor, W / factor) in {0, 1}


def majority_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Per ``factor x factor`` cell vote; ties go to foreground."""
    h, w = mask.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"downsample factor {factor} does not divide mask extents {mask.shape}")
    cells = mask.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return (2 * cells >= factor * factor).astype(np.int64)


def motion_mask(seq: MotionSequence, factor: int) -> MotionSample:
    """Pixels whose motion differs from the camera's are foreground."""
    full = np.any(seq.motion != seq.camera_velocity, axis=-1).astype(np.int64)
    return MotionSample(seq.frames[0], majority_downsample(full, factor))


# ---------------------------------------------------------------------------
# raster import
# ---------------------------------------------------------------------------

RASTER_MAGIC = b"MTSI"


def write_raster(path, image: np.ndarray) -> None:
    """Flat binary raster: magic, u32 width, height, channels, then LE float32 HWC."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    Path(path).write_bytes(RASTER_MAGIC + struct.pack("<III", w, h, c) + img.tobytes())


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file (bad magic)")
    w, h, c = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != 4 * w * h * c:
        raise ValueError(f"{path}: expected {4 * w * h * c} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)
