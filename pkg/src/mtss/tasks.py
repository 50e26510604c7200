"""The four pretext tasks: label generation, preprocessing, heads and losses.

Each task turns raw synthetic images into a typed batch, and
:func:`task_loss` wires a batch through the shared trunk, the task head and
the task loss inside one :class:`~mtss.autodiff.Graph`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import data
from .autodiff import Graph, ShapeError
from .color import AbQuantizer, lightness_input, rgb_to_lab
from .trunk import (
    TrunkConfig,
    alpha_param_name,
    alpha_row,
    head_input,
    lasso_penalty,
    register,
    trunk_forward,
)


class TaskKind(str, Enum):
    RELATIVE_POSITION = "relative_position"
    COLORIZATION = "colorization"
    EXEMPLAR = "exemplar"
    MOTION_SEGMENTATION = "motion_segmentation"


SHORT_NAMES = {
    "rp": TaskKind.RELATIVE_POSITION,
    "col": TaskKind.COLORIZATION,
    "ex": TaskKind.EXEMPLAR,
    "ms": TaskKind.MOTION_SEGMENTATION,
}

# per-step cost in simulated units; ratios of the per-epoch GPU-hour figures
# 350 : 90 : 60 : 400, divided by 100
DEFAULT_STEP_COST = {
    TaskKind.RELATIVE_POSITION: 3.5,
    TaskKind.COLORIZATION: 0.9,
    TaskKind.EXEMPLAR: 0.6,
    TaskKind.MOTION_SEGMENTATION: 4.0,
}

_DEFAULT_SIZE = {
    TaskKind.RELATIVE_POSITION: 32,
    TaskKind.COLORIZATION: 16,
    TaskKind.EXEMPLAR: 32,
    TaskKind.MOTION_SEGMENTATION: 16,
}


@dataclass(frozen=True)
class AugmentConfig:
    """Exemplar augmentation ranges; all zero is the identity."""
    max_shift: float = 2.0
    max_rotation: float = 0.4
    scale_range: tuple[float, float] = (0.8, 1.2)
    color_shift: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: TaskKind
    harmonized: bool = False
    lasso: bool = False
    batch_size: int = 4
    image_size: int = 0
    # relative position and exemplar geometry
    grid: int = 3
    patch: int = 8
    jitter: int = 1
    # colorization
    bins: int = 13
    # colorization label stride and motion-mask downsample factor
    label_stride: int = 2
    # exemplar
    margin: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    hidden: int = 32
    embed: int = 8
    step_cost: float = 0.0
    loss_scale: float = 1.0

    def __post_init__(self):
        kind = TaskKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.image_size == 0:
            object.__setattr__(self, "image_size", _DEFAULT_SIZE[kind])
        if self.step_cost == 0.0:
            object.__setattr__(self, "step_cost", DEFAULT_STEP_COST[kind])
        if kind is TaskKind.EXEMPLAR and self.margin <= 0:
            raise ValueError("exemplar margin must be positive")
        if kind in (TaskKind.COLORIZATION, TaskKind.MOTION_SEGMENTATION) and self.image_size % self.label_stride:
            raise ValueError(f"label stride {self.label_stride} does not divide image size {self.image_size}")
        if self.step_cost < 0 or self.batch_size < 1:
            raise ValueError("step cost must be >= 0 and batch size >= 1")

    def with_(self, **kw) -> "TaskSpec":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# relative position
# ---------------------------------------------------------------------------

# (row, col) offset of patch 2 relative to patch 1, indexed by label
RP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def rp_label(offset: tuple[int, int]) -> int:
    return RP_OFFSETS.index(tuple(int(v) for v in offset))


def adjacent_pairs(grid: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """All ordered pairs of 8-neighbour cells on a ``grid x grid`` lattice."""
    pairs = []
    for r in range(grid):
        for c in range(grid):
            for dr, dc in RP_OFFSETS:
                if 0 <= r + dr < grid and 0 <= c + dc < grid:
                    pairs.append(((r, c), (r + dr, c + dc)))
    return pairs


@dataclass
class PatchPairBatch:
    first: np.ndarray   # (B, p, p, 3) network-ready
    second: np.ndarray
    labels: np.ndarray  # (B,) in 0..7
    cells: np.ndarray   # (B, 2, 2) grid cells of patch 1 and patch 2

    def swapped(self) -> "PatchPairBatch":
        return PatchPairBatch(self.second, self.first, (self.labels + 4) % 8, self.cells[:, ::-1])


def preprocess_color_drop(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Keep one uniformly chosen channel, replace the other two with U(0, 1) noise."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[-1] != 3:
        raise ValueError(f"color drop needs a 3-channel patch, got shape {patch.shape}")
    keep = int(rng.integers(3))
    out = rng.random(patch.shape)
    out[..., keep] = patch[..., keep]
    return out


def _cell_origin(cell, size, grid, patch, jitter, rng):
    step = size // grid
    margin = (step - patch) // 2
    jy, jx = rng.integers(-jitter, jitter + 1, 2) if jitter else (0, 0)
    top = min(max(cell[0] * step + margin + jy, 0), size - patch)
    left = min(max(cell[1] * step + margin + jx, 0), size - patch)
    return top, left


def sample_relative_position_pair(image, grid: int, patch: int, jitter: int, rng: np.random.Generator):
    """One adjacent patch pair from one image: ``(patch1, patch2, label, cell1, cell2)``."""
    size = image.shape[0]
    if grid < 2 or grid * (patch + 2 * jitter) > min(image.shape[:2]):
        raise ValueError(f"image {image.shape[:2]} too small for a {grid}x{grid} grid of {patch}px patches with jitter {jitter}")
    pairs = adjacent_pairs(grid)
    c1, c2 = pairs[int(rng.integers(len(pairs)))]
    crops = []
    for cell in (c1, c2):
        t, l = _cell_origin(cell, size, grid, patch, jitter, rng)
        crops.append(image[t:t + patch, l:l + patch])
    return crops[0], crops[1], rp_label((c2[0] - c1[0], c2[1] - c1[1])), c1, c2


def sample_relative_position_batch(images, grid: int, patch: int, jitter: int, rng: np.random.Generator,
                                   harmonized: bool = False) -> PatchPairBatch:
    """One pair per image; colour dropping or harmonization applied per patch."""
    firsts, seconds, labels, cells = [], [], [], []
    for img in images:
        p1, p2, lab, c1, c2 = sample_relative_position_pair(img, grid, patch, jitter, rng)
        if harmonized:
            p1, p2 = lightness_input(p1), lightness_input(p2)
        else:
            p1, p2 = preprocess_color_drop(p1, rng), preprocess_color_drop(p2, rng)
        firsts.append(p1)
        seconds.append(p2)
        labels.append(lab)
        cells.append((c1, c2))
    return PatchPairBatch(np.stack(firsts), np.stack(seconds), np.array(labels), np.array(cells))


# ---------------------------------------------------------------------------
# colorization
# ---------------------------------------------------------------------------

@dataclass
class ColorizationBatch:
    inputs: np.ndarray  # (B, s, s, 3) L/100 replicated
    labels: np.ndarray  # (B, s/stride, s/stride)


def make_colorization_targets(image, stride: int, quantizer: AbQuantizer) -> np.ndarray:
    """Quantized mean ab of every ``stride x stride`` region."""
    h, w = image.shape[:2]
    if stride < 1 or h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide image extents {(h, w)}")
    ab = rgb_to_lab(image)[..., 1:]
    means = ab.reshape(h // stride, stride, w // stride, stride, 2).mean(axis=(1, 3))
    return quantizer(means)


def sample_colorization_batch(images, stride: int, quantizer: AbQuantizer) -> ColorizationBatch:
    return ColorizationBatch(
        np.stack([lightness_input(im) for im in images]),
        np.stack([make_colorization_targets(im, stride, quantizer) for im in images]),
    )


# ---------------------------------------------------------------------------
# exemplar
# ---------------------------------------------------------------------------

@dataclass
class TripletBatch:
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    source: np.ndarray    # image index of x1 / x2
    negative: np.ndarray  # image index of x3


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample an HWC image at fractional pixel-index coordinates, clamping at the border."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, dtype=np.int64)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, dtype=np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def affine_patch(image, center, patch: int, shift=(0.0, 0.0), angle: float = 0.0, scale: float = 1.0,
                 color=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Resample a ``patch x patch`` window around ``center`` under a similarity transform."""
    q = np.arange(patch) + 0.5 - patch / 2.0
    qy, qx = np.meshgrid(q, q, indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    ys = center[0] + shift[0] + scale * (c * qy - s * qx) - 0.5
    xs = center[1] + shift[1] + scale * (s * qy + c * qx) - 0.5
    out = bilinear_sample(image, ys, xs)
    if np.any(color):
        out = np.clip(out + np.asarray(color), 0.0, 1.0)
    return out


def augment(image, center, patch: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    shift = rng.uniform(-cfg.max_shift, cfg.max_shift, 2) if cfg.max_shift else (0.0, 0.0)
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation) if cfg.max_rotation else 0.0
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    color = rng.uniform(-cfg.color_shift, cfg.color_shift, 3) if cfg.color_shift else (0.0, 0.0, 0.0)
    return affine_patch(image, center, patch, shift, angle, scale, color)


def exemplar_triplet_batch(images, cfg: AugmentConfig, rng: np.random.Generator, patch: int = 8,
                           batch_size: int | None = None) -> TripletBatch:
    """x1, x2: two augmentations of one source patch; x3: a patch of another image."""
    n = len(images)
    if n < 2:
        raise ValueError("exemplar triplets need at least 2 images")
    b = n if batch_size is None else batch_size
    size = images[0].shape[0]
    lo, hi = patch // 2, size - patch // 2
    xs1, xs2, xs3, src, neg = [], [], [], [], []
    for _ in range(b):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        j += j >= i
        ci = rng.integers(lo, hi + 1, 2)
        cj = rng.integers(lo, hi + 1, 2)
        xs1.append(augment(images[i], ci, patch, cfg, rng))
        xs2.append(augment(images[i], ci, patch, cfg, rng))
        xs3.append(augment(images[j], cj, patch, cfg, rng))
        src.append(i)
        neg.append(j)
    return TripletBatch(np.stack(xs1), np.stack(xs2), np.stack(xs3), np.array(src), np.array(neg))


def cosine_distance(u, v) -> np.ndarray:
    u, v = np.atleast_2d(u), np.atleast_2d(v)
    return 1.0 - np.sum(u * v, 1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))


def triplet_loss(graph: Graph, f1: int, f2: int, f3: int, margin: float) -> int:
    """Batch mean of max(D(f1, f2) - D(f1, f3) + margin, 0) with cosine distance D."""
    d12 = graph.apply("cosine-distance", [f1, f2])
    d13 = graph.apply("cosine-distance", [f1, f3])
    gap = graph.apply("add", [graph.apply("subtract", [d12, d13]), graph.const(margin)])
    return graph.apply("reduce-mean", [graph.apply("relu", [gap])])


# ---------------------------------------------------------------------------
# motion segmentation
# ---------------------------------------------------------------------------

@dataclass
class MotionBatch:
    frames: np.ndarray  # (B, s, s, 3)
    masks: np.ndarray   # (B, s/f, s/f)


def sample_motion_batch(task: TaskSpec, rng: np.random.Generator) -> MotionBatch:
    cfg = data.MotionConfig(size=task.image_size)
    samples = [data.motion_mask(data.synth_motion_sequence(cfg, rng), task.label_stride)
               for _ in range(task.batch_size)]
    return MotionBatch(np.stack([s.frame for s in samples]), np.stack([s.mask for s in samples]))


# ---------------------------------------------------------------------------
# batches, heads, losses
# ---------------------------------------------------------------------------

def sample_batch(task: TaskSpec, rng: np.random.Generator):
    """Draw one training batch for ``task`` from the synthetic scene source."""
    k = task.kind
    if k is TaskKind.MOTION_SEGMENTATION:
        return sample_motion_batch(task, rng)
    images = data.scene_batch(rng, task.batch_size, task.image_size)
    if k is TaskKind.RELATIVE_POSITION:
        return sample_relative_position_batch(images, task.grid, task.patch, task.jitter, rng, task.harmonized)
    if k is TaskKind.COLORIZATION:
        return sample_colorization_batch(images, task.label_stride, AbQuantizer(task.bins))
    return exemplar_triplet_batch(images, task.augment, rng, task.patch)


def _feature_side(size: int, trunk: TrunkConfig) -> int:
    return (size - 1) // trunk.stem_stride + 1


def head_param_names(task: TaskSpec) -> list[str]:
    p = f"head.{task.task_id}."
    layers = {
        TaskKind.RELATIVE_POSITION: ("fc1", "res_a", "res_b", "out"),
        TaskKind.COLORIZATION: ("conv1", "conv2", "out"),
        TaskKind.EXEMPLAR: ("proj", "conv1", "conv2"),
        TaskKind.MOTION_SEGMENTATION: ("conv1", "conv2", "out"),
    }[task.kind]
    return [p + f"{layer}.{wb}" for layer in layers for wb in ("w", "b")]


def init_head(task: TaskSpec, trunk: TrunkConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c, h = trunk.width, task.hidden
    p = f"head.{task.task_id}."

    def dense(n_in, n_out, scale=1.0):
        return rng.normal(0, scale * np.sqrt(2.0 / n_in), (n_in, n_out)), np.zeros((1, n_out))

    def conv(o, i, k, scale=1.0):
        return rng.normal(0, scale * np.sqrt(2.0 / (i * k * k)), (o, i, k, k)), np.zeros((o, 1, 1))

    if task.kind is TaskKind.RELATIVE_POSITION:
        side = _feature_side(task.patch, trunk)
        shapes = {"fc1": dense(2 * c * side * side, h), "res_a": dense(h, h), "res_b": dense(h, h, 0.5),
                  "out": dense(h, 8, 0.5)}
    elif task.kind is TaskKind.COLORIZATION:
        q = AbQuantizer(task.bins).num_classes
        shapes = {"conv1": conv(h, c, 2), "conv2": conv(h, h, 1), "out": conv(q, h, 1, 0.5)}
    elif task.kind is TaskKind.EXEMPLAR:
        e = task.embed
        shapes = {"proj": conv(e, c, 1), "conv1": conv(e, c, 3), "conv2": conv(e, e, 3, 0.5)}
    else:
        shapes = {"conv1": conv(h, c, 1), "conv2": conv(h, h, 1), "out": conv(1, h, 1, 0.5)}
    out = {}
    for layer, (w, b) in shapes.items():
        out[p + layer + ".w"] = w
        out[p + layer + ".b"] = b
    return out


def task_param_names(task: TaskSpec, trunk: TrunkConfig) -> list[str]:
    """Parameters a packet for ``task`` may carry gradients for."""
    names = trunk.param_names() + head_param_names(task)
    if task.lasso:
        names.append(alpha_param_name("pretrain", task.task_id))
    return names


def _nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))


def _dense(g: Graph, x: int, nodes, name: str) -> int:
    return g.apply("add", [g.apply("matmul", [x, nodes[name + ".w"]]), nodes[name + ".b"]])


def _conv(g: Graph, x: int, nodes, name: str, **attrs) -> int:
    y = g.apply("conv2d", [x, nodes[name + ".w"]], **attrs)
    return g.apply("add", [y, nodes[name + ".b"]])


def _expect(batch, cls, task):
    if not isinstance(batch, cls):
        raise TypeError(f"task {task.task_id} ({task.kind.value}) expects {cls.__name__}, got {type(batch).__name__}")


def head_logits(task: TaskSpec, batch, g: Graph, nodes: dict[str, int], trunk: TrunkConfig):
    """Trunk plus head; returns the node fed to the loss (logits or embeddings)."""
    p = f"head.{task.task_id}."
    alpha = None
    if task.lasso:
        alpha = alpha_row(g, nodes[alpha_param_name("pretrain", task.task_id)])
    k = task.kind
    if k is TaskKind.RELATIVE_POSITION:
        _expect(batch, PatchPairBatch, task)
        b = len(batch.labels)
        x = g.const(_nchw(np.concatenate([batch.first, batch.second])))
        feat = g.apply("flatten", [head_input(g, trunk_forward(g, x, nodes, trunk), alpha)])
        pair = g.apply("concat", [g.apply("take", [feat], indices=np.arange(b)),
                                  g.apply("take", [feat], indices=np.arange(b, 2 * b))], axis=1)
        h = _dense(g, pair, nodes, p + "fc1")
        r = _dense(g, g.apply("relu", [h]), nodes, p + "res_a")
        r = _dense(g, g.apply("relu", [r]), nodes, p + "res_b")
        h = g.apply("add", [h, r])
        return _dense(g, g.apply("relu", [h]), nodes, p + "out"), alpha
    if k is TaskKind.COLORIZATION:
        _expect(batch, ColorizationBatch, task)
        x = g.const(_nchw(batch.inputs))
        f = head_input(g, trunk_forward(g, x, nodes, trunk), alpha)
        h = g.apply("relu", [_conv(g, f, nodes, p + "conv1", padding=((0, 1), (0, 1)))])
        h = g.apply("relu", [_conv(g, h, nodes, p + "conv2")])
        return _conv(g, h, nodes, p + "out"), alpha
    if k is TaskKind.EXEMPLAR:
        _expect(batch, TripletBatch, task)
        b = len(batch.source)
        x = g.const(_nchw(np.concatenate([batch.x1, batch.x2, batch.x3])))
        f = g.apply("relu", [head_input(g, trunk_forward(g, x, nodes, trunk), alpha)])
        short = _conv(g, f, nodes, p + "proj", stride=2)
        r = g.apply("relu", [_conv(g, f, nodes, p + "conv1", stride=2, padding=1)])
        r = _conv(g, r, nodes, p + "conv2", padding=1)
        emb = g.apply("flatten", [g.apply("add", [short, r])])
        return [g.apply("take", [emb], indices=np.arange(i * b, (i + 1) * b)) for i in range(3)], alpha
    _expect(batch, MotionBatch, task)
    x = g.const(_nchw(batch.frames))
    f = head_input(g, trunk_forward(g, x, nodes, trunk), alpha)
    h = g.apply("relu", [_conv(g, f, nodes, p + "conv1")])
    h = g.apply("relu", [_conv(g, h, nodes, p + "conv2")])
    return _conv(g, h, nodes, p + "out"), alpha


def task_loss(task: TaskSpec, batch, g: Graph, nodes: dict[str, int], trunk: TrunkConfig, lam: float = 0.0) -> int:
    """Scalar training objective of one task on one batch.

    Includes the L1 penalty on this task's alpha row when lasso is on, and is
    multiplied by ``task.loss_scale``.
    """
    out, alpha = head_logits(task, batch, g, nodes, trunk)
    k = task.kind
    if k is TaskKind.RELATIVE_POSITION:
        per = g.apply("softmax-cross-entropy", [out], labels=batch.labels, axis=1)
    elif k is TaskKind.COLORIZATION:
        if g.shape(out)[2:] != batch.labels.shape[1:]:
            raise ShapeError(f"colorization: logits grid {g.shape(out)[2:]} != label grid {batch.labels.shape[1:]}")
        per = g.apply("softmax-cross-entropy", [out], labels=batch.labels, axis=1)
    elif k is TaskKind.EXEMPLAR:
        loss = triplet_loss(g, *out, task.margin)
        per = None
    else:
        logits = g.apply("reshape", [out], shape=batch.masks.shape)
        per = g.apply("sigmoid-cross-entropy", [logits], targets=batch.masks.astype(np.float64))
    if per is not None:
        loss = g.apply("reduce-mean", [per])
    if alpha is not None and lam > 0:
        loss = g.apply("add", [loss, lasso_penalty(g, [alpha], lam)])
    if task.loss_scale != 1.0:
        loss = g.apply("multiply", [loss, g.const(task.loss_scale)])
    return loss


def build_task_graph(task: TaskSpec, batch, params: dict[str, np.ndarray], trunk: TrunkConfig,
                     lam: float = 0.0, dtype=None) -> tuple[Graph, int]:
    """Fresh graph holding this task's parameters and its loss node."""
    g = Graph(dtype)
    nodes = register(g, params, task_param_names(task, trunk))
    return g, task_loss(task, batch, g, nodes, trunk, lam)
