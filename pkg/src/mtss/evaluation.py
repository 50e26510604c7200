"""Transfer evaluations: frozen linear probe, fine-tuning, and depth regression."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import data
from .autodiff import Graph, param_grads
from .checkpoint import Checkpoint
from .config import EvalConfig, OptimizerConfig
from .data import stream
from .trainer import OptimizerState, rmsprop_apply
from .trunk import TrunkConfig, alpha_param_name, alpha_row, lasso_combine, register, trunk_forward, trunk_units


# ---------------------------------------------------------------------------
# depth metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DepthMetricsReport:
    pct_below_1_25: float
    pct_below_1_25_sq: float
    pct_below_1_25_cube: float
    mean_absolute_error: float
    mean_relative_error: float

    def __post_init__(self):
        pcts = (self.pct_below_1_25, self.pct_below_1_25_sq, self.pct_below_1_25_cube)
        if not all(0.0 <= p <= 100.0 for p in pcts) or not pcts[0] <= pcts[1] <= pcts[2]:
            raise AssertionError(f"threshold percentages out of order: {pcts}")
        if self.mean_absolute_error < 0 or self.mean_relative_error < 0:
            raise AssertionError("depth errors must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {
            "pct_below_1_25": self.pct_below_1_25,
            "pct_below_1_25_sq": self.pct_below_1_25_sq,
            "pct_below_1_25_cube": self.pct_below_1_25_cube,
            "mean_absolute_error": self.mean_absolute_error,
            "mean_relative_error": self.mean_relative_error,
        }


def depth_metrics(d_gt, d_p) -> DepthMetricsReport:
    """Threshold accuracies on max(gt/p, p/gt) plus absolute and relative error."""
    d_gt = np.asarray(d_gt, dtype=np.float64)
    d_p = np.asarray(d_p, dtype=np.float64)
    if d_gt.shape != d_p.shape:
        raise ValueError(f"depth maps differ in shape: {d_gt.shape} vs {d_p.shape}")
    if d_gt.size == 0:
        raise ValueError("empty depth maps")
    if np.any(~(d_gt > 0)) or np.any(~(d_p > 0)):
        raise ValueError("depth values must be strictly positive")
    ratio = np.maximum(d_gt / d_p, d_p / d_gt)
    err = np.abs(d_p - d_gt)
    n = ratio.size
    # exact counts and correctly rounded sums keep the result independent of summation order
    return DepthMetricsReport(
        100.0 * int(np.count_nonzero(ratio < 1.25)) / n,
        100.0 * int(np.count_nonzero(ratio < 1.25 ** 2)) / n,
        100.0 * int(np.count_nonzero(ratio < 1.25 ** 3)) / n,
        math.fsum(err.ravel().tolist()) / n,
        math.fsum((err / d_gt).ravel().tolist()) / n,
    )


# ---------------------------------------------------------------------------
# eval plumbing
# ---------------------------------------------------------------------------

class EvalKind(str, Enum):
    FROZEN_LINEAR = "frozen_linear"
    FINETUNE_CLASSIFY = "finetune"
    DEPTH_REGRESS = "depth"


@dataclass(frozen=True)
class EvalTaskSpec:
    kind: EvalKind
    eval: EvalConfig = EvalConfig()
    lasso: bool = False
    lasso_lambda: float = 1e-3
    seed: int = 0


@dataclass
class ClassificationResult:
    accuracy: float
    recall_at_k: float
    k: int
    steps: int
    alpha: list[float] | None = None

    def as_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "recall_at_k": self.recall_at_k, "k": self.k, "steps": self.steps}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out


@dataclass
class ClassificationSet:
    train_x: np.ndarray  # NCHW
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def _nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


def shape_benchmark(seed: int, train_size: int, test_size: int, size: int = 32) -> ClassificationSet:
    """The synthetic shape-classification transfer set."""
    xtr, ytr = data.shape_classification_set(stream(seed, "eval", "shapes", "train"), train_size, size)
    xte, yte = data.shape_classification_set(stream(seed, "eval", "shapes", "test"), test_size, size)
    return ClassificationSet(_nchw(xtr), ytr, _nchw(xte), yte)


def grid_pool_attrs(side: int, cells: int = 3) -> dict:
    """Max-pool kernel and stride giving a ``cells x cells`` output over ``side``."""
    if side < cells:
        raise ValueError(f"feature map side {side} smaller than pooling grid {cells}")
    stride = side // cells
    return {"kernel": side - (cells - 1) * stride, "stride": stride}


def _grid_features(g: Graph, fmap: int) -> int:
    side = g.shape(fmap)[2]
    return g.apply("flatten", [g.apply("maxpool2d", [fmap], **grid_pool_attrs(side))])


def _pooled(fmap: np.ndarray) -> np.ndarray:
    g = Graph(np.float64)
    return g.value(_grid_features(g, g.const(fmap)))


def _topk_metrics(logits: np.ndarray, labels: np.ndarray, k: int) -> tuple[float, float]:
    n_classes = logits.shape[1]
    if k > n_classes:
        raise ValueError(f"recall@{k} requested for {n_classes} classes")
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    # rank of the true class: number of classes scoring strictly higher
    true = logits[np.arange(len(labels)), labels]
    rank = np.sum(logits > true[:, None], axis=1)
    return acc, float(np.mean(rank < k))


def _check_classes(dataset: ClassificationSet, classes: int | None) -> int:
    found = dataset.classes
    if classes is not None and classes != found:
        raise ValueError(f"class count mismatch: expected {classes}, dataset has {found}")
    return found


def _trainer(lr: float) -> OptimizerState:
    base = OptimizerConfig()
    return OptimizerState(base.rho, lr, base.eps)


# ---------------------------------------------------------------------------
# frozen linear probe
# ---------------------------------------------------------------------------

def frozen_linear_eval(params: dict[str, np.ndarray], trunk: TrunkConfig, dataset: ClassificationSet,
                       cfg: EvalConfig = EvalConfig(), lasso: bool = False, lasso_lambda: float = 1e-3,
                       seed: int = 0, classes: int | None = None, patience: int = 40) -> ClassificationResult:
    """Train one softmax layer on frozen, grid max-pooled trunk features.

    Without lasso the feature is the last unit; with lasso an eval alpha row
    (unit-normalized, L1 penalized) mixes every unit and trains with the
    probe. Training is full-batch RMSProp for ``cfg.probe_steps`` steps with an
    early stop once the loss has not improved for ``patience`` steps.
    """
    n_classes = _check_classes(dataset, classes)
    if cfg.topk > n_classes:
        raise ValueError(f"recall@{cfg.topk} requested for {n_classes} classes")
    tr_units = trunk_units(params, trunk, dataset.train_x)
    te_units = trunk_units(params, trunk, dataset.test_x)
    rng = stream(seed, "eval", "probe")
    feat_dim = trunk.width * 9
    probe = {
        "probe.w": rng.normal(0, 0.01, (feat_dim, n_classes)),
        "probe.b": np.zeros((1, n_classes)),
    }
    beta_name = alpha_param_name("eval", "probe")
    if lasso:
        probe[beta_name] = np.full(trunk.units, 1.0) + rng.uniform(-0.1, 0.1, trunk.units)

    if not lasso:
        # the pooled feature is fixed, so pool once instead of every step
        tr_units = [_pooled(tr_units[-1])]
        te_units = [_pooled(te_units[-1])]

    def forward(units, p, labels=None):
        g = Graph(np.float64)
        nodes = register(g, p, list(p))
        if lasso:
            feats = _grid_features(g, lasso_combine(g, alpha_row(g, nodes[beta_name]), [g.const(u) for u in units]))
        else:
            feats = g.const(units[0])
        logits = g.apply("add", [g.apply("matmul", [feats, nodes["probe.w"]]), nodes["probe.b"]])
        if labels is None:
            return g, logits, None
        loss = g.apply("reduce-mean", [g.apply("softmax-cross-entropy", [logits], labels=labels, axis=1)])
        if lasso and lasso_lambda > 0:
            a = g.apply("reduce-sum", [g.apply("abs", [alpha_row(g, nodes[beta_name])])])
            loss = g.apply("add", [loss, g.apply("multiply", [a, g.const(lasso_lambda)])])
        return g, logits, loss

    opt = _trainer(cfg.probe_lr)
    best, since, step = np.inf, 0, 0
    for step in range(1, cfg.probe_steps + 1):
        g, _, loss = forward(tr_units, probe, dataset.train_y)
        value = g.value(loss).item()
        for k, d in rmsprop_apply(opt, param_grads(g, loss)).items():
            probe[k] = probe[k] + d
        if value < best - 1e-6:
            best, since = value, 0
        else:
            since += 1
            if since >= patience:
                break
    g, logits, _ = forward(te_units, probe)
    acc, rec = _topk_metrics(g.value(logits), dataset.test_y, cfg.topk)
    alpha = None
    if lasso:
        b = probe[beta_name]
        alpha = [float(v) for v in b / np.linalg.norm(b)]
    return ClassificationResult(acc, rec, cfg.topk, step, alpha)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _trunk_names(trunk: TrunkConfig) -> list[str]:
    return trunk.param_names()


def _minibatches(rng, n: int, batch: int):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield order[i:i + batch]


def _jitter(x: np.ndarray, rng, max_shift: int = 2) -> np.ndarray:
    """Translation augmentation: wrap-around shift per image."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
        out[i] = np.roll(x[i], (int(dy), int(dx)), axis=(1, 2))
    return out


def finetune_eval(params: dict[str, np.ndarray], trunk: TrunkConfig, dataset: ClassificationSet,
                  cfg: EvalConfig = EvalConfig(), seed: int = 0, classes: int | None = None) -> ClassificationResult:
    """Train trunk and a fresh grid-pooled linear head together; report test accuracy."""
    n_classes = _check_classes(dataset, classes)
    rng = stream(seed, "eval", "finetune")
    p = {k: params[k] for k in _trunk_names(trunk)}
    p["cls.w"] = rng.normal(0, 0.01, (trunk.width * 9, n_classes))
    p["cls.b"] = np.zeros((1, n_classes))
    names = list(p)

    def forward(x, labels=None):
        g = Graph(np.float64)
        nodes = register(g, p, names)
        units = trunk_forward(g, g.const(x), nodes, trunk)
        logits = g.apply("add", [g.apply("matmul", [_grid_features(g, units[-1]), nodes["cls.w"]]), nodes["cls.b"]])
        if labels is None:
            return g, logits
        return g, g.apply("reduce-mean", [g.apply("softmax-cross-entropy", [logits], labels=labels, axis=1)])

    opt = _trainer(cfg.finetune_lr)
    batches = _minibatches(rng, len(dataset.train_y), min(cfg.batch_size, len(dataset.train_y)))
    for _ in range(cfg.finetune_steps):
        idx = next(batches)
        g, loss = forward(_jitter(dataset.train_x[idx], rng), dataset.train_y[idx])
        for k, d in rmsprop_apply(opt, param_grads(g, loss)).items():
            p[k] = p[k] + d
    g, logits = forward(dataset.test_x)
    acc, rec = _topk_metrics(g.value(logits), dataset.test_y, min(cfg.topk, n_classes))
    return ClassificationResult(acc, rec, min(cfg.topk, n_classes), cfg.finetune_steps)


# ---------------------------------------------------------------------------
# depth regression
# ---------------------------------------------------------------------------

@dataclass
class DepthSet:
    train_x: np.ndarray
    train_d: np.ndarray  # (N, H', W') at the trunk's output resolution
    test_x: np.ndarray
    test_d: np.ndarray


def downsample_depth(depth: np.ndarray, factor: int) -> np.ndarray:
    """Mean over ``factor x factor`` cells (trailing rows/columns dropped)."""
    n, h, w = depth.shape
    h2, w2 = h // factor, w // factor
    return depth[:, :h2 * factor, :w2 * factor].reshape(n, h2, factor, w2, factor).mean(axis=(2, 4))


def depth_benchmark(seed: int, train_size: int, test_size: int, factor: int, size: int = 32) -> DepthSet:
    xtr, dtr = data.depth_set(stream(seed, "eval", "depth", "train"), train_size, size)
    xte, dte = data.depth_set(stream(seed, "eval", "depth", "test"), test_size, size)
    return DepthSet(_nchw(xtr), downsample_depth(dtr, factor), _nchw(xte), downsample_depth(dte, factor))


@dataclass
class DepthResult:
    report: DepthMetricsReport
    steps: int
    prediction_shape: tuple[int, ...]


def depth_eval(params: dict[str, np.ndarray], trunk: TrunkConfig, dataset: DepthSet,
               cfg: EvalConfig = EvalConfig(), seed: int = 0) -> DepthResult:
    """Fine-tune trunk plus a 1x1 log-depth head under the reverse Huber loss."""
    rng = stream(seed, "eval", "depth-head")
    p = {k: params[k] for k in _trunk_names(trunk)}
    p["depth.w"] = rng.normal(0, 0.01, (1, trunk.width, 1, 1))
    # start from the training set's mean log depth
    p["depth.b"] = np.full((1, 1, 1), float(np.mean(np.log(dataset.train_d))))
    names = list(p)

    def predict(g, nodes, x):
        units = trunk_forward(g, g.const(x), nodes, trunk)
        y = g.apply("add", [g.apply("conv2d", [units[-1], nodes["depth.w"]]), nodes["depth.b"]])
        n, _, h, w = g.shape(y)
        return g.apply("exp", [g.apply("reshape", [y], shape=(n, h, w))])

    opt = _trainer(cfg.finetune_lr)
    batches = _minibatches(rng, len(dataset.train_d), min(cfg.batch_size, len(dataset.train_d)))
    for _ in range(cfg.depth_steps):
        idx = next(batches)
        g = Graph(np.float64)
        nodes = register(g, p, names)
        pred = predict(g, nodes, dataset.train_x[idx])
        if g.shape(pred) != dataset.train_d[idx].shape:
            raise ValueError(f"depth head output {g.shape(pred)} does not match labels {dataset.train_d[idx].shape}")
        err = g.apply("subtract", [pred, g.const(dataset.train_d[idx])])
        loss = g.apply("reduce-mean", [g.apply("reverse-huber", [err])])
        for k, d in rmsprop_apply(opt, param_grads(g, loss)).items():
            p[k] = p[k] + d
    g = Graph(np.float64)
    pred = g.value(predict(g, register(g, p, names), dataset.test_x))
    if pred.shape != dataset.test_d.shape:
        raise ValueError(f"depth head output {pred.shape} does not match labels {dataset.test_d.shape}")
    return DepthResult(depth_metrics(dataset.test_d, pred), cfg.depth_steps, pred.shape)


# ---------------------------------------------------------------------------
# suite over a checkpoint
# ---------------------------------------------------------------------------

def evaluate_checkpoint(ckpt: Checkpoint, trunk: TrunkConfig, cfg: EvalConfig, seed: int,
                        lasso_eval: bool = False, lasso_lambda: float = 1e-3) -> dict[str, dict]:
    """Run every evaluation named in ``cfg.suite``; results keyed by evaluation."""
    out: dict[str, dict] = {}
    params = ckpt.params
    if "frozen_linear" in cfg.suite or "finetune" in cfg.suite:
        shapes = shape_benchmark(seed, cfg.train_size, cfg.test_size)
    if "frozen_linear" in cfg.suite:
        out["frozen_linear"] = frozen_linear_eval(params, trunk, shapes, cfg, lasso=lasso_eval,
                                                  lasso_lambda=lasso_lambda, seed=seed).as_dict()
    if "finetune" in cfg.suite:
        out["finetune"] = finetune_eval(params, trunk, shapes, cfg, seed=seed).as_dict()
    if "depth" in cfg.suite:
        dset = depth_benchmark(seed, cfg.depth_train_size, cfg.depth_test_size, trunk.stem_stride)
        out["depth"] = depth_eval(params, trunk, dset, cfg, seed=seed).report.as_dict()
    return out
