"""Finite-difference verification suites for the primitives and the task losses."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Graph, GradReport, grad_check
from .data import stream
from .tasks import TaskKind, TaskSpec, build_task_graph, init_head, sample_batch
from .trunk import TrunkConfig, alpha_param_name, init_trunk


def _weighted_sum(g: Graph, y: int, rng) -> int:
    """Random linear readout so every output element carries a distinct weight."""
    w = g.const(rng.normal(size=g.shape(y)))
    return g.apply("reduce-sum", [g.apply("multiply", [y, w])])


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x) + 0.0


def _case(kind: str, rng) -> tuple[Graph, int]:
    g = Graph(np.float64)
    if kind in ("add", "subtract", "multiply"):
        a = g.param("a", rng.normal(size=(3, 4)))
        b = g.param("b", rng.normal(size=(1, 4)))
        return g, _weighted_sum(g, g.apply(kind, [a, b]), rng)
    if kind == "matmul":
        a = g.param("a", rng.normal(size=(3, 4)))
        b = g.param("b", rng.normal(size=(4, 2)))
        return g, _weighted_sum(g, g.apply(kind, [a, b]), rng)
    if kind == "conv2d":
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = g.param("x", rng.normal(size=(2, 2, 5, 5)))
        w = g.param("w", rng.normal(size=(3, 2, 3, 3)))
        return g, _weighted_sum(g, g.apply(kind, [x, w], stride=stride, dilation=dil, padding=dil), rng)
    if kind == "maxpool2d":
        # distinct values so the argmax is stable under the probe step
        vals = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1 + rng.uniform(0, 0.01, (2, 2, 4, 4))
        x = g.param("x", vals)
        return g, _weighted_sum(g, g.apply(kind, [x], kernel=2), rng)
    if kind in ("relu", "abs"):
        x = g.param("x", _away_from_zero(rng, (3, 5)))
        return g, _weighted_sum(g, g.apply(kind, [x]), rng)
    if kind == "exp":
        x = g.param("x", rng.normal(size=(3, 5)) * 0.5)
        return g, _weighted_sum(g, g.apply(kind, [x]), rng)
    if kind == "l2-normalize":
        x = g.param("x", rng.normal(size=(3, 5)))
        return g, _weighted_sum(g, g.apply(kind, [x], axis=-1), rng)
    if kind == "cosine-distance":
        u = g.param("u", rng.normal(size=(3, 5)))
        v = g.param("v", rng.normal(size=(3, 5)))
        return g, _weighted_sum(g, g.apply(kind, [u, v]), rng)
    if kind == "softmax-cross-entropy":
        x = g.param("x", rng.normal(size=(2, 6, 3)))
        labels = rng.integers(6, size=(2, 3))
        return g, _weighted_sum(g, g.apply(kind, [x], labels=labels, axis=1), rng)
    if kind == "sigmoid-cross-entropy":
        x = g.param("x", rng.normal(size=(3, 4)) * 3)
        t = rng.integers(2, size=(3, 4))
        return g, _weighted_sum(g, g.apply(kind, [x], targets=t), rng)
    if kind == "reverse-huber":
        x = g.param("x", _away_from_zero(rng, (4, 5)))
        y = g.apply(kind, [x])
        c = g.nodes[y].attrs["c"]
        # keep every entry clear of the |x| = c branch point
        vals = g.value(x)
        if np.min(np.abs(np.abs(vals) - c)) < 1e-3:
            return _case(kind, rng)
        return g, _weighted_sum(g, y, rng)
    if kind in ("reduce-sum", "reduce-mean"):
        x = g.param("x", rng.normal(size=(2, 3, 4)))
        axis = [None, 0, (1, 2)][int(rng.integers(3))]
        y = g.apply(kind, [x]) if axis is None else g.apply(kind, [x], axis=axis)
        return g, _weighted_sum(g, y, rng)
    if kind == "concat":
        a = g.param("a", rng.normal(size=(2, 3)))
        b = g.param("b", rng.normal(size=(2, 2)))
        return g, _weighted_sum(g, g.apply(kind, [a, b], axis=1), rng)
    if kind == "flatten":
        x = g.param("x", rng.normal(size=(2, 3, 2, 2)))
        return g, _weighted_sum(g, g.apply(kind, [x]), rng)
    if kind == "reshape":
        x = g.param("x", rng.normal(size=(2, 6)))
        return g, _weighted_sum(g, g.apply(kind, [x], shape=(3, 4)), rng)
    if kind == "take":
        x = g.param("x", rng.normal(size=(4, 3)))
        return g, _weighted_sum(g, g.apply(kind, [x], indices=[3, 0, 3]), rng)
    raise KeyError(kind)


PRIMITIVE_KINDS = (
    "add", "subtract", "multiply", "matmul", "conv2d", "maxpool2d", "relu", "abs", "exp",
    "l2-normalize", "cosine-distance", "softmax-cross-entropy", "sigmoid-cross-entropy",
    "reverse-huber", "reduce-sum", "reduce-mean", "concat", "flatten", "reshape", "take",
)


def check_primitive(kind: str, trials: int = 20, seed: int = 0, tol: float = 1e-5, step: float = 1e-6) -> GradReport:
    """Worst report over ``trials`` random cases of one primitive."""
    worst = GradReport(tol=tol)
    for t in range(trials):
        g, loss = _case(kind, stream(seed, "primitive", kind, t))
        rep = grad_check(g, loss, step, tol)
        if rep.worst >= worst.worst:
            worst = rep
    return worst


def tiny_task(kind: TaskKind, lasso: bool = True) -> TaskSpec:
    small = kind in (TaskKind.COLORIZATION, TaskKind.MOTION_SEGMENTATION)
    return TaskSpec(task_id=kind.value[:3], kind=kind, batch_size=2, hidden=4, embed=3, bins=3,
                    lasso=lasso, image_size=8 if small else 16, grid=2, patch=4, jitter=0)


TINY_TRUNK = TrunkConfig(units=2, width=2, dilate_from=1)


def tiny_params(task: TaskSpec, trunk: TrunkConfig, rng) -> dict[str, np.ndarray]:
    """Initial parameters with biases moved off zero so no ReLU sits exactly on its kink."""
    params = init_trunk(trunk, rng)
    params.update(init_head(task, trunk, rng))
    for k, v in params.items():
        if k.endswith(".b") or k.split(".")[-1].startswith("b"):
            params[k] = v + rng.uniform(0.05, 0.2, v.shape) * rng.choice([-1, 1], v.shape)
    if task.lasso:
        params[alpha_param_name("pretrain", task.task_id)] = rng.uniform(-1, 1, trunk.units)
    return params


def check_task(kind: TaskKind, seed: int = 0, tol: float = 1e-5, step: float = 1e-6, lam: float = 1e-2) -> GradReport:
    """End-to-end check (trunk, lasso combiner, head, loss) on a tiny configuration."""
    task = tiny_task(kind)
    rng = stream(seed, "gradcheck", kind.value)
    params = tiny_params(task, TINY_TRUNK, rng)
    batch = sample_batch(task, rng)
    g, loss = build_task_graph(task, batch, params, TINY_TRUNK, lam=lam, dtype=np.float64)
    return grad_check(g, loss, step, tol)


def run_all(seed: int = 0, tol: float = 1e-5, log: Callable[[str], None] | None = None) -> dict[str, GradReport]:
    reports = {}
    for kind in PRIMITIVE_KINDS:
        reports[f"primitive:{kind}"] = check_primitive(kind, seed=seed, tol=tol)
    for kind in TaskKind:
        reports[f"task:{kind.value}"] = check_task(kind, seed=seed, tol=tol)
    if log is not None:
        for name, rep in reports.items():
            log(f"{'PASS' if rep.passed else 'FAIL'} {name} max_rel_err={rep.worst:.3e}")
    return reports
