"""Shared residual trunk and the lasso layer combiner.

The trunk is a stem convolution followed by ``units`` pre-activation residual
units that all keep one feature-map shape, so any unit output can be mixed
with any other. Each task head sees either the final unit output or a
row-normalized combination of all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, ShapeError


@dataclass(frozen=True)
class TrunkConfig:
    units: int = 8
    width: int = 8
    in_channels: int = 3
    stem_stride: int = 2
    # units with index >= dilate_from use dilation 2 (atrous), the rest dilation 1
    dilate_from: int = 4
    zero_init_residual: bool = False
    residual_scale: float = 0.5

    def __post_init__(self):
        if self.units < 1 or self.width < 1:
            raise ValueError("trunk needs at least one unit and one channel")

    def dilation(self, unit: int) -> int:
        return 2 if unit >= self.dilate_from else 1

    def param_names(self) -> list[str]:
        names = ["trunk.stem.w", "trunk.stem.b"]
        for m in range(self.units):
            names += [f"trunk.unit{m}.{p}" for p in ("w1", "b1", "w2", "b2")]
        return names


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_trunk(cfg: TrunkConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c = cfg.width
    p = {
        "trunk.stem.w": _he(rng, (c, cfg.in_channels, 3, 3)),
        "trunk.stem.b": np.zeros((c, 1, 1)),
    }
    for m in range(cfg.units):
        p[f"trunk.unit{m}.w1"] = _he(rng, (c, c, 3, 3))
        p[f"trunk.unit{m}.b1"] = np.zeros((c, 1, 1))
        w2 = _he(rng, (c, c, 3, 3)) * cfg.residual_scale
        p[f"trunk.unit{m}.w2"] = np.zeros_like(w2) if cfg.zero_init_residual else w2
        p[f"trunk.unit{m}.b2"] = np.zeros((c, 1, 1))
    return p


def register(graph: Graph, params: dict[str, np.ndarray], names) -> dict[str, int]:
    """Add the named arrays to ``graph`` as parameters."""
    return {n: graph.param(n, params[n]) for n in names}


def conv(graph: Graph, x: int, w: int, b: int | None = None, **attrs) -> int:
    y = graph.apply("conv2d", [x, w], **attrs)
    return y if b is None else graph.apply("add", [y, b])


def trunk_forward(graph: Graph, x: int, nodes: dict[str, int], cfg: TrunkConfig) -> list[int]:
    """Run the trunk on an NCHW input node; returns the ``units`` unit outputs."""
    shape = graph.shape(x)
    if len(shape) != 4 or shape[1] != cfg.in_channels:
        raise ShapeError(f"trunk: expected (N, {cfg.in_channels}, H, W) input, got {shape}")
    h = conv(graph, x, nodes["trunk.stem.w"], nodes["trunk.stem.b"], stride=cfg.stem_stride, padding=1)
    outputs = []
    for m in range(cfg.units):
        d = cfg.dilation(m)
        r = graph.apply("relu", [h])
        r = conv(graph, r, nodes[f"trunk.unit{m}.w1"], nodes[f"trunk.unit{m}.b1"], padding=d, dilation=d)
        r = graph.apply("relu", [r])
        r = conv(graph, r, nodes[f"trunk.unit{m}.w2"], nodes[f"trunk.unit{m}.b2"], padding=d, dilation=d)
        h = graph.apply("add", [h, r])
        outputs.append(h)
    return outputs


def stem_forward(graph: Graph, x: int, nodes: dict[str, int], cfg: TrunkConfig) -> int:
    return conv(graph, x, nodes["trunk.stem.w"], nodes["trunk.stem.b"], stride=cfg.stem_stride, padding=1)


def trunk_units(params: dict[str, np.ndarray], cfg: TrunkConfig, images: np.ndarray, dtype=None) -> list[np.ndarray]:
    """Numeric forward pass for frozen use; ``images`` is NCHW."""
    g = Graph(dtype)
    nodes = {n: g.const(params[n]) for n in cfg.param_names()}
    return [g.value(u) for u in trunk_forward(g, g.const(images), nodes, cfg)]


# ---------------------------------------------------------------------------
# lasso combiner
# ---------------------------------------------------------------------------

def normalize_rows(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    norm = np.sqrt(np.sum(beta * beta, axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ZeroDivisionError("alpha row with zero norm")
    return beta / norm


@dataclass
class AlphaMatrix:
    """Unconstrained ``beta`` rows; ``alpha`` is each row divided by its L2 norm."""
    task_ids: list[str]
    beta: np.ndarray
    role: str = "pretrain"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.ndim != 2 or self.beta.shape[0] != len(self.task_ids):
            raise ValueError(f"beta shape {self.beta.shape} does not match {len(self.task_ids)} tasks")
        if self.role not in ("pretrain", "eval"):
            raise ValueError(f"role must be pretrain or eval, got {self.role!r}")

    @classmethod
    def init(cls, task_ids, units: int, rng: np.random.Generator, role: str = "pretrain") -> "AlphaMatrix":
        return cls(list(task_ids), rng.uniform(-1.0, 1.0, size=(len(task_ids), units)), role)

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], role: str = "pretrain") -> "AlphaMatrix":
        prefix = f"alpha.{role}."
        ids = sorted(k[len(prefix):] for k in params if k.startswith(prefix))
        if not ids:
            return cls([], np.zeros((0, 0)), role)
        return cls(ids, np.stack([params[prefix + t] for t in ids]), role)

    def param_name(self, task_id: str) -> str:
        return alpha_param_name(self.role, task_id)

    def to_params(self) -> dict[str, np.ndarray]:
        return {self.param_name(t): self.beta[i].copy() for i, t in enumerate(self.task_ids)}

    @property
    def alpha(self) -> np.ndarray:
        return normalize_rows(self.beta) if self.beta.size else self.beta

    def penalty(self, lam: float) -> float:
        if lam < 0:
            raise ValueError("lasso lambda must be >= 0")
        return float(lam * np.abs(self.alpha).sum())


def alpha_param_name(role: str, task_id: str) -> str:
    return f"alpha.{role}.{task_id}"


def alpha_row(graph: Graph, beta_row: int) -> int:
    """Differentiable row normalization of a beta row node of shape (M,)."""
    return graph.apply("l2-normalize", [beta_row], axis=-1)


def lasso_combine(graph: Graph, alpha: int, units: list[int]) -> int:
    """Sum over m of alpha[m] * units[m]."""
    (m,) = graph.shape(alpha)
    if m != len(units):
        raise ShapeError(f"lasso_combine: alpha row has {m} entries but there are {len(units)} units")
    out = None
    for k, u in enumerate(units):
        term = graph.apply("multiply", [graph.apply("take", [alpha], indices=[k]), u])
        out = term if out is None else graph.apply("add", [out, term])
    return out


def lasso_penalty(graph: Graph, alpha_rows: list[int], lam: float) -> int:
    """lam times the sum of |alpha| over the given normalized rows."""
    if lam < 0:
        raise ValueError("lasso lambda must be >= 0")
    total = None
    for row in alpha_rows:
        s = graph.apply("reduce-sum", [graph.apply("abs", [row])])
        total = s if total is None else graph.apply("add", [total, s])
    if total is None:
        return graph.const(0.0)
    return graph.apply("multiply", [total, graph.const(lam)])


def head_input(graph: Graph, units: list[int], alpha: int | None) -> int:
    """Final unit output when lasso is off, otherwise the alpha combination."""
    return units[-1] if alpha is None else lasso_combine(graph, alpha, units)


@dataclass
class SparsityProfile:
    threshold: float
    abs_alpha: dict[str, list[float]] = field(default_factory=dict)
    fraction_below: dict[str, float] = field(default_factory=dict)

    @property
    def overall_fraction_below(self) -> float:
        vals = [v for row in self.abs_alpha.values() for v in row]
        return float(np.mean(np.array(vals) < self.threshold)) if vals else 0.0

    def records(self) -> list[dict]:
        """Rows for the metrics log: task-id, unit-index, abs-alpha."""
        return [
            {"task-id": t, "unit-index": m, "abs-alpha": v}
            for t, row in self.abs_alpha.items()
            for m, v in enumerate(row)
        ]


def sparsity_profile(alpha: AlphaMatrix, threshold: float = 0.01) -> SparsityProfile:
    """|alpha| per task, shallowest unit first, with the fraction under ``threshold``."""
    prof = SparsityProfile(threshold)
    a = np.abs(alpha.alpha)
    for i, t in enumerate(alpha.task_ids):
        prof.abs_alpha[t] = [float(v) for v in a[i]]
        prof.fraction_below[t] = float(np.mean(a[i] < threshold))
    return prof
