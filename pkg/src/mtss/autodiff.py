"""Minimal reverse-mode differentiation over an append-only graph.

A :class:`Graph` evaluates eagerly: every node's value is computed when the
node is appended, and the (kind, inputs, attrs) triple is kept so the graph
can be replayed with different leaf values (which is how :func:`grad_check`
probes central differences).

Arrays are laid out NCHW for image-like tensors and (batch, features) for
dense ones.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class UnknownPrimitiveError(KeyError):
    pass


def default_dtype() -> np.dtype:
    """Float dtype selected by ``MTSS_PRECISION`` (64 unless set to 32)."""
    bits = os.environ.get("MTSS_PRECISION", "64").strip()
    if bits not in ("32", "64"):
        raise ValueError(f"MTSS_PRECISION must be 32 or 64, got {bits!r}")
    return np.dtype(np.float32 if bits == "32" else np.float64)


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    needs_grad: bool


class Graph:
    """Append-only computation graph with eager forward evaluation."""

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, kind: str, value, attrs: dict, needs_grad: bool) -> int:
        arr = np.array(value, dtype=self.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        self.nodes.append(Node(kind, (), attrs, needs_grad))
        self.values.append(arr)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> int:
        """Add a trainable leaf; ``name`` must be unique within the graph."""
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        nid = self._leaf("param", value, {"name": name}, True)
        self.params[name] = nid
        return nid

    def const(self, value) -> int:
        return self._leaf("const", value, {}, False)

    def apply(self, kind: str, inputs: Sequence[int], **attrs) -> int:
        return apply_primitive(self, kind, inputs, attrs)

    def value(self, nid: int) -> np.ndarray:
        return self.values[nid]

    def shape(self, nid: int) -> tuple[int, ...]:
        return self.values[nid].shape

    def replay(self, overrides: dict[int, np.ndarray]) -> list[np.ndarray]:
        """Recompute every node with some leaf values replaced."""
        out: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.kind in ("param", "const"):
                v = overrides.get(nid)
                out.append(self.values[nid] if v is None else np.asarray(v, self.dtype))
            else:
                prim = PRIMITIVES[node.kind]
                out.append(prim.forward([out[i] for i in node.inputs], node.attrs))
        return out


@dataclass
class Primitive:
    forward: Callable[[list[np.ndarray], dict], np.ndarray]
    # backward(inputs, output, grad_output, attrs) -> one gradient per input
    backward: Callable[[list[np.ndarray], np.ndarray, np.ndarray, dict], list]
    check: Callable[[list, dict], dict | None] | None = None
    arity: int | None = None
    # check receives input arrays instead of shapes
    check_values: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def primitive(kind: str, arity: int | None = None, check=None, check_values: bool = False):
    def register(pair):
        fwd, bwd = pair
        PRIMITIVES[kind] = Primitive(fwd, bwd, check, arity, check_values)
        return pair
    return register


def apply_primitive(graph: Graph, kind: str, inputs: Sequence[int], attrs: dict | None = None) -> int:
    """Append a primitive node to ``graph`` and return its node id.

    ``check`` hooks validate shapes and may resolve data-dependent attributes
    (the reverse-Huber threshold) so that replays use the same constants.
    """
    if kind not in PRIMITIVES:
        raise UnknownPrimitiveError(f"unknown primitive kind {kind!r}")
    prim = PRIMITIVES[kind]
    attrs = dict(attrs or {})
    inputs = tuple(int(i) for i in inputs)
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(f"{kind}: expected {prim.arity} inputs, got {len(inputs)}")
    for i in inputs:
        if not 0 <= i < len(graph.nodes):
            raise ValueError(f"{kind}: input node {i} does not exist")
    vals = [graph.values[i] for i in inputs]
    if prim.check is not None:
        resolved = prim.check(vals if prim.check_values else [v.shape for v in vals], attrs)
        if resolved:
            attrs.update(resolved)
    out = np.asarray(prim.forward(vals, attrs), dtype=graph.dtype)
    out.setflags(write=False)
    needs = any(graph.nodes[i].needs_grad for i in inputs)
    graph.nodes.append(Node(kind, inputs, attrs, needs))
    graph.values.append(out)
    return len(graph.nodes) - 1


def backward(graph: Graph, loss: int) -> dict[int, np.ndarray]:
    """Gradients of a scalar node with respect to every node that needs one.

    Parameters that the loss does not depend on receive exact zeros.
    """
    lv = graph.values[loss]
    if lv.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {lv.shape}")
    grads: dict[int, np.ndarray] = {loss: np.ones_like(lv)}
    for nid in range(loss, -1, -1):
        g = grads.get(nid)
        node = graph.nodes[nid]
        if g is None or not node.inputs:
            continue
        prim = PRIMITIVES[node.kind]
        ins = [graph.values[i] for i in node.inputs]
        in_grads = prim.backward(ins, graph.values[nid], g, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not graph.nodes[i].needs_grad:
                continue
            gi = np.asarray(gi, dtype=graph.dtype).reshape(graph.values[i].shape)
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for pid in graph.params.values():
        if pid not in grads:
            grads[pid] = np.zeros_like(graph.values[pid])
    return grads


def param_grads(graph: Graph, loss: int) -> dict[str, np.ndarray]:
    """``backward`` keyed by parameter name instead of node id."""
    grads = backward(graph, loss)
    return {name: grads[nid] for name, nid in graph.params.items()}


@dataclass
class GradReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def grad_check(graph: Graph, loss: int, step: float = 1e-6, tol: float = 1e-5) -> GradReport:
    """Compare analytic gradients with central differences per scalar parameter.

    Relative error uses ``max(1, |analytic|)`` as the denominator.
    """
    if graph.dtype != np.float64:
        raise ValueError("grad_check requires a 64-bit graph")
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-7, 1e-4], got {step}")
    report = GradReport(tol=tol)
    if not graph.params:
        return report
    analytic = backward(graph, loss)
    for name, pid in graph.params.items():
        base = graph.values[pid]
        flat = base.reshape(-1)
        worst = 0.0
        ana = analytic[pid].reshape(-1)
        for k in range(flat.size):
            probe = flat.copy()
            probe[k] = flat[k] + step
            f_plus = graph.replay({pid: probe.reshape(base.shape)})[loss].item()
            probe[k] = flat[k] - step
            f_minus = graph.replay({pid: probe.reshape(base.shape)})[loss].item()
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(numeric - ana[k]) / max(1.0, abs(ana[k]))
            worst = max(worst, err)
        report.max_rel_error[name] = worst
    return report


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(kind):
    def check(shapes, attrs):
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(f"{kind}: cannot broadcast shapes {shapes[0]} and {shapes[1]}") from None
    return check


primitive("add", 2, _broadcast_check("add"))((
    lambda x, a: x[0] + x[1],
    lambda x, y, g, a: [_unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)],
))

primitive("subtract", 2, _broadcast_check("subtract"))((
    lambda x, a: x[0] - x[1],
    lambda x, y, g, a: [_unbroadcast(g, x[0].shape), -_unbroadcast(g, x[1].shape)],
))

primitive("multiply", 2, _broadcast_check("multiply"))((
    lambda x, a: x[0] * x[1],
    lambda x, y, g, a: [_unbroadcast(g * x[1], x[0].shape), _unbroadcast(g * x[0], x[1].shape)],
))


def _matmul_check(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"matmul: expected (n,k)@(k,m), got {a} @ {b}")


primitive("matmul", 2, _matmul_check)((
    lambda x, a: x[0] @ x[1],
    lambda x, y, g, a: [g @ x[1].T, x[0].T @ g],
))

primitive("relu", 1)((
    lambda x, a: np.maximum(x[0], 0.0),
    lambda x, y, g, a: [g * (x[0] > 0)],
))

# sign(0) = 0, so the subgradient at the kink is zero
primitive("abs", 1)((
    lambda x, a: np.abs(x[0]),
    lambda x, y, g, a: [g * np.sign(x[0])],
))

primitive("exp", 1)((
    lambda x, a: np.exp(x[0]),
    lambda x, y, g, a: [g * y],
))


def _reduce_check(shapes, attrs):
    axis = attrs.get("axis")
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    nd = len(shapes[0])
    for ax in axes:
        if not -nd <= ax < nd:
            raise ShapeError(f"reduce: axis {ax} out of range for shape {shapes[0]}")
    return {"axis": tuple(ax % nd for ax in axes)}


def _reduce_backward(x, y, g, a, mean):
    shape = x[0].shape
    axis = a.get("axis")
    if axis is None:
        n = x[0].size
        gx = np.broadcast_to(g.reshape(()) if g.size == 1 else g, shape)
    else:
        n = int(np.prod([shape[ax] for ax in axis]))
        kept = [1 if ax in axis else d for ax, d in enumerate(shape)]
        gx = np.broadcast_to(g.reshape(kept), shape)
    return [gx / n if mean else gx.copy()]


primitive("reduce-sum", 1, _reduce_check)((
    lambda x, a: np.sum(x[0], axis=a.get("axis")),
    lambda x, y, g, a: _reduce_backward(x, y, g, a, mean=False),
))

primitive("reduce-mean", 1, _reduce_check)((
    lambda x, a: np.mean(x[0], axis=a.get("axis")),
    lambda x, y, g, a: _reduce_backward(x, y, g, a, mean=True),
))


def _concat_check(shapes, attrs):
    axis = attrs.get("axis", 0)
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref) or any(d1 != d2 for k, (d1, d2) in enumerate(zip(ref, s)) if k != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {s} differ off axis {axis}")
    return {"axis": axis % len(ref)}


def _concat_backward(x, y, g, a):
    splits = np.cumsum([v.shape[a["axis"]] for v in x])[:-1]
    return np.split(g, splits, axis=a["axis"])


primitive("concat", None, _concat_check)((
    lambda x, a: np.concatenate(x, axis=a["axis"]),
    _concat_backward,
))

primitive("flatten", 1)((
    lambda x, a: x[0].reshape(x[0].shape[0], -1),
    lambda x, y, g, a: [g.reshape(x[0].shape)],
))


def _reshape_check(shapes, attrs):
    target = tuple(attrs["shape"])
    if int(np.prod(target)) != int(np.prod(shapes[0])):
        raise ShapeError(f"reshape: cannot reshape {shapes[0]} into {target}")
    return {"shape": target}


primitive("reshape", 1, _reshape_check)((
    lambda x, a: x[0].reshape(a["shape"]),
    lambda x, y, g, a: [g.reshape(x[0].shape)],
))


def _take_check(shapes, attrs):
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    n = shapes[0][0]
    if idx.ndim != 1 or (idx.size and (idx.min() < -n or idx.max() >= n)):
        raise ShapeError(f"take: indices out of range for leading dim {n}")
    return {"indices": idx}


def _take_backward(x, y, g, a):
    gx = np.zeros_like(x[0])
    np.add.at(gx, a["indices"], g)
    return [gx]


# gathers rows along axis 0; used to regroup siamese batches
primitive("take", 1, _take_check)((
    lambda x, a: x[0][a["indices"]],
    _take_backward,
))


def _conv_geometry(xs, ws, attrs):
    n, c, h, w = xs
    o, ci, kh, kw = ws
    stride = int(attrs.get("stride", 1))
    dil = int(attrs.get("dilation", 1))
    pad = attrs.get("padding", 0)
    if isinstance(pad, int):
        pad = ((pad, pad), (pad, pad))
    pad = tuple(tuple(int(p) for p in pr) for pr in pad)
    ho = (h + pad[0][0] + pad[0][1] - dil * (kh - 1) - 1) // stride + 1
    wo = (w + pad[1][0] + pad[1][1] - dil * (kw - 1) - 1) // stride + 1
    return stride, dil, pad, ho, wo


def _conv_check(shapes, attrs):
    xs, ws = shapes
    if len(xs) != 4 or len(ws) != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIHW kernel, got {xs} and {ws}")
    if xs[1] != ws[1]:
        raise ShapeError(f"conv2d: input channels {xs[1]} != kernel channels {ws[1]}")
    if int(attrs.get("dilation", 1)) < 1 or int(attrs.get("stride", 1)) < 1:
        raise ShapeError("conv2d: stride and dilation must be >= 1")
    stride, dil, pad, ho, wo = _conv_geometry(xs, ws, attrs)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {ws[2:]} (dilation {dil}) larger than padded input {xs[2:]}")
    return {"stride": stride, "dilation": dil, "padding": pad}


def _conv_windows(xp, kh, kw, stride, dil, ho, wo):
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dil, j * dil
            sl = (slice(None), slice(None),
                  slice(r0, r0 + stride * (ho - 1) + 1, stride),
                  slice(c0, c0 + stride * (wo - 1) + 1, stride))
            yield i, j, sl


def _conv_forward(x, a):
    inp, wt = x
    stride, dil, pad, ho, wo = _conv_geometry(inp.shape, wt.shape, a)
    xp = np.pad(inp, ((0, 0), (0, 0)) + pad)
    out = np.zeros((inp.shape[0], wt.shape[0], ho, wo), dtype=np.result_type(inp, wt))
    for i, j, sl in _conv_windows(xp, wt.shape[2], wt.shape[3], stride, dil, ho, wo):
        out += np.einsum("nchw,oc->nohw", xp[sl], wt[:, :, i, j])
    return out


def _conv_backward(x, y, g, a):
    inp, wt = x
    stride, dil, pad, ho, wo = _conv_geometry(inp.shape, wt.shape, a)
    xp = np.pad(inp, ((0, 0), (0, 0)) + pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wt)
    for i, j, sl in _conv_windows(xp, wt.shape[2], wt.shape[3], stride, dil, ho, wo):
        gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
        gxp[sl] += np.einsum("nohw,oc->nchw", g, wt[:, :, i, j])
    h, w = inp.shape[2:]
    gx = gxp[:, :, pad[0][0]:pad[0][0] + h, pad[1][0]:pad[1][0] + w]
    return [gx, gw]


primitive("conv2d", 2, _conv_check)((_conv_forward, _conv_backward))


def _pool_check(shapes, attrs):
    (xs,) = shapes
    if len(xs) != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {xs}")
    k = int(attrs["kernel"])
    s = int(attrs.get("stride", k))
    if k < 1 or s < 1 or k > xs[2] or k > xs[3]:
        raise ShapeError(f"maxpool2d: kernel {k} does not fit input {xs[2:]}")
    return {"kernel": k, "stride": s}


def _pool_windows(shape, k, s):
    ho = (shape[2] - k) // s + 1
    wo = (shape[3] - k) // s + 1
    for i in range(k):
        for j in range(k):
            yield (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))


def _pool_forward(x, a):
    out = None
    for sl in _pool_windows(x[0].shape, a["kernel"], a["stride"]):
        out = x[0][sl].copy() if out is None else np.maximum(out, x[0][sl])
    return out


def _pool_backward(x, y, g, a):
    gx = np.zeros_like(x[0])
    taken = np.zeros(y.shape, dtype=bool)
    # ties route to the first window position in scan order
    for sl in _pool_windows(x[0].shape, a["kernel"], a["stride"]):
        hit = (x[0][sl] == y) & ~taken
        gx[sl] += np.where(hit, g, 0.0)
        taken |= hit
    return [gx]


primitive("maxpool2d", 1, _pool_check)((_pool_forward, _pool_backward))


def _l2n_forward(x, a):
    axis = a.get("axis", -1)
    norm = np.sqrt(np.sum(x[0] * x[0], axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ZeroDivisionError("l2-normalize: zero-norm slice")
    return x[0] / norm


def _l2n_backward(x, y, g, a):
    axis = a.get("axis", -1)
    norm = np.sqrt(np.sum(x[0] * x[0], axis=axis, keepdims=True))
    return [(g - y * np.sum(y * g, axis=axis, keepdims=True)) / norm]


primitive("l2-normalize", 1)((_l2n_forward, _l2n_backward))


def _pair_check(kind):
    def check(shapes, attrs):
        a, b = shapes
        if a != b or len(a) != 2:
            raise ShapeError(f"{kind}: expected two equal (batch, dim) shapes, got {a} and {b}")
    return check


def _cos_parts(u, v):
    nu = np.sqrt(np.sum(u * u, axis=1))
    nv = np.sqrt(np.sum(v * v, axis=1))
    if np.any(nu == 0) or np.any(nv == 0):
        raise ZeroDivisionError("cosine-distance: zero-norm embedding")
    return nu, nv, np.sum(u * v, axis=1)


def _cos_forward(x, a):
    nu, nv, dot = _cos_parts(*x)
    return 1.0 - dot / (nu * nv)


def _cos_backward(x, y, g, a):
    u, v = x
    nu, nv, dot = _cos_parts(u, v)
    cos = (dot / (nu * nv))[:, None]
    gu = -(v / (nu * nv)[:, None] - cos * u / (nu * nu)[:, None])
    gv = -(u / (nu * nv)[:, None] - cos * v / (nv * nv)[:, None])
    return [gu * g[:, None], gv * g[:, None]]


primitive("cosine-distance", 2, _pair_check("cosine-distance"))((_cos_forward, _cos_backward))


def _labels_check(kind):
    def check(shapes, attrs):
        (ls,) = shapes
        axis = attrs.get("axis", -1) % len(ls)
        labels = np.asarray(attrs["labels"], dtype=np.int64)
        expect = ls[:axis] + ls[axis + 1:]
        if labels.shape != expect:
            raise ShapeError(f"{kind}: labels shape {labels.shape} != logits shape {ls} without axis {axis} {expect}")
        if labels.size and (labels.min() < 0 or labels.max() >= ls[axis]):
            raise ShapeError(f"{kind}: labels outside [0, {ls[axis]})")
        return {"axis": axis, "labels": labels}
    return check


def _log_softmax(z, axis):
    m = np.max(z, axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def _sce_forward(x, a):
    lsm = _log_softmax(x[0], a["axis"])
    picked = np.take_along_axis(lsm, np.expand_dims(a["labels"], a["axis"]), axis=a["axis"])
    return -np.squeeze(picked, axis=a["axis"])


def _sce_backward(x, y, g, a):
    axis = a["axis"]
    p = np.exp(_log_softmax(x[0], axis))
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, np.expand_dims(a["labels"], axis), 1.0, axis=axis)
    return [(p - onehot) * np.expand_dims(g, axis)]


# per-position loss; the class axis is reduced away
primitive("softmax-cross-entropy", 1, _labels_check("softmax-cross-entropy"))((_sce_forward, _sce_backward))


def _bce_check(shapes, attrs):
    (ls,) = shapes
    t = np.asarray(attrs["targets"], dtype=np.float64)
    if t.shape != ls:
        raise ShapeError(f"sigmoid-cross-entropy: targets shape {t.shape} != logits shape {ls}")
    return {"targets": t}


def _bce_forward(x, a):
    z, t = x[0], a["targets"]
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def _bce_backward(x, y, g, a):
    z = x[0]
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return [(sig - a["targets"]) * g]


primitive("sigmoid-cross-entropy", 1, _bce_check)((_bce_forward, _bce_backward))


def berhu_threshold(err: np.ndarray, fraction: float = 0.2) -> float:
    """Batch threshold ``fraction * max|err|`` (floored to keep it positive)."""
    return max(fraction * float(np.max(np.abs(err))), 1e-12)


def _berhu_check(vals, attrs):
    c = attrs.get("c")
    if c is None:
        c = berhu_threshold(vals[0], attrs.get("fraction", 0.2))
    if c <= 0:
        raise ValueError("reverse-huber: threshold must be positive")
    return {"c": float(c)}


def _berhu_forward(x, a):
    e, c = x[0], a["c"]
    ae = np.abs(e)
    return np.where(ae <= c, ae, (e * e + c * c) / (2.0 * c))


def _berhu_backward(x, y, g, a):
    e, c = x[0], a["c"]
    return [g * np.where(np.abs(e) <= c, np.sign(e), e / c)]


# threshold is resolved once per node (per batch) and treated as a constant
primitive("reverse-huber", 1, _berhu_check, check_values=True)((_berhu_forward, _berhu_backward))
