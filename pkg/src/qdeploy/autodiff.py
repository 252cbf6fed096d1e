"""A small reverse-mode autodiff engine over a topologically ordered node list.

Nodes are appended in evaluation order, so the list itself is the
topological order (a Wengert list). Each op kind registers a forward and a
backward function; backward returns one gradient per input (``None`` for
inputs that take no gradient).

Activations are NHWC and convolution weights [out, in, kh, kw], matching the
int8 engine so that the two paths index tensors identically.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import numpy as np

from .engine import im2col, resolve_bias_frac, resolve_out_frac
from .errors import InvalidInputError, NumericError, StateError
from .quant import (
    QFormat,
    asymmetric_mask,
    asymmetric_params,
    choose_qformat,
    fake_quant,
    fake_quant_asymmetric,
    ste_mask,
    tracker_format,
    update_minmax,
    update_range,
)


class TrainMode(str, Enum):
    FP32 = "fp32"
    QAT_TRAIN = "qat-train"
    QAT_EVAL = "qat-eval"


TRAINING_MODES = (TrainMode.FP32, TrainMode.QAT_TRAIN)


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str = ""
    value: Any = None
    grad: Any = None
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class _Ctx:
    graph: "Graph"
    mode: TrainMode
    dtype: Any
    formats: dict


@dataclass(frozen=True)
class Op:
    forward: Callable
    backward: Callable | None = None


OPS: dict[str, Op] = {}


def register(name: str, backward: Callable | None = None):
    def deco(fwd):
        OPS[name] = Op(fwd, backward)
        return fwd

    return deco


class Graph:
    """Node list plus named parameters (raw fp32 trainables) and outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.outputs: dict[str, int] = {}
        self.meta: dict = {}
        self.frozen = False
        self._by_name: dict[str, int] = {}
        self._last_mode: TrainMode | None = None

    def add(self, op: str, inputs=(), name: str | None = None, **attrs) -> int:
        if op not in OPS:
            raise InvalidInputError(f"unknown op kind {op!r}")
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise InvalidInputError(f"input {i} of {op} does not precede it")
        nid = len(self.nodes)
        name = name or f"{op}_{nid}"
        if name in self._by_name:
            raise InvalidInputError(f"duplicate node name {name!r}")
        self.nodes.append(Node(nid, op, inputs, attrs, name))
        self._by_name[name] = nid
        return nid

    def input(self, name: str, shape, integer: bool = False) -> int:
        return self.add("input", name=name, shape=tuple(shape), integer=integer)

    def param(self, name: str, value) -> int:
        self.params[name] = np.asarray(value, dtype=np.float32).copy()
        return self.add("param", name=name)

    def node(self, ref) -> Node:
        return self.nodes[ref if isinstance(ref, (int, np.integer)) else self._by_name[ref]]

    def fake_quant_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "fake_quant"]

    def freeze(self):
        self.frozen = True

    def unfreeze(self):
        self.frozen = False

    def copy(self) -> "Graph":
        g = copy.copy(self)
        g.nodes = [
            Node(n.id, n.op, n.inputs, copy.deepcopy(n.attrs), n.name) for n in self.nodes
        ]
        g.params = {k: v.copy() for k, v in self.params.items()}
        g.outputs = dict(self.outputs)
        g.meta = copy.deepcopy(self.meta)
        g._by_name = dict(self._by_name)
        g._last_mode = None
        return g

    def formats(self) -> dict[int, QFormat]:
        """Formats every fake_quant node would use right now, without running data."""
        memo: dict[int, QFormat] = {}
        for n in self.fake_quant_nodes():
            x = None
            if n.attrs["role"] in ("weight", "bias"):
                x = self.params[self.nodes[n.inputs[0]].name]
            memo[n.id] = resolve_format(self, n, memo, x)
        return memo


def resolve_format(graph: Graph, node: Node, memo: dict, x=None) -> QFormat:
    """Format of a fake_quant node given the formats already resolved upstream.

    Roles: ``fixed`` (declared frac_bits), ``activation`` (EMA tracker),
    ``weight`` (max-abs of the current tensor), ``bias`` and ``output``
    (chosen like weight/activation, then clamped so the kernel's shifts stay
    legal).
    """
    a = node.attrs
    bits = a.get("bits", 8)
    role = a["role"]
    explicit = a.get("frac_bits")
    if role == "fixed" or explicit is not None:
        return QFormat(bits, int(explicit))
    if role == "activation":
        return tracker_format(a["tracker"], bits)
    if role == "weight":
        return choose_qformat(float(np.max(np.abs(x))) if x.size else 0.0, bits)
    frac_in = memo[a["in_fq"]].frac_bits
    frac_wt = memo[a["wt_fq"]].frac_bits
    if role == "bias":
        wanted = choose_qformat(float(np.max(np.abs(x))) if x.size else 0.0, bits).frac_bits
        return QFormat(bits, resolve_bias_frac(wanted, frac_in, frac_wt, a["fan_in"], a.get("gate", True)))
    if role == "output":
        wanted = tracker_format(a["tracker"], bits).frac_bits
        return QFormat(bits, resolve_out_frac(wanted, frac_in, frac_wt))
    raise InvalidInputError(f"unknown fake_quant role {role!r}")


def forward(graph: Graph, inputs: dict, mode: TrainMode | str = TrainMode.FP32,
            dtype=None, upto: int | None = None) -> dict:
    """Evaluate every node in order; return the graph's named outputs.

    qat-eval computes in float64 so the fixed-point arithmetic it replays is
    exact; the training modes use float32 unless ``dtype`` overrides it.
    """
    mode = TrainMode(mode)
    if dtype is None:
        dtype = np.float64 if mode is TrainMode.QAT_EVAL else np.float32
    ctx = _Ctx(graph, mode, np.dtype(dtype), {})
    last = len(graph.nodes) if upto is None else upto + 1
    for node in graph.nodes[:last]:
        args = [graph.nodes[i].value for i in node.inputs]
        if node.op == "input":
            node.value = _feed(node, inputs, ctx)
        else:
            node.value = OPS[node.op].forward(node, args, ctx)
        node.grad = None
        v = node.value
        if isinstance(v, np.ndarray) and v.dtype.kind == "f" and not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite value produced by node {node.id} ({node.name})", node.id)
    graph._last_mode = mode
    return {k: graph.nodes[i].value for k, i in graph.outputs.items() if i < last}


def _feed(node: Node, inputs: dict, ctx: _Ctx):
    if node.name not in inputs:
        raise InvalidInputError(f"missing input {node.name!r}")
    v = np.asarray(inputs[node.name])
    shape = node.attrs.get("shape")
    if shape is not None and tuple(v.shape[1:]) != tuple(shape):
        raise InvalidInputError(f"input {node.name!r} has shape {v.shape[1:]}, expected {shape}")
    if node.attrs.get("integer"):
        return v.astype(np.int64)
    return v.astype(ctx.dtype)


def backward(graph: Graph, loss=None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar node; returns gradients keyed by parameter name."""
    if graph._last_mode is None:
        raise StateError("backward called before forward")
    if graph._last_mode not in TRAINING_MODES:
        raise StateError(f"backward needs a training-mode forward, last was {graph._last_mode.value}")
    loss_id = graph.outputs["loss"] if loss is None else graph.node(loss).id
    root = graph.nodes[loss_id]
    if root.value is None:
        raise StateError("loss node has not been evaluated")
    for n in graph.nodes:
        n.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(graph.nodes[: loss_id + 1]):
        if node.grad is None or not node.inputs:
            continue
        op = OPS[node.op]
        if op.backward is None:
            continue
        args = [graph.nodes[i].value for i in node.inputs]
        grads = op.backward(node, node.grad, args)
        for i, g in zip(node.inputs, grads):
            if g is None:
                continue
            target = graph.nodes[i]
            target.grad = g if target.grad is None else target.grad + g
    return {
        n.name: (n.grad if n.grad is not None else np.zeros_like(graph.params[n.name]))
        for n in graph.nodes
        if n.op == "param"
    }


# ---------------------------------------------------------------------------
# op implementations


@register("input")
def _input_fwd(node, args, ctx):  # fed by forward() directly
    raise AssertionError("input nodes are fed, not evaluated")


@register("param")
def _param_fwd(node, args, ctx):
    return ctx.graph.params[node.name].astype(ctx.dtype)


@register("const")
def _const_fwd(node, args, ctx):
    return np.asarray(node.attrs["value"], dtype=ctx.dtype)


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add_bwd(node, g, args):
    return [_sum_to_shape(g, np.shape(a)) for a in args]


@register("add", _add_bwd)
def _add_fwd(node, args, ctx):
    return args[0] + args[1]


def _sum_bwd(node, g, args):
    return [np.broadcast_to(g, args[0].shape).astype(args[0].dtype)]


@register("sum", _sum_bwd)
def _sum_fwd(node, args, ctx):
    return np.asarray(args[0].sum(), dtype=args[0].dtype)


def _relu_bwd(node, g, args):
    return [g * (args[0] > 0)]


@register("relu", _relu_bwd)
def _relu_fwd(node, args, ctx):
    return np.maximum(args[0], 0)


def _flatten_bwd(node, g, args):
    return [g.reshape(args[0].shape)]


@register("flatten", _flatten_bwd)
def _flatten_fwd(node, args, ctx):
    x = args[0]
    return x.reshape(x.shape[0], -1)


def _conv_bwd(node, g, args):
    x, w = args
    s, p = node.attrs["stride"], node.attrs["padding"]
    o, c, kh, kw = w.shape
    cols = node.cache["cols"]
    n, oh, ow, _ = g.shape
    g2 = g.reshape(-1, o)
    dw = (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
    h, wd = x.shape[1:3]
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += dcols[..., i, j]
    dx = dxp[:, p : p + h, p : p + wd, :] if p else dxp
    return [dx, dw]


@register("conv2d", _conv_bwd)
def _conv_fwd(node, args, ctx):
    x, w = args
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[1]:
        raise InvalidInputError(f"conv2d shape mismatch: input {x.shape}, weights {w.shape}")
    o, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, node.attrs["stride"], node.attrs["padding"])
    node.cache["cols"] = cols
    return cols @ w.reshape(o, -1).T


def _fc_bwd(node, g, args):
    x, w = args
    return [g @ w, g.T @ x]


@register("fully_connected", _fc_bwd)
def _fc_fwd(node, args, ctx):
    x, w = args
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise InvalidInputError(f"fully_connected shape mismatch: input {x.shape}, weights {w.shape}")
    return x @ w.T


def _pool_windows(x, k, s):
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]


def _maxpool_bwd(node, g, args):
    x = args[0]
    k, s = node.attrs["window"], node.attrs["stride"]
    arg = node.cache["argmax"]
    _, oh, ow, _ = g.shape
    dx = np.zeros_like(x)
    for di in range(k):
        for dj in range(k):
            sel = arg == di * k + dj
            if sel.any():
                dx[:, di : di + s * oh : s, dj : dj + s * ow : s, :] += g * sel
    return [dx]


@register("maxpool", _maxpool_bwd)
def _maxpool_fwd(node, args, ctx):
    x = args[0]
    k, s = node.attrs["window"], node.attrs["stride"]
    if k > x.shape[1] or k > x.shape[2]:
        raise InvalidInputError(f"pool window {k} larger than input {x.shape[1:3]}")
    win = _pool_windows(x, k, s)
    flat = win.reshape(win.shape[:4] + (k * k,))
    node.cache["argmax"] = flat.argmax(axis=-1)
    return flat.max(axis=-1)


def _fq_bwd(node, g, args):
    mask = node.cache.get("mask")
    return [g if mask is None else g * mask]


@register("fake_quant", _fq_bwd)
def _fq_fwd(node, args, ctx):
    x = args[0]
    node.cache["mask"] = None
    if ctx.mode is TrainMode.FP32:
        return x
    a = node.attrs
    role = a["role"]
    if ctx.mode is TrainMode.QAT_TRAIN and not ctx.graph.frozen and role in ("activation", "output"):
        if a.get("frac_bits") is None:
            a["tracker"] = update_range(a["tracker"], x)
    fmt = resolve_format(ctx.graph, node, ctx.formats, x)
    ctx.formats[node.id] = fmt
    a["format"] = fmt
    node.cache["mask"] = ste_mask(x, fmt)
    return fake_quant(x, fmt)


@register("fake_quant_asym", _fq_bwd)
def _fq_asym_fwd(node, args, ctx):
    x = args[0]
    node.cache["mask"] = None
    if ctx.mode is TrainMode.FP32:
        return x
    a = node.attrs
    if a["role"] == "weight":
        lo, hi = float(x.min()), float(x.max())
    else:
        if ctx.mode is TrainMode.QAT_TRAIN and not ctx.graph.frozen:
            a["tracker"] = update_minmax(a["tracker"], x)
        lo, hi = a["tracker"].min_ema, a["tracker"].max_ema
    p = asymmetric_params(lo, hi)
    node.cache["mask"] = asymmetric_mask(x, p)
    return fake_quant_asymmetric(x, p)


def _preproc_bwd(node, g, args):
    return [np.ldexp(g, -node.attrs["sigma_shift"])]


@register("preprocess_norm", _preproc_bwd)
def _preproc_fwd(node, args, ctx):
    x = args[0]
    mu = np.asarray(node.attrs["mu"], dtype=ctx.dtype)
    return np.ldexp(x - mu, -node.attrs["sigma_shift"]).astype(ctx.dtype)


@register("per_image_std")
def _pis_fwd(node, args, ctx):
    from .data import per_image_standardization

    return per_image_standardization(args[0]).astype(ctx.dtype)


@register("scale")
def _scale_fwd(node, args, ctx):
    return (args[0] * node.attrs["factor"]).astype(ctx.dtype)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, classes = logits.shape
    if labels.shape[0] != n:
        raise InvalidInputError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidInputError(f"label outside [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def _xent_bwd(node, g, args):
    return [node.cache["grad"] * g, None]


@register("softmax_xent", _xent_bwd)
def _xent_fwd(node, args, ctx):
    loss, grad = softmax_xent(args[0], args[1])
    node.cache["grad"] = grad
    return np.asarray(loss, dtype=args[0].dtype)
