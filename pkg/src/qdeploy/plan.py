"""Deployable execution plans: resolved formats and shifts, static buffer arena.

A plan maps 1:1 onto the manifest's layers plus one preprocessing op. Every
activation tensor gets a buffer with a lifetime interval ``[first op, last
op]``; buffers are packed into one arena by greedy first-fit. Standalone
``relu`` ops run in place (their output aliases their input buffer), as do
relus fused onto conv / fully-connected layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ACC_EXACT_LIMIT,
    ConvParams,
    FCParams,
    PreprocParams,
    accumulator_bound,
    conv2d_q7,
    derive_shifts,
    fully_connected_q7,
    maxpool_q7,
    preprocess_q7,
    relu_q7,
    resolve_bias_frac,
    resolve_out_frac,
)
from .errors import FormatError, InvalidInputError, PlanError
from .manifest import ModelManifest
from .quant import QFormat, QTensor, RangeTracker, tracker_format

ALIGN = 4
DEFAULT_MU = 128
DEFAULT_SIGMA_SHIFT = 6
_DTYPE_BYTES = {"uint8": 1, "int8": 1, "int16": 2, "int32": 4, "float32": 4}


@dataclass
class TensorInfo:
    name: str
    shape: tuple  # per sample
    dtype: str
    format: QFormat | None = None
    explicit: bool = False

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * _DTYPE_BYTES[self.dtype]


@dataclass
class PlanOp:
    name: str
    kind: str  # preprocess | conv2d | fully_connected | maxpool | relu
    inputs: tuple
    output: str
    params: object = None
    attrs: dict = field(default_factory=dict)
    macs: int = 0


@dataclass
class Buffer:
    id: int
    name: str
    kind: str  # activation | scratch | staging
    size: int
    start: int
    end: int
    offset: int = -1

    def overlaps_in_time(self, other: "Buffer") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass
class ExecutionPlan:
    manifest: ModelManifest
    ops: list
    tensors: dict
    buffers: list
    arena_size: int
    peak_live: int
    requant: str = "shift"
    trained: bool = False
    allow_wide_accumulator: bool = False

    @property
    def scheme(self) -> str:
        return self.manifest.scheme

    @property
    def executable(self) -> bool:
        return self.scheme == "symmetric_pow2"

    def op(self, name: str) -> PlanOp:
        for op in self.ops:
            if op.name == name:
                return op
        raise KeyError(name)

    def buffer_of(self, tensor: str) -> Buffer:
        return self.buffers[self._tensor_buffer[tensor]]

    @property
    def param_order(self) -> list[str]:
        names = []
        if self.manifest.input.dtype == "int8":
            names.append("input")
        for op in self.ops:
            if op.kind == "preprocess":
                names += ["preprocess.mu", "preprocess.out"]
            elif op.kind in ("conv2d", "fully_connected"):
                names += [f"{op.name}.weight", f"{op.name}.bias", f"{op.name}.out"]
        return names

    def staging_ratio(self) -> float:
        """int32 staging bytes per int8 output byte across dynamically requantized ops."""
        staging = sum(b.size for b in self.buffers if b.kind == "staging")
        outputs = sum(self.tensors[op.output].nbytes for op in self.ops if op.attrs.get("staging"))
        return staging / outputs if outputs else 0.0

    def report(self) -> dict:
        ops = []
        for op in self.ops:
            entry = {"name": op.name, "kind": op.kind, "inputs": list(op.inputs), "output": op.output,
                     "macs": op.macs}
            entry.update({k: v for k, v in op.attrs.items() if k != "staging"})
            p = op.params
            if isinstance(p, (ConvParams, FCParams)):
                entry.update(bias_shift=p.bias_shift, out_shift=p.out_shift,
                             frac_weight=p.weights.format.frac_bits, frac_bias=p.bias.format.frac_bits)
            if isinstance(p, PreprocParams):
                entry.update(sigma_shift=p.sigma_shift, mu=p.mu.reshape(-1).tolist()
                             if p.mu.ndim == 1 else f"per-pixel {list(p.mu.shape)}")
            ops.append(entry)
        return {
            "model": self.manifest.name,
            "scheme": self.scheme,
            "preprocess": self.manifest.preprocess,
            "requant": self.requant,
            "trained": self.trained,
            "ops": ops,
            "tensors": {
                t.name: {"shape": list(t.shape), "dtype": t.dtype, "bytes": t.nbytes,
                         "frac_bits": t.format.frac_bits if t.format else None}
                for t in self.tensors.values()
            },
            "buffers": [
                {"id": b.id, "name": b.name, "kind": b.kind, "bytes": b.size, "lifetime": [b.start, b.end],
                 "offset": b.offset}
                for b in self.buffers
            ],
            "arena_bytes": self.arena_size,
            "peak_live_bytes": self.peak_live,
            "parameter_bytes": self.parameter_bytes(),
            "total_macs": sum(op.macs for op in self.ops),
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True) + "\n"

    def parameter_bytes(self) -> int:
        total = 0
        for op in self.ops:
            p = op.params
            if isinstance(p, (ConvParams, FCParams)):
                total += p.weights.data.nbytes + p.bias.data.nbytes
            elif isinstance(p, PreprocParams):
                total += p.mu.size + 1
        return total


# ---------------------------------------------------------------------------
# format resolution


def default_preproc(manifest: ModelManifest) -> PreprocParams | None:
    if manifest.preprocess not in ("batch_norm_like", "mean_image"):
        return None
    pp = manifest.preprocess_params
    if pp is not None:
        return PreprocParams(np.asarray(pp["mu"]), int(pp["sigma_shift"]))
    shape = manifest.input.shape
    mu_shape = shape[-1:] if manifest.preprocess == "batch_norm_like" else shape
    return PreprocParams(np.full(mu_shape, DEFAULT_MU), DEFAULT_SIGMA_SHIFT)


def _fan_in(layer, in_shape) -> int:
    if layer.kind == "conv2d":
        return in_shape[-1] * layer.attrs["kernel"] ** 2
    return int(np.prod(in_shape))


def resolve_formats(manifest: ModelManifest, ranges=None, preproc: PreprocParams | None = None,
                    gate: bool = True) -> dict[str, QFormat]:
    """Pick every tensor's format from trackers (or defaults) and the manifest's explicit policies."""
    ranges = ranges or {}
    formats: dict[str, QFormat] = {}
    if manifest.input.dtype == "int8":
        current = formats["input"] = QFormat(8, manifest.input.frac_bits)
    else:
        current = formats["preprocess.out"] = preproc.output_format
    shapes = manifest.shapes()
    in_shape = manifest.input.shape
    for layer, out_shape in zip(manifest.layers, shapes):
        name = layer.name
        if layer.weighted:
            pol = layer.formats
            tracked = lambda key: tracker_format(ranges.get(f"{name}.{key}", RangeTracker())).frac_bits
            frac_in = current.frac_bits
            fw = pol["weight_frac"] if pol["weight_frac"] != "auto" else tracked("weight")
            if pol["bias_frac"] != "auto":
                fb = pol["bias_frac"]
            else:
                fb = resolve_bias_frac(tracked("bias"), frac_in, fw, _fan_in(layer, in_shape), gate)
            fo = pol["out_frac"] if pol["out_frac"] != "auto" else resolve_out_frac(tracked("out"), frac_in, fw)
            for key, frac in (("weight", fw), ("bias", fb), ("out", fo)):
                try:
                    formats[f"{name}.{key}"] = QFormat(8, frac)
                except InvalidInputError as exc:
                    raise FormatError(f"{name}.{key}: {exc}", tensor=f"{name}.{key}") from exc
            current = formats[f"{name}.out"]
        else:
            formats[f"{name}.out"] = current
        in_shape = out_shape
    return formats


# ---------------------------------------------------------------------------
# assembly and allocation


def _first_fit(buffers: list[Buffer]) -> int:
    placed: list[Buffer] = []
    for b in sorted(buffers, key=lambda b: (b.start, -b.size, b.id)):
        busy = sorted((p.offset, p.offset + p.size) for p in placed if p.overlaps_in_time(b))
        offset = 0
        for lo, hi in busy:
            if offset + b.size <= lo:
                break
            offset = max(offset, -(-hi // ALIGN) * ALIGN)
        b.offset = offset
        placed.append(b)
    return max((b.offset + b.size for b in buffers), default=0)


def _peak_live(buffers: list[Buffer], n_ops: int) -> int:
    return max((sum(b.size for b in buffers if b.start <= t <= b.end) for t in range(n_ops)), default=0)


def _zero_q(shape, fmt) -> QTensor:
    return QTensor(np.zeros(shape, np.int8), fmt)


def assemble(manifest: ModelManifest, formats: dict | None, preproc: PreprocParams | None,
             codes: dict | None = None, requant: str = "shift",
             allow_wide_accumulator: bool = False) -> ExecutionPlan:
    """Build ops, tensors and the buffer arena from resolved formats and (optional) parameter codes."""
    if requant not in ("shift", "dynamic"):
        raise InvalidInputError(f"unknown requantization mode {requant!r}")
    scheme = manifest.scheme
    symmetric = scheme == "symmetric_pow2"
    act_dtype = {"symmetric_pow2": "int8", "asymmetric": "uint8", "fp32": "float32"}[scheme]
    dynamic = requant == "dynamic" or scheme == "asymmetric"
    codes = codes or {}
    tensors: dict[str, TensorInfo] = {}
    ops: list[PlanOp] = []

    def fmt(name):
        return formats.get(name) if formats else None

    in_dtype = manifest.input.dtype if scheme != "fp32" else ("float32" if manifest.input.dtype == "int8" else "uint8")
    tensors["input"] = TensorInfo("input", manifest.input.shape, in_dtype, fmt("input"))
    current = "input"
    if manifest.preprocess != "none":
        tensors["preprocess.out"] = TensorInfo("preprocess.out", manifest.input.shape, act_dtype, fmt("preprocess.out"))
        params = preproc if manifest.preprocess in ("batch_norm_like", "mean_image") else None
        ops.append(PlanOp("preprocess", "preprocess", ("input",), "preprocess.out", params,
                          {"method": manifest.preprocess}))
        current = "preprocess.out"

    in_shape = manifest.input.shape
    for layer, out_shape in zip(manifest.layers, manifest.shapes()):
        name, a = layer.name, layer.attrs
        out = f"{name}.out"
        explicit = any(layer.formats.get(k, "auto") != "auto" for k in ("out_frac",))
        tensors[out] = TensorInfo(out, out_shape, act_dtype, fmt(out), explicit)
        attrs, params, macs = {}, None, 0
        if layer.kind in ("conv2d", "fully_connected"):
            fan_in = _fan_in(layer, in_shape)
            out_units = out_shape[-1]
            wshape = ((out_units, in_shape[-1], a["kernel"], a["kernel"]) if layer.kind == "conv2d"
                      else (out_units, fan_in))
            macs = int(np.prod(out_shape)) * fan_in
            if layer.kind == "conv2d":
                attrs.update(stride=a["stride"], padding=a["padding"], kernel=a["kernel"])
            if layer.activation == "relu":
                attrs["relu"] = True
            if symmetric:
                fw, fb, fo = fmt(f"{name}.weight"), fmt(f"{name}.bias"), fmt(out)
                frac_in = tensors[current].format.frac_bits
                try:
                    bias_shift, out_shift = derive_shifts(frac_in, fw.frac_bits, fb.frac_bits, fo.frac_bits)
                except FormatError as exc:
                    bad = f"{name}.bias" if frac_in + fw.frac_bits < fb.frac_bits else out
                    raise FormatError(f"{bad}: {exc.args[0]}", tensor=bad) from exc
                worst = accumulator_bound(fan_in, bias_shift)
                if worst >= ACC_EXACT_LIMIT and not allow_wide_accumulator:
                    raise PlanError(
                        f"{name}: worst-case accumulator {worst} reaches 2^24 "
                        f"(fan_in={fan_in}, bias_shift={bias_shift}); pass allow_wide_accumulator to override"
                    )
                w = codes.get(f"{name}.weight")
                b = codes.get(f"{name}.bias")
                w = QTensor(w, fw) if w is not None else _zero_q(wshape, fw)
                b = QTensor(b, fb) if b is not None else _zero_q((out_units,), fb)
                if w.shape != wshape or b.shape != (out_units,):
                    raise InvalidInputError(f"{name}: parameter shapes {w.shape}/{b.shape} != {wshape}")
                for key, t in (("weight", w), ("bias", b)):
                    tensors[f"{name}.{key}"] = TensorInfo(f"{name}.{key}", t.shape, "int8", t.format,
                                                          layer.formats.get(f"{key}_frac", "auto") != "auto")
                if layer.kind == "conv2d":
                    params = ConvParams(w, b, bias_shift, out_shift, a["stride"], a["padding"])
                else:
                    params = FCParams(w, b, bias_shift, out_shift)
            attrs["staging"] = dynamic
        elif layer.kind == "maxpool":
            attrs.update(window=a["window"], stride=a["stride"])
        elif layer.kind == "relu":
            attrs["in_place"] = True
        ops.append(PlanOp(name, layer.kind, (current,), out, params, attrs, macs))
        current = out
        in_shape = out_shape

    buffers = _buffers(ops, tensors, dynamic, symmetric)
    arena = _first_fit(buffers)
    plan = ExecutionPlan(manifest, ops, tensors, buffers, arena, _peak_live(buffers, len(ops)),
                         requant="dynamic" if dynamic else "shift", trained=bool(codes),
                         allow_wide_accumulator=allow_wide_accumulator)
    plan._tensor_buffer = {}
    for b in buffers:
        for t in b.tensors:
            plan._tensor_buffer[t] = b.id
    return plan


def _buffers(ops, tensors, dynamic, symmetric) -> list[Buffer]:
    last_use: dict[str, int] = {}
    produced: dict[str, int] = {"input": 0}
    alias: dict[str, str] = {}
    for i, op in enumerate(ops):
        produced.setdefault(op.output, i)
        for t in op.inputs:
            last_use[t] = i
        if op.kind == "relu":
            alias[op.output] = op.inputs[0]
    root = lambda t: root(alias[t]) if t in alias else t
    n = len(ops)
    groups: dict[str, list[str]] = {}
    for t in tensors:
        if t in produced:
            groups.setdefault(root(t), []).append(t)
    buffers: list[Buffer] = []
    for r, members in groups.items():
        start = min(produced[m] for m in members)
        end = max(max(last_use.get(m, produced[m]) for m in members), start)
        if any(m == ops[-1].output for m in members):
            end = n - 1
        b = Buffer(len(buffers), r, "activation", tensors[r].nbytes, start, end)
        b.tensors = members
        buffers.append(b)
    for i, op in enumerate(ops):
        if op.kind in ("conv2d", "fully_connected"):
            in_t = tensors[op.inputs[0]]
            if op.kind == "conv2d":
                k = op.attrs["kernel"]
                scratch = 2 * in_t.shape[-1] * k * k  # q15 im2col column
            else:
                scratch = 2 * int(np.prod(in_t.shape))  # q15 copy of the input vector
            b = Buffer(len(buffers), f"{op.name}.scratch", "scratch", scratch, i, i)
            b.tensors = []
            buffers.append(b)
            if dynamic:
                s = Buffer(len(buffers), f"{op.name}.staging", "staging",
                           4 * int(np.prod(tensors[op.output].shape)), i, i)
                s.tensors = []
                buffers.append(s)
    return buffers


def build_plan(manifest: ModelManifest, ranges=None, preproc: PreprocParams | None = None,
               requant: str = "shift", allow_wide_accumulator: bool = False) -> ExecutionPlan:
    """Untrained deployable plan; ``ranges`` is a {tensor: RangeTracker} map or a trained graph."""
    from .autodiff import Graph

    codes = None
    if isinstance(ranges, Graph):
        graph = ranges
        preproc = graph.meta.get("preproc") if preproc is None else preproc
        if manifest.scheme == "symmetric_pow2":
            fq = graph.formats()
            formats = {t: fq[nid] for t, nid in graph.meta["tensor_fq"].items()}
            for layer in manifest.layers:
                if not layer.weighted:
                    src = formats[_input_tensor(manifest, layer)]
                    formats[f"{layer.name}.out"] = src
        else:
            formats = None
        return assemble(manifest, formats, preproc, codes, requant, allow_wide_accumulator)
    if preproc is None:
        preproc = default_preproc(manifest)
    formats = None
    if manifest.scheme == "symmetric_pow2":
        formats = resolve_formats(manifest, ranges, preproc, gate=not allow_wide_accumulator)
    return assemble(manifest, formats, preproc, codes, requant, allow_wide_accumulator)


def load_params(plan: ExecutionPlan, blob) -> ExecutionPlan:
    """Rebuild ``plan`` with the formats and integer parameters stored in ``blob``; shifts are re-derived."""
    from .blob import ParameterBlob, parse_blob

    if not isinstance(blob, ParameterBlob):
        blob = parse_blob(blob)
    expected = plan.param_order
    if blob.names != expected:
        raise PlanError(f"blob records {blob.names} do not match the plan parameter order {expected}")
    m = plan.manifest
    formats, codes = {}, {}
    mu = sigma = None
    for r in blob.records:
        if r.name == "preprocess.mu":
            mu = r.data
        elif r.name == "preprocess.out":
            sigma = r.format.frac_bits
        else:
            formats[r.name] = r.format
            if r.data.size:
                codes[r.name] = r.data.astype(np.int8)
    preproc = None
    if mu is not None:
        preproc = PreprocParams(mu, sigma)
        formats["preprocess.out"] = preproc.output_format
    for layer in m.layers:
        if not layer.weighted:
            formats[f"{layer.name}.out"] = formats[_input_tensor(m, layer)]
        for key in ("weight", "bias", "out"):
            want = layer.formats.get(f"{key}_frac", "auto")
            if want != "auto" and formats[f"{layer.name}.{key}"].frac_bits != want:
                raise FormatError(f"{layer.name}.{key}: blob frac_bits differs from the manifest's {want}",
                                  tensor=f"{layer.name}.{key}")
    return assemble(m, formats, preproc, codes, plan.requant, plan.allow_wide_accumulator)


def deploy_plan(graph, requant: str = "shift", allow_wide_accumulator: bool = False) -> ExecutionPlan:
    """Trained deployable plan for a frozen graph: plan from its formats, then its exported parameters."""
    from .blob import export_params

    plan = build_plan(graph.meta["manifest"], ranges=graph, requant=requant,
                      allow_wide_accumulator=allow_wide_accumulator)
    return load_params(plan, export_params(graph, plan))


def _input_tensor(manifest, layer) -> str:
    prev = "input" if manifest.preprocess == "none" else "preprocess.out"
    for other in manifest.layers:
        if other is layer:
            return prev
        prev = f"{other.name}.out"
    raise KeyError(layer.name)


# ---------------------------------------------------------------------------
# execution


def _flat(x: QTensor) -> QTensor:
    return QTensor(x.data.reshape(x.data.shape[0], -1), x.format)


def _apply(op: PlanOp, x):
    if op.kind == "preprocess":
        return preprocess_q7(x, op.params)
    if op.kind == "conv2d":
        out = conv2d_q7(x, op.params)
        return relu_q7(out) if op.attrs.get("relu") else out
    if op.kind == "fully_connected":
        out = fully_connected_q7(_flat(x), op.params)
        return relu_q7(out) if op.attrs.get("relu") else out
    if op.kind == "maxpool":
        return maxpool_q7(x, op.attrs["window"], op.attrs["stride"])
    if op.kind == "relu":
        return relu_q7(x)
    raise PlanError(f"op kind {op.kind} is not executable")


def _check_executable(plan):
    if not plan.executable:
        raise PlanError(f"{plan.scheme} plans are estimates only; the int8 engine runs symmetric_pow2 plans")


def run_plan(plan: ExecutionPlan, x) -> dict:
    """Run a batch through the engine; returns every tensor keyed by name.

    ``x`` is a uint8 image batch [N, H, W, C], or int8 codes for int8-input models.
    """
    _check_executable(plan)
    x = np.asarray(x)
    if tuple(x.shape[1:]) != tuple(plan.manifest.input.shape):
        raise InvalidInputError(f"input batch shape {x.shape} does not match {plan.manifest.input.shape}")
    vals = {"input": QTensor(x, plan.tensors["input"].format) if plan.manifest.input.dtype == "int8" else x.astype(np.uint8)}
    for op in plan.ops:
        vals[op.output] = _apply(op, vals[op.inputs[0]])
    return vals


def run_plan_in_arena(plan: ExecutionPlan, x, scratch_fill: int = 0xA5) -> dict:
    """Run one sample with every activation stored at its arena offset.

    Scratch and staging regions are overwritten with a fill pattern while
    their op runs, so an allocator that let them overlap a live activation
    would corrupt the result.
    """
    _check_executable(plan)
    x = np.asarray(x)
    arena = np.zeros(plan.arena_size, np.uint8)
    out = {}

    def store(name, data):
        b = plan.buffer_of(name)
        raw = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
        arena[b.offset : b.offset + raw.size] = raw

    def load(name):
        info = plan.tensors[name]
        b = plan.buffer_of(name)
        dtype = np.uint8 if info.dtype == "uint8" else np.int8
        raw = arena[b.offset : b.offset + int(np.prod(info.shape))].copy().view(dtype)
        data = raw.reshape((1,) + tuple(info.shape))
        return data if info.format is None else QTensor(data, info.format)

    store("input", x.astype(np.uint8 if plan.tensors["input"].dtype == "uint8" else np.int8))
    for i, op in enumerate(plan.ops):
        for b in plan.buffers:
            if b.kind != "activation" and b.start == i:
                arena[b.offset : b.offset + b.size] = scratch_fill
        x_in = load(op.inputs[0])
        result = _apply(op, x_in)
        store(op.output, result.data)
        out[op.output] = load(op.output)
    return out


def audit_allocation(plan: ExecutionPlan) -> list[tuple[str, str]]:
    """Pairs of buffers that are live at the same time and share bytes (should be empty)."""
    bad = []
    bs = plan.buffers
    for i, a in enumerate(bs):
        for b in bs[i + 1 :]:
            if a.overlaps_in_time(b) and a.offset < b.offset + b.size and b.offset < a.offset + a.size:
                bad.append((a.name, b.name))
    return bad
