"""Generate the trainable counterpart of an execution plan.

Each conv / fully-connected layer becomes

    raw fp32 weight -> fake_quant(weight) --+
    input -------------------------------- conv/fc -> add -> fake_quant(output) [-> relu]
    raw fp32 bias   -> fake_quant(bias) ----------------+

and maxpool / relu pass through unquantized since they commute with the
integer codes. ``graph.meta["tensor_fq"]`` maps every plan tensor that owns a
format to its fake_quant node, and ``graph.meta["op_outputs"]`` maps each
plan op output to the node whose value should equal it.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Graph
from .errors import InvalidInputError
from .quant import MinMaxTracker, RangeTracker


def _fq_attrs(scheme, role, ranges, tensor, **extra):
    if scheme == "asymmetric":
        return "fake_quant_asym", {"role": role, "tracker": MinMaxTracker()}
    attrs = {"role": role, **extra}
    if role in ("activation", "output"):
        attrs["tracker"] = ranges.get(tensor, RangeTracker()) if ranges else RangeTracker()
    return "fake_quant", attrs


def _explicit(layer, key):
    v = layer.formats.get(f"{key}_frac", "auto")
    return None if v == "auto" else int(v)


def gen_trainable(plan, seed: int = 0, ranges: dict | None = None) -> Graph:
    """Build the fake-quantized training graph whose qat-eval forward replays ``plan``."""
    m = plan.manifest
    scheme = m.scheme
    rng = np.random.default_rng(seed)
    g = Graph()
    tensor_fq: dict[str, int] = {}
    op_outputs: dict[str, int] = {}
    quantized = scheme != "fp32"

    x = g.input("image", m.input.shape)
    fmt_src = None
    pre_op = next((op for op in plan.ops if op.kind == "preprocess"), None)
    preproc = pre_op.params if pre_op is not None else None
    if m.input.dtype == "int8":
        x = g.add("scale", [x], name="input.scale", factor=2.0 ** -m.input.frac_bits)
        kind, attrs = _fq_attrs(scheme, "fixed", ranges, "input", frac_bits=m.input.frac_bits)
        if scheme == "asymmetric":
            kind, attrs = "fake_quant", {"role": "fixed", "frac_bits": m.input.frac_bits}
        x = fmt_src = tensor_fq["input"] = g.add(kind, [x], name="input.fq", **attrs)
    elif m.preprocess in ("batch_norm_like", "mean_image"):
        x = g.add("preprocess_norm", [x], name="preprocess", mu=preproc.mu.copy(),
                  sigma_shift=preproc.sigma_shift)
        if scheme == "asymmetric":
            x = g.add("fake_quant_asym", [x], name="preprocess.fq", role="activation", tracker=MinMaxTracker())
        else:
            x = g.add("fake_quant", [x], name="preprocess.fq", role="fixed", frac_bits=preproc.sigma_shift)
            tensor_fq["preprocess.out"] = x
        fmt_src = x
        op_outputs["preprocess.out"] = x
    elif m.preprocess == "per_image_standardization":
        x = g.add("per_image_std", [x], name="preprocess")
        if scheme == "asymmetric":
            x = g.add("fake_quant_asym", [x], name="preprocess.fq", role="activation", tracker=MinMaxTracker())
        op_outputs["preprocess.out"] = x
    else:
        x = g.add("scale", [x], name="input.scale", factor=1.0 / 256)

    in_shape = m.input.shape
    for layer, out_shape in zip(m.layers, m.shapes()):
        name = layer.name
        if layer.weighted:
            if layer.kind == "fully_connected" and len(in_shape) > 1:
                x = g.add("flatten", [x], name=f"{name}.flatten")
            fan_in = (in_shape[-1] * layer.attrs["kernel"] ** 2 if layer.kind == "conv2d"
                      else int(np.prod(in_shape)))
            units = out_shape[-1]
            wshape = ((units, in_shape[-1], layer.attrs["kernel"], layer.attrs["kernel"])
                      if layer.kind == "conv2d" else (units, fan_in))
            last = layer is m.layers[-1]
            # He init for relu layers, unit-variance (LeCun) for the linear logits layer
            std = math.sqrt((1.0 if last or layer.activation != "relu" else 2.0) / fan_in)
            w = g.param(f"{name}.weight", rng.normal(0.0, std, wshape))
            b = g.param(f"{name}.bias", np.zeros(units))
            if quantized:
                kind, attrs = _fq_attrs(scheme, "weight", ranges, f"{name}.weight")
                if _explicit(layer, "weight") is not None:
                    attrs["frac_bits"] = _explicit(layer, "weight")
                w = g.add(kind, [w], name=f"{name}.weight.fq", **attrs)
                if scheme == "symmetric_pow2":
                    tensor_fq[f"{name}.weight"] = w
                    b = g.add("fake_quant", [b], name=f"{name}.bias.fq", role="bias", in_fq=fmt_src,
                              wt_fq=w, fan_in=fan_in, gate=True, frac_bits=_explicit(layer, "bias"))
                    tensor_fq[f"{name}.bias"] = b
            if layer.kind == "conv2d":
                y = g.add("conv2d", [x, w], name=name, stride=layer.attrs["stride"],
                          padding=layer.attrs["padding"])
            else:
                y = g.add("fully_connected", [x, w], name=name)
            y = g.add("add", [y, b], name=f"{name}.add")
            if quantized:
                kind, attrs = _fq_attrs(scheme, "output", ranges, f"{name}.out")
                if scheme == "symmetric_pow2":
                    attrs.update(in_fq=fmt_src, wt_fq=w, frac_bits=_explicit(layer, "out"))
                y = g.add(kind, [y], name=f"{name}.out.fq", **attrs)
                if scheme == "symmetric_pow2":
                    tensor_fq[f"{name}.out"] = y
                fmt_src = y
            if layer.activation == "relu":
                y = g.add("relu", [y], name=f"{name}.relu")
            x = y
        elif layer.kind == "maxpool":
            x = g.add("maxpool", [x], name=name, window=layer.attrs["window"], stride=layer.attrs["stride"])
        elif layer.kind == "relu":
            x = g.add("relu", [x], name=name)
        else:  # pragma: no cover - the manifest parser rejects unknown kinds
            raise InvalidInputError(f"operator unavailable: {layer.kind}")
        op_outputs[f"{name}.out"] = x
        in_shape = out_shape

    if len(in_shape) > 1:
        x = g.add("flatten", [x], name="logits.flatten")
    g.outputs["logits"] = x
    labels = g.input("labels", (), integer=True)
    g.outputs["loss"] = g.add("softmax_xent", [x, labels], name="loss")
    g.meta.update(
        manifest=m,
        scheme=scheme,
        preproc=preproc,
        tensor_fq=tensor_fq,
        op_outputs=op_outputs,
        seed=seed,
    )
    return g
