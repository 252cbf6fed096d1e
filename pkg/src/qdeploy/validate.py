"""Bit-exactness validation: engine-executed plan vs. the qat-eval trainable graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import TrainMode, forward
from .engine import ConvParams, FCParams
from .plan import ExecutionPlan, run_plan
from .quant import quantize


@dataclass
class Divergence:
    op: str
    tensor: str
    sample: int  # -1 for parameters and formats
    index: tuple
    engine: object
    graph: object

    def __str__(self):
        where = "parameters" if self.sample < 0 else f"sample {self.sample}"
        return (f"op {self.op!r}, tensor {self.tensor!r}, {where}, index {self.index}: "
                f"engine={self.engine} graph={self.graph}")


@dataclass
class ValidationReport:
    status: str  # identical | divergent | refused
    samples: int = 0
    tensors_checked: int = 0
    elements_checked: int = 0
    first: Divergence | None = None
    reason: str = ""
    per_op: dict = field(default_factory=dict)

    @property
    def identical(self) -> bool:
        return self.status == "identical"

    def summary(self) -> str:
        if self.status == "identical":
            return (f"identical: {self.samples} samples, {self.tensors_checked} tensors, "
                    f"{self.elements_checked} integer elements compared")
        if self.status == "refused":
            return f"refused: {self.reason}"
        return f"divergent: first divergence at {self.first}"

    def to_dict(self) -> dict:
        d = {"status": self.status, "samples": self.samples, "tensors_checked": self.tensors_checked,
             "elements_checked": self.elements_checked}
        if self.first is not None:
            d["first_divergence"] = {"op": self.first.op, "tensor": self.first.tensor,
                                     "sample": self.first.sample, "index": list(self.first.index),
                                     "engine": self.first.engine, "graph": self.first.graph}
        if self.reason:
            d["reason"] = self.reason
        return d


def _first_mismatch(a: np.ndarray, b: np.ndarray):
    bad = np.argwhere(a != b)
    if bad.size == 0:
        return None
    idx = tuple(int(i) for i in bad[0])
    return idx, int(a[idx]), int(b[idx]) if float(b[idx]).is_integer() else float(b[idx])


def _check_parameters(plan: ExecutionPlan, graph, fmts) -> Divergence | None:
    tensor_fq = graph.meta["tensor_fq"]
    for op in plan.ops:
        for t in [op.output] + [f"{op.name}.{k}" for k in ("weight", "bias")]:
            if t in tensor_fq and t in plan.tensors:
                pf, gf = plan.tensors[t].format, fmts[tensor_fq[t]]
                if pf != gf:
                    return Divergence(op.name, t, -1, (), f"frac_bits={pf.frac_bits}", f"frac_bits={gf.frac_bits}")
        if isinstance(op.params, (ConvParams, FCParams)):
            for key, q in (("weight", op.params.weights), ("bias", op.params.bias)):
                name = f"{op.name}.{key}"
                ref = quantize(graph.params[name], fmts[tensor_fq[name]]).data.astype(np.int64)
                hit = _first_mismatch(q.data.astype(np.int64), ref)
                if hit:
                    return Divergence(op.name, name, -1, *hit)
    return None


def random_inputs(plan: ExecutionPlan, n: int, rng: np.random.Generator) -> np.ndarray:
    shape = (n,) + tuple(plan.manifest.input.shape)
    if plan.manifest.input.dtype == "int8":
        return rng.integers(-128, 128, shape).astype(np.int8)
    return rng.integers(0, 256, shape).astype(np.uint8)


def validate_bitexact(plan: ExecutionPlan, graph, n_samples: int = 1000, seed: int = 0,
                      batch_size: int = 100, inputs=None) -> ValidationReport:
    """Compare every integer intermediate of the engine and of the qat-eval graph.

    Random uint8 images (or int8 codes) are drawn from ``seed`` unless
    ``inputs`` is given. Divergence is reported, never raised.
    """
    if not plan.executable:
        return ValidationReport("refused", reason=f"{plan.scheme} plans have no integer tensors to compare")
    if graph.meta.get("scheme") != plan.scheme:
        return ValidationReport("refused", reason=f"graph scheme {graph.meta.get('scheme')} != plan scheme {plan.scheme}")
    fmts = graph.formats()
    report = ValidationReport("identical")
    div = _check_parameters(plan, graph, fmts)
    if div:
        report.status, report.first = "divergent", div
        return report
    if inputs is None:
        inputs = random_inputs(plan, n_samples, np.random.default_rng(seed))
    inputs = np.asarray(inputs)
    op_outputs = graph.meta["op_outputs"]
    logits = graph.outputs["logits"]
    checked = set()
    for start in range(0, len(inputs), batch_size):
        x = inputs[start : start + batch_size]
        eng = run_plan(plan, x)
        forward(graph, {"image": x}, TrainMode.QAT_EVAL, upto=logits)
        for op in plan.ops:
            t = op.output
            node = graph.nodes[op_outputs[t]]
            got = eng[t]
            frac = got.format.frac_bits
            gv = np.ldexp(node.value.astype(np.float64), frac)
            e = got.data.astype(np.int64).reshape(gv.shape)
            hit = _first_mismatch(e, gv)
            report.elements_checked += e.size
            checked.add(t)
            report.per_op[op.name] = report.per_op.get(op.name, 0) + e.size
            if hit:
                idx, ev, gvv = hit
                report.status = "divergent"
                report.first = Divergence(op.name, t, start + idx[0], idx[1:], ev, gvv)
                report.samples = start + len(x)
                report.tensors_checked = len(checked)
                return report
    report.samples = len(inputs)
    report.tensors_checked = len(checked)
    return report
