"""Import pre-trained fp32 weights into a fine-tunable QAT graph."""

from __future__ import annotations

import numpy as np

from .autodiff import TrainMode, forward
from .errors import InvalidInputError
from .plan import ExecutionPlan, build_plan, deploy_plan
from .quant import DEFAULT_DECAY, RangeTracker
from .trainable import gen_trainable


def save_weights(graph, path) -> None:
    """fp32 parameters of a graph as an .npz archive keyed by parameter name."""
    np.savez(path, **{k: v for k, v in sorted(graph.params.items())})


def load_weights(path) -> dict:
    with np.load(path) as z:
        return {k: z[k].astype(np.float32) for k in z.files}


def _images(calibration):
    if calibration is None:
        return None
    images = getattr(calibration, "images", calibration)
    images = np.asarray(images)
    if len(images) == 0:
        raise InvalidInputError("calibration data is empty")
    return images


def import_pretrained(weights: dict, manifest, calibration=None, preproc=None, seed: int = 0,
                      batch_size: int = 256, decay: float = DEFAULT_DECAY):
    """Seed a trainable graph from fp32 weights.

    Weight formats follow each tensor's max-abs. With calibration images, one
    fp32 pass sets every activation tracker to the max-abs observed over the
    whole set (no EMA); without it the trackers stay unseeded, which resolves
    to frac_bits 7.
    """
    plan = build_plan(manifest, preproc=preproc)
    graph = gen_trainable(plan, seed)
    expected = {k: v.shape for k, v in graph.params.items()}
    problems = []
    for name, shape in expected.items():
        if name not in weights:
            problems.append(f"{name} missing (expected {shape})")
        elif tuple(np.shape(weights[name])) != shape:
            problems.append(f"{name} has shape {tuple(np.shape(weights[name]))}, expected {shape}")
    problems += [f"{name} is not a parameter of {manifest.name}" for name in weights if name not in expected]
    if problems:
        raise InvalidInputError("pre-trained weights do not match the manifest: " + "; ".join(problems))
    for name in expected:
        graph.params[name] = np.asarray(weights[name], dtype=np.float32).copy()

    images = _images(calibration)
    if images is not None:
        fq_nodes = [n for n in graph.fake_quant_nodes()
                    if n.attrs["role"] in ("activation", "output") and n.attrs.get("frac_bits") is None]
        peak = {n.id: 0.0 for n in fq_nodes}
        for start in range(0, len(images), batch_size):
            forward(graph, {"image": images[start : start + batch_size]}, TrainMode.FP32,
                    upto=graph.outputs["logits"])
            for n in fq_nodes:
                peak[n.id] = max(peak[n.id], float(np.max(np.abs(n.value))))
        for n in fq_nodes:
            n.attrs["tracker"] = RangeTracker(peak[n.id], decay, True)
    return graph


def post_training_quantize(weights: dict, manifest, calibration=None, preproc=None,
                           seed: int = 0) -> tuple:
    """Import, freeze and deploy without fine-tuning; returns (graph, trained plan)."""
    graph = import_pretrained(weights, manifest, calibration, preproc, seed)
    graph.freeze()
    plan: ExecutionPlan = deploy_plan(graph)
    return graph, plan
