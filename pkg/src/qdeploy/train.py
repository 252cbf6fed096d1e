"""Optimizers, the training loop and loss-trace output."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, TrainMode, backward, forward
from .data import ImageDataset, augment
from .errors import InvalidInputError, NumericError, TrainingDiverged


@dataclass(frozen=True)
class StepDecay:
    """lr = initial * factor ** (step // every); ``every=0`` keeps it constant."""

    initial: float
    factor: float = 0.1
    every: int = 0

    def __call__(self, step: int) -> float:
        if not self.every:
            return self.initial
        return self.initial * self.factor ** (step // self.every)


@dataclass
class OptimizerState:
    kind: str = "sgd"  # "sgd" (with momentum) or "adam"
    schedule: StepDecay = field(default_factory=lambda: StepDecay(0.1))
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.kind!r}")

    @property
    def lr(self) -> float:
        return self.schedule(self.step)


def make_optimizer(kind: str, lr: float, decay_every: int = 0, decay_factor: float = 0.1,
                   momentum: float = 0.9) -> OptimizerState:
    return OptimizerState(kind=kind, schedule=StepDecay(lr, decay_factor, decay_every), momentum=momentum)


def _check(params, grads):
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise InvalidInputError(f"gradient shape {grads[k].shape} != parameter shape {p.shape} for {k}")


def sgd_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Momentum SGD: v = momentum*v + g; p -= lr*v. Updates in place and returns params."""
    _check(params, grads)
    lr = state.lr
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        if state.momentum:
            v = state.slots.setdefault(k, {"v": np.zeros_like(p)})["v"]
            v *= state.momentum
            v += g
            g = v
        p -= lr * g
    state.step += 1
    return params


def adam_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    _check(params, grads)
    lr = state.lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        slot = state.slots.setdefault(k, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        slot["m"] = b1 * slot["m"] + (1 - b1) * g
        slot["v"] = b2 * slot["v"] + (1 - b2) * g * g
        p -= (lr * (slot["m"] / c1) / (np.sqrt(slot["v"] / c2) + state.epsilon)).astype(p.dtype)
    state.step = t
    return params


def optimizer_step(params, grads, state):
    return (sgd_step if state.kind == "sgd" else adam_step)(params, grads, state)


@dataclass
class TraceRow:
    step: int
    epoch: int
    loss: float
    lr: float
    wall_ms: float


@dataclass
class TrainResult:
    params: dict
    trace: list

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.trace]

    def mean_step_ms(self, skip: int = 1) -> float:
        rows = self.trace[skip:] or self.trace
        return float(np.median([r.wall_ms for r in rows])) if rows else 0.0


def train_loop(graph: Graph, dataset: ImageDataset, optimizer: OptimizerState, epochs: int,
               seed: int, batch_size: int = 64, mode=TrainMode.QAT_TRAIN,
               flip: bool = False, crop_pad: int = 0, max_steps: int | None = None,
               progress=None) -> TrainResult:
    """Mini-batch training; the same seed and config reproduce the same loss trace."""
    if seed is None:
        raise InvalidInputError("train_loop needs an explicit seed")
    mode = TrainMode(mode)
    rng = np.random.default_rng(seed)
    trace: list[TraceRow] = []
    step = 0
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if max_steps is not None and step >= max_steps:
                return TrainResult(graph.params, trace)
            idx = order[start : start + batch_size]
            images = dataset.images[idx]
            if flip or crop_pad:
                images = augment(images, rng, flip=flip, crop_pad=crop_pad)
            t0 = time.perf_counter()
            lr = optimizer.lr
            try:
                out = forward(graph, {"image": images, "labels": dataset.labels[idx]}, mode)
            except NumericError as exc:
                raise TrainingDiverged(f"step {step}: {exc.args[0]}", trace) from exc
            loss = float(out["loss"])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}", trace)
            grads = backward(graph)
            optimizer_step(graph.params, grads, optimizer)
            wall = (time.perf_counter() - t0) * 1e3
            trace.append(TraceRow(step, epoch, loss, lr, wall))
            if progress:
                progress(trace[-1])
            step += 1
    return TrainResult(graph.params, trace)


def predict(graph: Graph, images: np.ndarray, mode=TrainMode.QAT_EVAL, batch_size: int = 500) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        out = forward(graph, {"image": images[start : start + batch_size]}, mode,
                      upto=graph.outputs["logits"])
        preds.append(np.argmax(out["logits"], axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def accuracy(graph: Graph, dataset: ImageDataset, mode=TrainMode.QAT_EVAL) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(graph, dataset.images, mode) == dataset.labels))


def write_trace_csv(trace, path, include_timing: bool = True) -> None:
    cols = ["step", "epoch", "loss", "lr"] + (["wall_ms"] if include_timing else [])
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in trace:
            row = [r.step, r.epoch, repr(float(r.loss)), repr(float(r.lr))]
            if include_timing:
                row.append(f"{r.wall_ms:.3f}")
            w.writerow(row)
