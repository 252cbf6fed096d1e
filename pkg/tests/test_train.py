import csv

import numpy as np
import pytest

from qdeploy.autodiff import Graph, TrainMode
from qdeploy.data import ImageDataset, SynthSpec, synth_dataset
from qdeploy.errors import TrainingDiverged
from qdeploy.train import (
    OptimizerState,
    StepDecay,
    accuracy,
    adam_step,
    make_optimizer,
    sgd_step,
    train_loop,
    write_trace_csv,
)


def test_sgd_examples():
    st = make_optimizer("sgd", 0.1, momentum=0.0)
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([1.0])}, st)
    assert p["w"][0] == pytest.approx(0.9)
    sgd_step(p, {"w": np.array([0.0])}, st)
    assert p["w"][0] == pytest.approx(0.9)


def test_sgd_momentum_accumulates():
    st = make_optimizer("sgd", 0.1, momentum=0.9)
    p = {"w": np.array([0.0])}
    for _ in range(2):
        sgd_step(p, {"w": np.array([1.0])}, st)
    # v1 = 1, v2 = 1.9 ; p = -0.1 - 0.19
    assert p["w"][0] == pytest.approx(-0.29)


def test_adam_first_step_is_lr_sign():
    st = make_optimizer("adam", 1e-3)
    p = {"w": np.array([0.5, 0.5, 0.5])}
    adam_step(p, {"w": np.array([3.0, -0.01, 1e3])}, st)
    assert np.allclose(p["w"] - 0.5, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_step_decay_schedule():
    s = StepDecay(0.1, 0.5, 10)
    assert [s(0), s(9), s(10), s(25)] == [0.1, 0.1, 0.05, 0.025]
    st = OptimizerState("sgd", s)
    st.step = 10
    assert st.lr == 0.05


def linear_model(n_in, classes, seed=0):
    g = Graph()
    x = g.input("image", n_in)
    y = g.add("scale", [x], factor=1 / 128)
    y = g.add("flatten", [y])
    w = g.param("w", np.random.default_rng(seed).normal(0, 0.01, (classes, int(np.prod(n_in)))))
    y = g.add("fully_connected", [y, w])
    y = g.add("add", [y, g.param("b", np.zeros(classes))])
    g.outputs["logits"] = y
    g.outputs["loss"] = g.add("softmax_xent", [y, g.input("labels", (), integer=True)])
    return g


def toy(n=256, seed=0):
    return synth_dataset(SynthSpec(n=n, height=4, width=4, channels=1, noise=10, separation=80), seed)


def test_linear_model_loss_decreases_on_separable_data():
    # full-batch gradient descent with a small step: every step must lower the loss
    ds = toy(640)
    g = linear_model((4, 4, 1), 2)
    res = train_loop(g, ds, make_optimizer("sgd", 0.05, momentum=0.0), 10, seed=3, batch_size=640, mode=TrainMode.FP32)
    losses = res.losses[:10]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_linear_model_reaches_high_accuracy_within_100_steps():
    ds = toy(2000)
    g = linear_model((4, 4, 1), 2)
    train_loop(g, ds, make_optimizer("sgd", 0.05), 10, seed=0, batch_size=32, mode=TrainMode.FP32, max_steps=100)
    test = toy(500, seed=9)
    assert accuracy(g, test, TrainMode.FP32) > 0.95


def test_same_seed_same_trace(tmp_path):
    ds = toy(256)
    traces = []
    for i in range(2):
        g = linear_model((4, 4, 1), 2)
        res = train_loop(g, ds, make_optimizer("adam", 1e-2), 2, seed=7, batch_size=32, flip=True, crop_pad=1)
        write_trace_csv(res.trace, tmp_path / f"t{i}.csv", include_timing=False)
        traces.append(res.losses)
    assert traces[0] == traces[1]
    assert (tmp_path / "t0.csv").read_bytes() == (tmp_path / "t1.csv").read_bytes()


def test_trace_csv_columns(tmp_path):
    g = linear_model((4, 4, 1), 2)
    res = train_loop(g, toy(64), make_optimizer("sgd", 0.01), 1, seed=0, batch_size=32)
    write_trace_csv(res.trace, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["step", "epoch", "loss", "lr", "wall_ms"]
    assert len(rows) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_trace():
    ds = ImageDataset(np.full((64, 4, 4, 1), 255, np.uint8), np.zeros(64, np.int64), classes=2)
    g = linear_model((4, 4, 1), 2)
    with pytest.raises(TrainingDiverged) as exc:
        train_loop(g, ds, make_optimizer("sgd", 1e38, momentum=0.0), 5, seed=0, batch_size=32, mode=TrainMode.FP32)
    assert isinstance(exc.value.trace, list)
