import numpy as np
import pytest

from qdeploy.autodiff import TrainMode, forward
from qdeploy.data import SynthSpec, compute_preproc_stats, synth_dataset
from qdeploy.errors import InvalidInputError
from qdeploy.plan import build_plan, run_plan
from qdeploy.pretrained import import_pretrained, load_weights, post_training_quantize, save_weights
from qdeploy.quant import choose_qformat, dequantize, quantize
from qdeploy.train import accuracy, make_optimizer, train_loop
from qdeploy.trainable import gen_trainable


@pytest.fixture(scope="module")
def toy():
    spec = SynthSpec(n=600, classes=2, noise=120, separation=30)
    train = synth_dataset(spec, 0)
    test = synth_dataset(SynthSpec(**{**spec.__dict__, "n": 400}), 1, "test")
    return train, test, compute_preproc_stats(train).params()


@pytest.fixture(scope="module")
def fp32_weights(toy):
    from conftest import TINY
    from qdeploy.manifest import parse_manifest

    train, _, pp = toy
    m = parse_manifest(TINY).with_options(scheme="fp32")
    g = gen_trainable(build_plan(m, preproc=pp), 0)
    train_loop(g, train, make_optimizer("sgd", 0.05), 3, seed=0, batch_size=32, mode=TrainMode.FP32)
    return {k: v.copy() for k, v in g.params.items()}


def test_shape_mismatch_lists_names(tiny_manifest, fp32_weights):
    bad = dict(fp32_weights)
    bad["conv1.weight"] = np.zeros((4, 3, 5, 5))
    del bad["fc1.bias"]
    with pytest.raises(InvalidInputError) as exc:
        import_pretrained(bad, tiny_manifest)
    assert "conv1.weight" in str(exc.value) and "fc1.bias" in str(exc.value)


def test_no_calibration_defaults_to_frac7(tiny_manifest, fp32_weights, toy):
    g = import_pretrained(fp32_weights, tiny_manifest, preproc=toy[2])
    for n in g.fake_quant_nodes():
        if n.attrs["role"] == "output":
            assert not n.attrs["tracker"].initialized
    fmts = g.formats()
    assert fmts[g.meta["tensor_fq"]["conv1.out"]].frac_bits == 7


def test_calibration_seeds_max_abs(tiny_manifest, fp32_weights, toy):
    train, _, pp = toy
    g = import_pretrained(fp32_weights, tiny_manifest, calibration=train.images[:100], preproc=pp)
    node = g.nodes[g.meta["tensor_fq"]["conv1.out"]]
    ref = gen_trainable(build_plan(tiny_manifest.with_options(scheme="fp32"), preproc=pp), 0)
    ref.params.update({k: v.copy() for k, v in fp32_weights.items()})
    forward(ref, {"image": train.images[:100]}, TrainMode.FP32, upto=ref.outputs["logits"])
    want = float(np.abs(ref.node("conv1.add").value).max())
    assert node.attrs["tracker"].initialized and node.attrs["tracker"].max_abs_ema == want


def test_zero_step_import_equals_direct_ptq(tiny_manifest, fp32_weights, toy, tmp_path):
    train, test, pp = toy
    save_weights(type("G", (), {"params": fp32_weights})(), tmp_path / "w.npz")
    weights = load_weights(tmp_path / "w.npz")
    graph, plan = post_training_quantize(weights, tiny_manifest, calibration=train.images[:200], preproc=pp)
    # direct post-training quantization: weights at max-abs formats
    for name in ("conv1.weight", "fc1.weight"):
        op = plan.op(name.split(".")[0])
        direct = quantize(fp32_weights[name], choose_qformat(float(np.abs(fp32_weights[name]).max())))
        assert np.array_equal(op.params.weights.data, direct.data)
        assert op.params.weights.format == direct.format
    logits = forward(graph, {"image": test.images}, TrainMode.QAT_EVAL, upto=graph.outputs["logits"])["logits"]
    assert np.array_equal(dequantize(run_plan(plan, test.images)["fc1.out"]), logits)


def test_fine_tune_not_worse_than_ptq(tiny_manifest, fp32_weights, toy):
    train, test, pp = toy
    g = import_pretrained(fp32_weights, tiny_manifest, calibration=train.images[:200], preproc=pp)
    g.freeze()
    ptq = accuracy(g, test)
    g.unfreeze()
    train_loop(g, train, make_optimizer("sgd", 0.01), 1, seed=2, batch_size=32)
    g.freeze()
    assert accuracy(g, test) >= ptq
