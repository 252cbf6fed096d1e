import json

import numpy as np
import pytest

from qdeploy.errors import FormatError, PlanError
from qdeploy.manifest import builtin_manifest, parse_manifest
from qdeploy.plan import (
    audit_allocation,
    build_plan,
    run_plan,
    run_plan_in_arena,
)
from qdeploy.quant import RangeTracker

HEADER = 'format = "qdeploy-manifest"\nversion = 1\npreprocess = "none"\n'


def int8_manifest(in_ch=1, kernel=3, layer_extra="", extra_layers=""):
    return parse_manifest(
        HEADER + f'[input]\nshape = [6, 6, {in_ch}]\ndtype = "int8"\nfrac_bits = 7\n'
        f'[[layers]]\nkind = "conv2d"\nname = "conv1"\nout_channels = 2\nkernel = {kernel}\n{layer_extra}'
        + extra_layers
    )


def test_single_conv_all_frac7():
    m = int8_manifest(layer_extra="weight_frac = 7\nbias_frac = 7\nout_frac = 7\n")
    plan = build_plan(m)
    p = plan.op("conv1").params
    assert (p.bias_shift, p.out_shift) == (7, 7)


def test_negative_shift_names_tensor():
    m = int8_manifest(layer_extra="weight_frac = 7\nbias_frac = 20\n")
    with pytest.raises(FormatError) as exc:
        build_plan(m)
    assert exc.value.tensor == "conv1.bias"
    m = int8_manifest(layer_extra="weight_frac = 7\nout_frac = 15\n")
    with pytest.raises(FormatError) as exc:
        build_plan(m)
    assert exc.value.tensor == "conv1.out"


def test_accumulator_gate():
    m = int8_manifest(in_ch=120, kernel=3, layer_extra="bias_frac = 7\n")  # fan_in 1080: 127*127*1080 > 2^24
    with pytest.raises(PlanError, match="2\\^24"):
        build_plan(m)
    assert build_plan(m, allow_wide_accumulator=True).op("conv1").params.fan_in == 1080


def test_auto_bias_format_respects_gate():
    m = int8_manifest(in_ch=32, kernel=5)  # fan_in 800
    plan = build_plan(m)
    p = plan.op("conv1").params
    assert 127 * 127 * 800 + 128 * 2**p.bias_shift < 2**24


def test_ranges_drive_formats():
    m = int8_manifest()
    plan = build_plan(m, {"conv1.out": RangeTracker(3.0, 0.99, True), "conv1.weight": RangeTracker(0.2, 0.99, True)})
    assert plan.tensors["conv1.out"].format.frac_bits == 5
    assert plan.tensors["conv1.weight"].format.frac_bits == 9


def test_disjoint_lifetimes_share_arena():
    extra = ('[[layers]]\nkind = "conv2d"\nname = "conv2"\nout_channels = 2\nkernel = 3\npadding = 1\n'
             '[[layers]]\nkind = "conv2d"\nname = "conv3"\nout_channels = 2\nkernel = 3\npadding = 1\n')
    plan = build_plan(int8_manifest(extra_layers=extra))
    shared = [
        (a.name, b.name)
        for a in plan.buffers for b in plan.buffers
        if a.id < b.id and not a.overlaps_in_time(b)
        and a.offset < b.offset + b.size and b.offset < a.offset + a.size
    ]
    assert shared  # some region is reused by buffers that are never live together
    assert plan.arena_size < sum(b.size for b in plan.buffers)
    assert audit_allocation(plan) == []


def test_cmsis_plan_structure_and_allocation():
    m = builtin_manifest("cmsis_cifar10")
    plan = build_plan(m)
    assert [op.name for op in plan.ops] == ["preprocess"] + [layer.name for layer in m.layers]
    assert [op.kind for op in plan.ops[1:]] == [layer.kind for layer in m.layers]
    assert audit_allocation(plan) == []
    assert plan.arena_size >= plan.peak_live
    assert plan.op("conv1").macs == 32 * 32 * 32 * 3 * 25
    assert plan.op("fc1").macs == 4 * 4 * 64 * 10
    assert not plan.trained


def test_relu_runs_in_place(tiny_manifest):
    plan = build_plan(tiny_manifest)
    assert plan.buffer_of("relu1.out") is plan.buffer_of("pool1.out")


def test_arena_execution_matches_batched(tiny_manifest, rng):
    from qdeploy.autodiff import TrainMode, forward
    from qdeploy.plan import deploy_plan
    from qdeploy.trainable import gen_trainable

    g = gen_trainable(build_plan(tiny_manifest), 0)
    x = rng.integers(0, 256, (16, 8, 8, 3)).astype(np.uint8)
    forward(g, {"image": x}, TrainMode.QAT_TRAIN, upto=g.outputs["logits"])
    g.freeze()
    plan = deploy_plan(g)
    full = run_plan(plan, x)
    for i in range(4):
        one = run_plan_in_arena(plan, x[i : i + 1])
        for t, v in one.items():
            assert np.array_equal(v.data, full[t].data[i : i + 1]), t


def test_dynamic_requant_staging():
    m = builtin_manifest("cmsis_cifar10")
    shift, dyn = build_plan(m), build_plan(m, requant="dynamic")
    staging = [b for b in dyn.buffers if b.kind == "staging"]
    assert len(staging) == 4 and not any(b.kind == "staging" for b in shift.buffers)
    assert dyn.staging_ratio() == 4.0
    assert 2.0 <= dyn.staging_ratio() <= 4.0
    assert dyn.arena_size > shift.arena_size
    assert audit_allocation(dyn) == []


def test_report_is_deterministic_json():
    m = builtin_manifest("cmsis_cifar10")
    a, b = build_plan(m).to_json(), build_plan(m).to_json()
    assert a == b
    rep = json.loads(a)
    assert rep["arena_bytes"] > 0 and rep["total_macs"] > 0
    assert {"bias_shift", "out_shift", "macs"} <= set(rep["ops"][1])


def test_estimate_only_schemes(tiny_manifest, rng):
    for scheme in ("fp32", "asym"):
        plan = build_plan(tiny_manifest.with_options(scheme=scheme))
        assert plan.arena_size > 0 and not plan.executable
        with pytest.raises(PlanError):
            run_plan(plan, rng.integers(0, 256, (1, 8, 8, 3)).astype(np.uint8))
    asym = build_plan(tiny_manifest.with_options(scheme="asym"))
    assert asym.requant == "dynamic"
