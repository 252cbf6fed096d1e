import inspect
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import conv_params, fc_params, q
from oracles import ref_conv_q7, ref_fc_q7, ref_matmul_offset, ref_round_shift
from qdeploy import gemm
from qdeploy.engine import (
    AccumulatorBuffer,
    ConvParams,
    FCParams,
    PreprocParams,
    accumulator_bound,
    conv2d_q7,
    derive_shifts,
    fully_connected_q7,
    matmul_asym,
    matmul_requant_shift,
    matmul_sym,
    maxpool_q7,
    preprocess_q7,
    relu_q7,
    requantize_dynamic,
    resolve_bias_frac,
    resolve_out_frac,
    round_shift,
    sat8,
)
from qdeploy.errors import FormatError, InvalidInputError
from qdeploy.quant import dequantize


def test_round_shift_examples():
    assert round_shift(100, 3) == 13
    assert round_shift(-100, 3) == -12
    assert (-100 + 4) >> 3 == -12
    assert round_shift(12345, 0) == 12345


def test_round_shift_exhaustive_16bit():
    acc = np.arange(-(1 << 15), 1 << 15, dtype=np.int64)
    for s in range(0, 17):
        want = np.floor(acc / 2.0**s + 0.5).astype(np.int64)
        assert np.array_equal(round_shift(acc, s), want), s


def test_round_shift_random_32bit(rng):
    acc = rng.integers(-(1 << 30), 1 << 30, 20000)
    for s in range(1, 31):
        got = round_shift(acc, s)
        assert got.tolist()[:200] == [ref_round_shift(int(a), s) for a in acc[:200]]
        assert np.array_equal(got, np.floor_divide(2 * acc + (1 << s), 1 << (s + 1)))


def test_round_shift_rejects_bad_shift():
    with pytest.raises(InvalidInputError):
        round_shift(1, 32)


def test_derive_shifts():
    assert derive_shifts(7, 7, 7, 5) == (7, 9)
    assert derive_shifts(7, 7, 14, 14) == (0, 0)
    assert derive_shifts(5, 6, 7, 8) == (4, 3)
    with pytest.raises(FormatError, match="unrepresentable format combination"):
        derive_shifts(3, 3, 7, 7)


def test_resolve_fracs_keep_shifts_legal():
    # a wanted bias format finer than the product format is clamped to it
    assert resolve_bias_frac(12, 4, 5, 9) <= 9
    assert resolve_out_frac(12, 4, 5) == 9
    fb = resolve_bias_frac(9, 7, 7, 800)
    assert accumulator_bound(800, 14 - fb) < 1 << 24


def test_conv_single_element():
    p = ConvParams(q(np.full((1, 1, 1, 1), 32), 7), q([0], 7), bias_shift=7, out_shift=7)
    out = conv2d_q7(q(np.full((1, 1, 1), 64), 7), p)
    assert out.data.reshape(-1).tolist() == [16]
    assert out.format.frac_bits == 7
    assert dequantize(out).item() == 0.125


def test_conv_zero_input_gives_zero(rng):
    w = rng.integers(-128, 128, (3, 2, 3, 3))
    p = ConvParams(q(w, 6), q([0, 0, 0], 6), 6, 8, 1, 1)
    assert not conv2d_q7(q(np.zeros((5, 5, 2), int), 6), p).data.any()


def test_conv_shape_mismatch():
    p = ConvParams(q(np.zeros((1, 2, 3, 3), int), 7), q([0], 7), 7, 7)
    with pytest.raises(InvalidInputError):
        conv2d_q7(q(np.zeros((5, 5, 3), int), 7), p)


def _random_conv(rng):
    h, w = rng.integers(3, 8, 2)
    c, o = rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.integers(-128, 128, (h, w, c))
    wt = rng.integers(-128, 128, (o, c, k, k))
    b = rng.integers(-128, 128, o)
    bias_shift, out_shift = int(rng.integers(0, 8)), int(rng.integers(0, 12))
    return x, wt, b, bias_shift, out_shift, stride, pad


def test_conv_matches_brute_force_oracle(rng):
    for _ in range(120):
        x, wt, b, bs, os_, stride, pad = _random_conv(rng)
        p = conv_params(wt, b, bs, os_, stride, pad)
        got = conv2d_q7(q(x, 7), p).data
        want = ref_conv_q7(x.tolist(), wt.tolist(), b.tolist(), bs, os_, stride, pad)
        assert got.tolist() == want


def test_conv_random_8x8x3_3x3(rng):
    x = rng.integers(-128, 128, (8, 8, 3))
    wt = rng.integers(-128, 128, (4, 3, 3, 3))
    b = rng.integers(-128, 128, 4)
    p = conv_params(wt, b, 5, 9, 1, 1)
    assert conv2d_q7(q(x, 7), p).data.tolist() == ref_conv_q7(x.tolist(), wt.tolist(), b.tolist(), 5, 9, 1, 1)


def test_conv_batched_equals_per_sample(rng):
    x = rng.integers(-128, 128, (4, 6, 6, 2))
    p = conv_params(rng.integers(-128, 128, (3, 2, 3, 3)), rng.integers(-128, 128, 3), 4, 8, 1, 1)
    batched = conv2d_q7(q(x, 7), p).data
    for i in range(4):
        assert np.array_equal(batched[i], conv2d_q7(q(x[i], 7), p).data)


def test_fc_examples():
    x = q([10, -20, 30, 40], 7)
    w = np.zeros((1, 4), int)
    w[0, 2] = 64  # 0.5 at frac 7
    out = fully_connected_q7(x, FCParams(q(w, 7), q([0], 7), 7, 7))
    assert out.data.tolist() == [round_shift(30 * 64, 7)] == [15]
    bias_only = FCParams(q(np.zeros((1, 4), int), 7), q([8], 7), 7, 7)
    assert fully_connected_q7(x, bias_only).data.tolist() == [8]


def test_fc_matches_brute_force_oracle(rng):
    for _ in range(110):
        n_in, n_out = int(rng.integers(1, 40)), int(rng.integers(1, 20))
        x = rng.integers(-128, 128, n_in)
        w = rng.integers(-128, 128, (n_out, n_in))
        b = rng.integers(-128, 128, n_out)
        bs, os_ = int(rng.integers(0, 8)), int(rng.integers(0, 14))
        got = fully_connected_q7(q(x, 7), fc_params(w, b, bs, os_)).data
        assert got.tolist() == ref_fc_q7(x.tolist(), w.tolist(), b.tolist(), bs, os_)


def test_fc_32_to_16(rng):
    x, w, b = rng.integers(-128, 128, 32), rng.integers(-128, 128, (16, 32)), rng.integers(-128, 128, 16)
    got = fully_connected_q7(q(x, 6), FCParams(q(w, 7), q(b, 6), 7, 9)).data
    assert got.tolist() == ref_fc_q7(x.tolist(), w.tolist(), b.tolist(), 7, 9)


def test_relu_and_maxpool():
    assert relu_q7(q([-5, 0, 7], 4)).data.tolist() == [0, 0, 7]
    assert maxpool_q7(q([[[1], [2]], [[3], [4]]], 3), 2, 2).data.reshape(-1).tolist() == [4]
    with pytest.raises(InvalidInputError):
        maxpool_q7(q(np.zeros((1, 1, 1), int), 3), 2, 2)


def test_maxpool_commutes_with_dequantize(rng):
    x = q(rng.integers(-128, 128, (2, 6, 6, 3)), 5)
    got = dequantize(maxpool_q7(x, 2, 2))
    f = dequantize(x)
    want = f.reshape(2, 3, 2, 3, 2, 3).max(axis=(2, 4))
    assert np.array_equal(got, want)


def test_preprocess_examples():
    p = PreprocParams(np.array([128]), 6)
    out = preprocess_q7(np.array([[[200]]], np.uint8), p)
    assert out.data.item() == 72 and dequantize(out).item() == (200 - 128) / 64
    assert preprocess_q7(np.array([[[128]]], np.uint8), p).data.item() == 0
    assert preprocess_q7(np.array([[[0]]], np.uint8), PreprocParams(np.array([200]), 6)).data.item() == -128


def test_matmul_asym_examples():
    assert matmul_asym([[5]], [[7]], 3, 2).tolist() == [[10]]
    assert 35 - 2 * 5 - 3 * 7 + 1 * 6 == 10
    a = np.arange(6).reshape(2, 3)
    b = np.arange(12).reshape(3, 4)
    assert np.array_equal(matmul_asym(a, b, 0, 0), a @ b)
    with pytest.raises(InvalidInputError):
        matmul_asym(np.zeros((2, 3)), np.zeros((2, 3)), 0, 0)


def test_matmul_asym_random_oracle(rng):
    for _ in range(100):
        m, k, n = rng.integers(1, 17, 3)
        a = rng.integers(0, 256, (m, k))
        b = rng.integers(0, 256, (k, n))
        a0, b0 = int(rng.integers(0, 256)), int(rng.integers(0, 256))
        assert matmul_asym(a, b, a0, b0).tolist() == ref_matmul_offset(a.tolist(), b.tolist(), a0, b0)


def test_matmul_asym_16x16x16(rng):
    a, b = rng.integers(0, 256, (16, 16)), rng.integers(0, 256, (16, 16))
    naive = ((a - 77)[:, :, None] * (b - 200)[None, :, :]).sum(axis=1)
    assert np.array_equal(matmul_asym(a, b, 77, 200), naive)


def test_matmul_asym_exhaustive_extremes():
    vals = (0, 1, 127, 255)
    count = 0
    for av in itertools.product(vals, repeat=4):
        a = np.array(av).reshape(2, 2)
        for bv in itertools.product(vals, repeat=4):
            b = np.array(bv).reshape(2, 2)
            for a0 in (0, 128):
                for b0 in (0, 128):
                    assert matmul_asym(a, b, a0, b0).tolist() == ref_matmul_offset(a.tolist(), b.tolist(), a0, b0)
                    count += 1
    assert count == 4**8 * 4


def test_symmetric_kernel_has_no_offset_pass():
    src = inspect.getsource(gemm.gemm_s8.py_func)
    assert "rowsum" not in src and "colsum" not in src
    assert "rowsum" in inspect.getsource(gemm.gemm_u8_offset.py_func)


def test_matmul_sym_and_fused_requant(rng):
    a = rng.integers(-128, 128, (9, 13)).astype(np.int8)
    b = rng.integers(-128, 128, (13, 5)).astype(np.int8)
    full = a.astype(np.int64) @ b
    assert np.array_equal(matmul_sym(a, b), full)
    assert np.array_equal(matmul_requant_shift(a, b, 9), sat8(round_shift(full, 9)))


def test_requantize_dynamic_examples(rng):
    r = requantize_dynamic(np.array([0, 255]))
    assert r.params.scale == 1.0 and r.params.zero_point == 0 and r.data.tolist() == [0, 255]
    const = requantize_dynamic(np.full(5, -17))
    assert ((const.data.astype(int) - const.params.zero_point) * const.params.scale == -17).all()
    acc = rng.integers(-50000, 90000, 1000)
    r = requantize_dynamic(AccumulatorBuffer(acc))
    rec = (r.data.astype(float) - r.params.zero_point) * r.params.scale
    assert np.all(np.abs(rec - acc) <= r.params.scale / 2 + 1e-6)
    assert r.memory_ratio == 4.0
    with pytest.raises(InvalidInputError):
        requantize_dynamic(np.array([], dtype=np.int64))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_saturation_total(seed):
    r = np.random.default_rng(seed)
    x = r.integers(-128, 128, (4, 4, 2))
    p = conv_params(r.integers(-128, 128, (2, 2, 3, 3)), r.integers(-128, 128, 2),
                    int(r.integers(0, 8)), int(r.integers(0, 4)), 1, 1)
    out = conv2d_q7(q(x, 7), p).data
    assert out.min() >= -128 and out.max() <= 127


def test_quantization_error_bound(rng):
    for _ in range(30):
        fi, fw, fo = 6, 7, 5
        x = rng.integers(-128, 128, (5, 5, 2))
        wt = rng.integers(-128, 128, (3, 2, 3, 3)) // 8
        b = rng.integers(-128, 128, 3)
        fb = 7
        bs, os_ = derive_shifts(fi, fw, fb, fo)
        out = conv2d_q7(q(x, fi), ConvParams(q(wt, fw), q(b, fb), bs, os_, 1, 1))
        # exact real-valued convolution of the dequantized operands
        xs = np.pad(x, ((1, 1), (1, 1), (0, 0))) * 2.0**-fi
        real = np.zeros((5, 5, 3))
        for i in range(5):
            for j in range(5):
                real[i, j] = np.einsum("hwc,ochw->o", xs[i : i + 3, j : j + 3], wt * 2.0**-fw) + b * 2.0**-fb
        inside = np.abs(real) < 127 * 2.0**-fo
        err = np.abs(dequantize(out) - real)
        assert np.all(err[inside] <= 0.5 * 2.0**-fo)
