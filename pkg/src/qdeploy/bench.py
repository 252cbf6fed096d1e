"""Symmetric vs. asymmetric kernel timings and requantization memory."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import AccumulatorBuffer, matmul_asym, matmul_requant_shift, matmul_sym, requantize_dynamic

DEFAULT_SIZES = (32, 48, 64)
MIN_REPEATS = 5


@dataclass
class BenchRow:
    bench: str  # "matmul" or "requant"
    size: int
    baseline_ms: float  # symmetric / on-the-fly shift
    variant_ms: float  # asymmetric / dynamic
    ratio: float  # median of per-repeat variant/baseline
    baseline_bytes: int = 0
    variant_bytes: int = 0

    @property
    def memory_ratio(self) -> float:
        return self.variant_bytes / self.baseline_bytes if self.baseline_bytes else 0.0


def _clock(fn, inner: int) -> float:
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def paired_timing(base, variant, repeats: int = 7, warmup: int = 1, inner: int = 20,
                  min_block_s: float = 2e-3) -> tuple:
    """Interleave the two callables; returns (median base s, median variant s, median ratio).

    ``inner`` is raised until one timed block of ``base`` lasts at least
    ``min_block_s``, so microsecond kernels are not lost in timer noise.
    """
    if repeats < MIN_REPEATS:
        raise ValueError(f"need at least {MIN_REPEATS} timed repeats")
    for _ in range(warmup):
        base()
        variant()
    once = _clock(base, 3)
    if once > 0:
        inner = max(inner, math.ceil(min_block_s / once))
    tb, tv = [], []
    for _ in range(repeats):
        tb.append(_clock(base, inner))
        tv.append(_clock(variant, inner))
    ratios = [v / b for b, v in zip(tb, tv)]
    return statistics.median(tb), statistics.median(tv), statistics.median(ratios)


def _operands(n: int, seed: int):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (n, n)).astype(np.uint8)
    b = rng.integers(0, 256, (n, n)).astype(np.uint8)
    # same data for both paths: the signed view is the codes re-centred on zero
    sa = (a.astype(np.int16) - 128).astype(np.int8)
    sb = (b.astype(np.int16) - 128).astype(np.int8)
    return a, b, sa, sb


def bench_matmul(sizes=DEFAULT_SIZES, repeats: int = 7, seed: int = 0) -> list[BenchRow]:
    rows = []
    for n in sizes:
        a, b, sa, sb = _operands(n, seed)
        tb, tv, r = paired_timing(lambda: matmul_sym(sa, sb), lambda: matmul_asym(a, b, 128, 128), repeats)
        rows.append(BenchRow("matmul", n, tb * 1e3, tv * 1e3, r, n * n * 4, n * n * 4))
    return rows


def bench_requant(sizes=DEFAULT_SIZES, repeats: int = 7, seed: int = 0, shift: int = 10) -> list[BenchRow]:
    rows = []
    for n in sizes:
        _, _, sa, sb = _operands(n, seed)

        def dynamic():
            return requantize_dynamic(AccumulatorBuffer(matmul_sym(sa, sb)))

        tb, tv, r = paired_timing(lambda: matmul_requant_shift(sa, sb, shift), dynamic, repeats)
        res = dynamic()
        rows.append(BenchRow("requant", n, tb * 1e3, tv * 1e3, r, res.output_bytes, res.staging_bytes))
    return rows


def write_bench_csv(rows, path, include_timing: bool = True) -> None:
    cols = ["bench", "size"]
    if include_timing:
        cols += ["baseline_ms", "variant_ms", "ratio"]
    cols += ["baseline_bytes", "variant_bytes", "memory_ratio"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            row = [r.bench, r.size]
            if include_timing:
                row += [f"{r.baseline_ms:.6f}", f"{r.variant_ms:.6f}", f"{r.ratio:.4f}"]
            row += [r.baseline_bytes, r.variant_bytes, f"{r.memory_ratio:.2f}"]
            w.writerow(row)
