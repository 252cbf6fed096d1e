import pytest

from qdeploy.bench import bench_matmul, bench_requant, paired_timing, write_bench_csv


def test_requant_memory_ratio_is_four():
    rows = bench_requant(sizes=(8, 16), repeats=5)
    assert [r.memory_ratio for r in rows] == [4.0, 4.0]
    assert rows[1].variant_bytes == 4 * 16 * 16 and rows[1].baseline_bytes == 16 * 16


def test_memory_report_reproducible(tmp_path):
    for i in range(2):
        rows = bench_matmul((8,), repeats=5) + bench_requant((8,), repeats=5)
        write_bench_csv(rows, tmp_path / f"b{i}.csv", include_timing=False)
    assert (tmp_path / "b0.csv").read_bytes() == (tmp_path / "b1.csv").read_bytes()


def test_needs_five_repeats():
    with pytest.raises(ValueError):
        paired_timing(lambda: None, lambda: None, repeats=3)
