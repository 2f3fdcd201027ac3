import numpy as np
import pytest

from faedkv.bench import bench_length, scaling_exponent, time_call, update_reconstruct_ns


def test_time_call_statistics():
    med, iqr = time_call(lambda: sum(range(100)), reps=5, inner=2)
    assert isinstance(med, int) and med > 0 and iqr >= 0


def test_zero_steps_gives_prefill_only():
    rows = bench_length(256, r=0.25, steps=0, reps=2, heads=1, head_dim=8)
    assert [r["phase"] for r in rows] == ["prefill"]
    assert set(rows[0]) == {"phase", "context_len", "r", "median_ns", "iqr_ns"}


def test_decode_phases_present():
    rows = bench_length(256, r=0.25, steps=2, reps=2, heads=1, head_dim=8)
    assert [r["phase"] for r in rows] == ["prefill", "decode", "decode_reconstruct", "full_attend"]
    rows = bench_length(256, r=0.25, steps=2, reps=2, heads=1, head_dim=8, reconstruct=False)
    assert "decode_reconstruct" not in [r["phase"] for r in rows]


def test_scaling_exponent_recovers_power_law():
    n = np.array([512, 1024, 2048, 4096])
    assert scaling_exponent(n, 3.0 * n**1.5) == pytest.approx(1.5)


@pytest.mark.timing
def test_prefill_transform_is_subquadratic():
    lengths = [1024, 2048, 4096]
    med = [bench_length(n, r=0.1, steps=0, reps=5, heads=2, head_dim=64)[0]["median_ns"] for n in lengths]
    middle = [n - 60 for n in lengths]
    assert scaling_exponent(middle, med) < 2.0


@pytest.mark.timing
def test_update_reconstruct_cost_grows_with_kept_bins():
    a = update_reconstruct_ns(1024, 100, channels=128)
    b = update_reconstruct_ns(1024, 400, channels=128)
    assert b > a
