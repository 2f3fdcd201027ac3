import numpy as np
import pytest

from faedkv.errors import InvalidInputError
from faedkv.masks import PruneMask
from faedkv.needle import (
    MAX_DISTRACTOR_COSINE,
    build_needle_probe,
    compressed_retrieve,
    depth_positions,
    flatness,
    protected,
    retrieve,
    run_needle,
    truncated_retrieve,
)


def test_probe_construction():
    p = build_needle_probe(300, 123, d=32, seed=1)
    assert p.answer == 123 and p.keys.shape == (300, 32)
    np.testing.assert_allclose(np.linalg.norm(p.keys, axis=1), 1.0, atol=1e-12)
    cos = p.keys @ p.keys[123]
    cos[123] = 0
    assert np.max(np.abs(cos)) <= MAX_DISTRACTOR_COSINE


@pytest.mark.parametrize("pos", [-1, 300])
def test_probe_rejects_bad_position(pos):
    with pytest.raises(InvalidInputError):
        build_needle_probe(300, pos)


@pytest.mark.parametrize("pos", [0, 57, 150, 299])
def test_uncompressed_retrieval_succeeds(pos):
    p = build_needle_probe(300, pos, d=64, seed=pos)
    assert retrieve(p, p.keys, p.values) == pos


@pytest.mark.parametrize("pos", [0, 5, 9, 250, 299])
def test_protected_positions_survive_heavy_pruning(pos):
    p = build_needle_probe(300, pos, d=64, seed=2)
    assert protected(pos, 300, 10, 50)
    assert compressed_retrieve(p, PruneMask.lowest(1, 22, 0.094), 10, 50) == pos


def test_full_ratio_keeps_every_depth():
    rows = run_needle(400, 1.0, reps=3, d=64)
    assert [r["accuracy"] for r in rows] == [1.0] * 9


def test_truncation_loses_the_middle():
    rows = run_needle(400, 0.5, reps=3, d=64, method="truncate")
    acc = [r["accuracy"] for r in rows]
    assert acc[0] == acc[-1] == 1.0 and acc[1:-1] == [0.0] * 7
    assert all(r["r"] == 0.0 for r in rows)


def test_fused_and_assembled_retrieval_agree():
    mask = PruneMask.lowest(1, 22, 0.25)
    for seed in range(5):
        p = build_needle_probe(500, 220, d=64, seed=seed)
        assert compressed_retrieve(p, mask, 10, 50, fused=True) == compressed_retrieve(p, mask, 10, 50, fused=False)


def test_truncated_retrieve_uses_only_verbatim_rows():
    p = build_needle_probe(200, 100, d=32, seed=0)
    assert truncated_retrieve(p, 10, 50) != 100


def test_depth_positions():
    pos = depth_positions(2048)
    assert [f for f, _ in pos] == [i / 8 for i in range(9)]
    assert pos[0][1] == 0 and pos[-1][1] == 2047 and pos[4][1] == 1024


def test_flatness_ignores_protected_cells():
    rows = [{"context_len": 100, "position": p, "accuracy": a} for p, a in [(0, 0.1), (30, 0.8), (60, 0.9), (99, 0.0)]]
    assert flatness(rows, 10, 20) == pytest.approx(0.1)
    assert flatness([], 10, 20) == 0.0


def test_unknown_method():
    with pytest.raises(InvalidInputError):
        run_needle(200, 0.5, 1, method="oracle")
