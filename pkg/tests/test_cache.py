import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from faedkv.cache import (
    CompressedKV,
    FullCache,
    RowWindow,
    append_token,
    assemble,
    attend,
    load_snapshot,
    memory_report,
    prefill_compress,
    reconstruct,
    save_snapshot,
    softmax,
)
from faedkv.errors import ContextTooShortError, InvalidInputError
from faedkv.iwdft import Mode, iwdft_oracle
from faedkv.masks import PruneMask
from faedkv.spectral import idft_full

H, D = 2, 4


def kv(rng, n, heads=H, d=D):
    return rng.normal(size=(heads, n, d)), rng.normal(size=(heads, n, d))


def middle_oracle(X, S, R, extra, mode=Mode.EXACT):
    """Per-head time-domain view of iwdft_oracle over middle rows then ``extra`` rows."""
    N = X.shape[1]
    M = N - S - R
    out = []
    for h in range(X.shape[0]):
        seq = np.concatenate([X[h, S : N - R], extra[h]])
        state = iwdft_oracle(seq, M, mode)
        out.append(idft_full(len(seq) * state.bins, axis=0))
    return np.stack(out)


def test_prefill_geometry(rng):
    K, V = kv(rng, 100)
    c = prefill_compress(K, V)
    assert (c.period, c.sink, c.tail_k.shape[1], c.n_tokens) == (40, 10, 50, 100)
    np.testing.assert_array_equal(c.sink_k, K[:, :10])
    np.testing.assert_array_equal(c.tail_v, V[:, 50:])


def test_full_ratio_reconstructs_middle(rng):
    K, V = kv(rng, 130)
    k_mid, v_mid = prefill_compress(K, V, PruneMask.keep_all(1, 22)).reconstruct()
    np.testing.assert_allclose(k_mid, K[:, 10:80], rtol=0, atol=1e-8)
    np.testing.assert_allclose(v_mid, V[:, 10:80], rtol=0, atol=1e-8)


def test_stored_coefficients_per_head(rng):
    K, V = kv(rng, 104)  # M = 44
    mask = PruneMask.lowest(1, 22, 0.094)
    c = prefill_compress(K, V, mask)
    assert mask.kept_chunks(0) == (0, 1)
    assert c.freq_k.bins.shape == (4, H * D)  # 2 chunks x 2 bins, d channels per head
    assert c.freq_k.bins.size // H == 4 * D


def test_prefill_errors(rng):
    K, V = kv(rng, 60)
    with pytest.raises(ContextTooShortError):
        prefill_compress(K, V)
    K, V = kv(rng, 100)
    with pytest.raises(InvalidInputError):
        prefill_compress(K, V, PruneMask(2, 1.0, [(0, 1)], period=41))
    with pytest.raises(InvalidInputError):
        prefill_compress(K, V[:, :-1])


def test_zero_state_reconstructs_to_zero(rng):
    K, V = kv(rng, 80)
    K[:, 10:30] = 0
    k_mid, _ = prefill_compress(K, V).reconstruct()
    np.testing.assert_array_equal(k_mid, np.zeros_like(k_mid))


def test_reconstruct_after_folding_period_tokens(rng):
    S, R = 10, 50
    K, V = kv(rng, 90)
    M = 30
    c = prefill_compress(K, V, None, 0, S, R, Mode.EXACT)
    new_k, new_v = kv(rng, M + R)
    for t in range(M + R):
        c.append(new_k[:, t], new_v[:, t])
    assert c.tokens_folded == 2 * M
    k_mid, v_mid = c.reconstruct()
    np.testing.assert_allclose(k_mid, middle_oracle(K, S, R, new_k[:, :M]), rtol=0, atol=1e-8)
    np.testing.assert_allclose(v_mid, middle_oracle(V, S, R, new_v[:, :M]), rtol=0, atol=1e-8)


def test_append_below_capacity_leaves_state(rng):
    K, V = kv(rng, 80)
    c = prefill_compress(K, V, recent=5, sink=3)
    before = c.freq_k.bins.copy()
    for _ in range(5):
        c.append(*rng.normal(size=(2, H, D)))
    assert c.tokens_folded == 72 and np.array_equal(c.freq_k.bins, before)
    c.append(*rng.normal(size=(2, H, D)))
    assert c.tokens_folded == 73


def test_appends_at_capacity_match_oracle(rng):
    S, R = 3, 6
    K, V = kv(rng, 29)
    c = prefill_compress(K, V, None, 0, S, R, Mode.EXACT)
    new_k, new_v = kv(rng, 2 * R)
    for t in range(2 * R):  # first R fill the window, next R each fold one
        c.append(new_k[:, t], new_v[:, t])
    M = 20
    for X, new, state in ((K, new_k, c.freq_k), (V, new_v, c.freq_v)):
        for h in range(H):
            seq = np.concatenate([X[h, S : S + M], new[h, :R]])
            expected = iwdft_oracle(seq, M, Mode.EXACT).bins
            np.testing.assert_allclose(state.bins[:, h * D : (h + 1) * D], expected, rtol=0, atol=1e-9)


def test_append_rejects_non_finite(rng):
    c = prefill_compress(*kv(rng, 70))
    with pytest.raises(InvalidInputError):
        c.append(np.full((H, D), np.nan), np.zeros((H, D)))


def test_assemble_layout(rng):
    K, V = kv(rng, 100)
    c = prefill_compress(K, V, PruneMask.lowest(1, 22, 0.25))
    out = assemble(c)
    assert len(out) == 100
    np.testing.assert_array_equal(out.keys[:, :10], K[:, :10])
    np.testing.assert_array_equal(out.values[:, 50:], V[:, 50:])
    # the value block is reconstructed from the value state, not the key state
    _, v_mid = reconstruct(c)
    np.testing.assert_array_equal(out.values[:, 10:50], v_mid)


def test_full_ratio_assemble_is_original(rng):
    K, V = kv(rng, 150)
    out = prefill_compress(K, V).assemble()
    np.testing.assert_allclose(out.keys, K, rtol=0, atol=1e-8)
    np.testing.assert_allclose(out.values, V, rtol=0, atol=1e-8)


def test_window_rows_follow_tail(rng):
    K, V = kv(rng, 70)
    c = prefill_compress(K, V, sink=2, recent=3)
    new = rng.normal(size=(5, 2, H, D))
    for k, v in new:
        append_token(c, k, v)
    out = c.assemble()
    # two tokens folded into the middle, which keeps its 65-row period
    assert len(out) == 2 + 65 + 3 + 3 and c.n_tokens == len(out) + 2
    np.testing.assert_array_equal(out.keys[:, -3:], new[2:, 0].transpose(1, 0, 2))


@given(st.integers(0, 40), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_token_count_is_conserved(steps, recent, seed):
    r = np.random.default_rng(seed)
    c = prefill_compress(*kv(r, 20 + recent), sink=2, recent=recent)
    for i in range(steps):
        c.append(*r.normal(size=(2, H, D)))
        assert c.n_tokens == c.sink + c.tokens_folded + c.tail_k.shape[1] + len(c.window)
        assert c.n_tokens == 20 + recent + i + 1
        assert len(c.window) <= recent


def test_pruning_is_structural(rng):
    K, V = kv(rng, 104)
    c = prefill_compress(K, V, PruneMask.lowest(1, 22, 0.125))
    kept = c.kept_indices.copy()
    for _ in range(80):
        c.append(*rng.normal(size=(2, H, D)))
    np.testing.assert_array_equal(c.freq_k.indices, kept)
    np.testing.assert_array_equal(c.freq_v.indices, kept)
    assert c.freq_k.bins.shape[0] == kept.size


def test_decode_is_bit_deterministic(rng):
    K, V = kv(rng, 100)
    toks = rng.normal(size=(70, 2, H, D))

    def run():
        c = prefill_compress(K, V, PruneMask.lowest(1, 22, 0.25))
        for k, v in toks:
            c.append(k, v)
        return c.reconstruct()

    a, b = run(), run()
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_sparse_reconstruct_matches_dense_pipeline(rng):
    K, V = kv(rng, 120)
    c = prefill_compress(K, V, PruneMask.lowest(1, 22, 0.25))
    for _ in range(60):
        c.append(*rng.normal(size=(2, H, D)))
    state = c.freq_k
    dense = idft_full(state.tokens_folded * state.densify(), axis=0)
    np.testing.assert_allclose(c.reconstruct()[0], c._heads_view(dense), rtol=0, atol=1e-10)


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("block", [1, 7, 32])
def test_fused_attend_matches_assembled(mode, block, rng):
    K, V = kv(rng, 150, heads=3, d=5)
    mask = PruneMask.lowest(1, 22, 0.3)
    c = prefill_compress(K, V, mask, 0, 10, 20, mode)
    c.fold_block = block
    for step in range(60):
        c.append(rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
        q = 2 * rng.normal(size=(3, 5))
        full = c.assemble()
        expected = attend(q, full.keys, full.values)
        np.testing.assert_allclose(c.attend(q), expected, rtol=0, atol=1e-12)


def test_row_window_keeps_order():
    w = RowWindow(1, 1, 3)
    evicted = [w.push(np.array([[i]]), np.array([[-i]])) for i in range(10)]
    assert evicted[:3] == [None] * 3
    assert [int(e[0][0, 0]) for e in evicted[3:]] == list(range(7))
    k, v = w.rows()
    assert k[0, :, 0].tolist() == [7, 8, 9] and v[0, :, 0].tolist() == [-7, -8, -9]


def test_zero_capacity_window_folds_immediately(rng):
    c = prefill_compress(*kv(rng, 30), sink=0, recent=0)
    c.append(*rng.normal(size=(2, H, D)))
    assert c.tokens_folded == 31 and len(c.window) == 0


def test_memory_report_full_ratio(rng):
    N, S, R = 200, 10, 50
    M = N - S - R
    rep = memory_report(prefill_compress(*kv(rng, N)))
    assert rep.sink_reals == 2 * H * S * D and rep.recent_reals == 2 * H * R * D
    assert rep.frequency_reals == 4 * H * M * D
    assert rep.ratio == (S + R + 2 * M) / N
    assert rep.middle_ratio == 2.0 and rep.bin_ratio == 1.0


def test_memory_report_pruned_middle(rng):
    rep = prefill_compress(*kv(rng, 104), PruneMask.lowest(1, 22, 0.094)).memory_report()
    assert (rep.kept_bins, rep.period) == (4, 44)
    assert rep.middle_ratio == 2 * 4 / 44
    assert rep.total_reals == rep.sink_reals + rep.recent_reals + rep.frequency_reals


def test_memory_report_counts_window(rng):
    c = prefill_compress(*kv(rng, 100))
    for _ in range(7):
        c.append(*rng.normal(size=(2, H, D)))
    rep = c.memory_report()
    assert rep.recent_reals == 2 * H * 57 * D and rep.uncompressed_reals == 2 * H * 107 * D


def test_empty_full_cache_report():
    rep = FullCache(H, D).memory_report()
    assert (rep.total_reals, rep.uncompressed_reals, rep.ratio) == (0, 0, 0.0)


def test_full_cache_grows(rng):
    f = FullCache(H, D, capacity=2)
    rows = rng.normal(size=(5, 2, H, D))
    for k, v in rows:
        f.append(k, v)
    assert f.n_tokens == 5
    np.testing.assert_array_equal(f.keys, rows[:, 0].transpose(1, 0, 2))


def test_attend_examples(rng):
    k, v = rng.normal(size=(1, D)), rng.normal(size=(1, D))
    np.testing.assert_array_equal(attend(rng.normal(size=D), k, v), v[0])
    V = rng.normal(size=(9, D))
    np.testing.assert_allclose(attend(np.zeros(D), rng.normal(size=(9, D)), V), V.mean(axis=0), atol=1e-15)
    with pytest.raises(InvalidInputError):
        attend(np.zeros(D), np.zeros((0, D)), np.zeros((0, D)))


def test_attend_matches_direct_formula(rng):
    q, K, V = rng.normal(size=D), rng.normal(size=(32, D)), rng.normal(size=(32, D))
    scores = [sum(q[i] * K[t, i] for i in range(D)) / np.sqrt(D) for t in range(32)]
    w = np.exp(np.array(scores) - max(scores))
    expected = (w / w.sum()) @ V
    np.testing.assert_allclose(attend(q, K, V), expected, rtol=0, atol=1e-10)


def test_softmax_rows_sum_to_one(rng):
    s = softmax(rng.normal(scale=30, size=(5, 100)))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_snapshot_round_trip(tmp_path, rng):
    caches = []
    for layer in range(2):
        c = prefill_compress(*kv(rng, 100), PruneMask.lowest(2, 22, 0.25), layer, mode=Mode.EXACT)
        for _ in range(53 + layer):
            c.append(*rng.normal(size=(2, H, D)))
        caches.append(c)
    paths = save_snapshot(caches, tmp_path)
    assert [p.name for p in paths] == ["layer_000.fkvc", "layer_001.fkvc"]
    assert paths[0].read_bytes()[:4] == b"FKVC"
    loaded = load_snapshot(tmp_path)
    for a, b in zip(caches, loaded):
        assert (b.n_tokens, b.period, b.tokens_folded, len(b.window)) == (a.n_tokens, a.period, a.tokens_folded, len(a.window))
        assert b.freq_k.bins.tobytes() == a.freq_k.bins.tobytes()
        assert b.freq_v.mode is Mode.EXACT
        f32 = lambda x: x.astype(np.float32).astype(np.float64)  # noqa: E731
        np.testing.assert_array_equal(b.sink_k, f32(a.sink_k))
        np.testing.assert_array_equal(b.window.rows()[1], f32(a.window.rows()[1]))


def test_snapshot_rejects_full_cache_and_bad_files(tmp_path, rng):
    with pytest.raises(InvalidInputError):
        save_snapshot([FullCache(H, D)], tmp_path)
    (tmp_path / "layer_000.fkvc").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(InvalidInputError):
        load_snapshot(tmp_path)
