import math

import numpy as np
import pytest

from faedkv.cache import CompressedKV, Compression, FullCache
from faedkv.errors import InvalidInputError
from faedkv.masks import PruneMask
from faedkv.model import (
    LayerWeights,
    ModelConfig,
    ToyModel,
    Weights,
    decode_step,
    greedy_generate,
    init_model,
    load_weights,
    perplexity,
    read_sequences,
    save_weights,
    sequence_perplexity,
    write_sequences,
)


def small(seed=0, **kw):
    cfg = dict(n_layers=2, n_heads=2, head_dim=8, vocab_size=32)
    cfg.update(kw)
    return init_model(ModelConfig(**cfg), seed)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ModelConfig(n_heads=0)
    assert ModelConfig(n_heads=3, head_dim=5).d_model == 15
    assert ModelConfig(ffn=True, n_heads=1, head_dim=4).d_ff == 16


def test_project_identity_key_weights():
    model = small(n_layers=1, n_heads=1, head_dim=4)
    model.weights.layers[0].wk = np.eye(4)
    e1 = np.array([1.0, 0, 0, 0])
    _, k, _ = model.project_qkv(e1, 0)
    np.testing.assert_array_equal(k, e1[None])


def test_project_zero_input():
    q, k, v = small().project_qkv(np.zeros(16), 1)
    assert not (q.any() or k.any() or v.any())


def test_project_matches_dot_products(rng):
    model = small()
    x = rng.normal(size=16)
    q, k, v = model.project_qkv(x, 1)
    lw = model.weights.layers[1]
    for out, W in ((q, lw.wq), (k, lw.wk), (v, lw.wv)):
        for h in range(2):
            for i in range(8):
                col = h * 8 + i
                assert out[h, i] == pytest.approx(sum(x[j] * W[j, col] for j in range(16)), abs=1e-12)


def test_project_shape_mismatch():
    with pytest.raises(InvalidInputError):
        small().project_qkv(np.zeros(15), 0)


def test_weight_shape_checks():
    model = small()
    bad = Weights(model.weights.embed, model.weights.unembed[:, :5], model.weights.layers)
    with pytest.raises(InvalidInputError):
        ToyModel(model.config, bad)


def test_full_cache_decode_matches_recompute(rng):
    model = small(ffn=True)
    tokens = rng.integers(0, 32, 40)
    reference = model.forward(tokens)
    logits, caches = model.prefill(tokens[:25])
    np.testing.assert_allclose(logits, reference[:25], rtol=0, atol=1e-12)
    for t in range(25, 40):
        step = decode_step(model, caches, int(tokens[t]))
        np.testing.assert_allclose(step, reference[t], rtol=0, atol=1e-8)


def test_compressed_full_ratio_matches_full_cache(rng):
    model = small()
    prompt = rng.integers(0, 32, 120)
    comp = Compression(10, 50, PruneMask.keep_all(2, 22))
    logits_c, cc = model.prefill(prompt, comp)
    logits_f, fc = model.prefill(prompt)
    assert all(isinstance(c, CompressedKV) for c in cc)
    for tok in rng.integers(0, 32, 30):
        a, b = model.decode_step(cc, int(tok)), model.decode_step(fc, int(tok))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-5)


def test_short_prompt_falls_back_to_full_cache(rng):
    _, caches = small().prefill(rng.integers(0, 32, 60), Compression())
    assert all(isinstance(c, FullCache) for c in caches)


def test_decode_is_deterministic(rng):
    model = small()
    prompt = rng.integers(0, 32, 100)
    comp = Compression(mask=PruneMask.lowest(2, 22, 0.25))
    a, _ = greedy_generate(model, prompt, 70, comp)
    b, _ = greedy_generate(model, prompt, 70, comp)
    assert a == b


def test_decode_rejects_bad_token(rng):
    model = small()
    _, caches = model.prefill([1, 2, 3])
    with pytest.raises(InvalidInputError):
        model.decode_step(caches, 32)
    with pytest.raises(InvalidInputError):
        model.prefill([])


def test_greedy_choices_agree_when_gap_is_clear(rng):
    model = small(seed=4)
    prompt = rng.integers(0, 32, 128)
    ids_full, hist_full = greedy_generate(model, prompt, 10)
    ids_comp, _ = greedy_generate(model, prompt, 10, Compression(mask=PruneMask.keep_all(2, 22)))
    for a, b, logits in zip(ids_full, ids_comp, hist_full):
        top = np.sort(logits)[-2:]
        if top[1] - top[0] >= 1e-3:
            assert a == b
        else:
            break


def test_uniform_logits_give_vocab_perplexity(rng):
    model = small()
    model.weights.unembed[:] = 0.0
    assert perplexity(model, rng.integers(0, 32, 20)) == pytest.approx(32.0, rel=1e-15)


def test_confident_logits_approach_one():
    targets = np.array([3, 1, 4, 1])
    logits = np.full((4, 8), -50.0)
    logits[np.arange(4), targets] = 50.0
    assert sequence_perplexity(logits, targets) == pytest.approx(1.0, abs=1e-12)


def test_perplexity_matches_logsumexp_oracle(rng):
    model = small(seed=7)
    seq = rng.integers(0, 32, 64)
    logits = model.forward(seq[:-1])
    total = 0.0
    for i, row in enumerate(logits):
        m = max(row)
        lse = m + math.log(sum(math.exp(z - m) for z in row))
        total += lse - row[seq[i + 1]]
    assert perplexity(model, seq) == pytest.approx(math.exp(total / 63), rel=1e-8)


def test_perplexity_needs_two_tokens():
    with pytest.raises(InvalidInputError):
        perplexity(small(), [3])


def test_perplexity_invariant_under_relabeling(rng):
    model = small(seed=2)
    perm = rng.permutation(32)
    w = model.weights
    relabeled = ToyModel(model.config, Weights(w.embed[np.argsort(perm)], w.unembed[:, np.argsort(perm)], w.layers))
    seq = rng.integers(0, 32, 50)
    assert perplexity(relabeled, perm[seq]) == pytest.approx(perplexity(model, seq), rel=1e-10)


def test_compressed_perplexity_path(rng):
    model = small()
    seq = rng.integers(0, 32, 150)
    full = perplexity(model, seq)
    comp = perplexity(model, seq, Compression(mask=PruneMask.keep_all(2, 22)), prefill_len=100)
    assert comp == pytest.approx(full, rel=1e-6)


def test_weights_round_trip(tmp_path):
    model = small(ffn=True, positional=False)
    path = tmp_path / "m.fkvw"
    save_weights(model, path)
    back = load_weights(path)
    assert back.config == model.config
    for (n1, a), (n2, b) in zip(model.weights.named_tensors(), back.weights.named_tensors()):
        assert n1 == n2 and np.array_equal(a, b)
    assert path.read_bytes()[:4] == b"FKVW"


def test_weights_bad_files(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE")
    with pytest.raises(InvalidInputError):
        load_weights(path)
    save_weights(small(), path)
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(InvalidInputError):
        load_weights(path)


def test_sequence_file_round_trip(tmp_path):
    path = tmp_path / "seqs.txt"
    write_sequences(path, [[1, 2, 3], [40]])
    assert path.read_text() == "1 2 3\n40\n"
    assert [s.tolist() for s in read_sequences(path)] == [[1, 2, 3], [40]]
    path.write_text("1 x\n")
    with pytest.raises(InvalidInputError):
        read_sequences(path)


def test_handbuilt_layers_are_accepted():
    D = 4
    eye = np.eye(D)
    layers = [LayerWeights(eye, eye, eye, eye, None, None)]
    model = ToyModel(ModelConfig(n_layers=1, n_heads=1, head_dim=D, vocab_size=3), Weights(np.ones((3, D)), np.ones((D, 3)), layers))
    assert model.forward([0, 1]).shape == (2, 3)
