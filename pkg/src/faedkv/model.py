"""A small deterministic decoder-only attention stack.

The model exists to drive the caches the way a host LLM would: token
embedding plus sinusoidal positions, then per layer a multi-head attention
block (with residual) and an optional ReLU feed-forward block, then an
unembedding to logits. There is no normalization and no training.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .cache import Compression, CompressedKV, FullCache, prefill_compress
from .errors import InvalidInputError

KVHook = Callable[[int, np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 64
    max_context: int = 8192
    ffn: bool = False
    d_ff: int = 0
    positional: bool = True

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "max_context"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.ffn and self.d_ff < 1:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None


@dataclass
class Weights:
    embed: np.ndarray
    unembed: np.ndarray
    layers: list[LayerWeights]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("embed", self.embed), ("unembed", self.unembed)]
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                tensor = getattr(lw, name)
                if tensor is not None:
                    out.append((f"layers.{i}.{name}", tensor))
        return out


def sinusoidal_positions(positions, d_model: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    i = np.arange(d_model)
    freq = 1.0 / (10000.0 ** ((i - i % 2) / d_model))
    angles = pos * freq
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


class ToyModel:
    def __init__(self, config: ModelConfig, weights: Weights):
        self.config = config
        self.weights = weights
        self._check_shapes()

    def _check_shapes(self) -> None:
        c, w = self.config, self.weights
        D, V = c.d_model, c.vocab_size
        expected = {"embed": (V, D), "unembed": (D, V)}
        for i in range(c.n_layers):
            for name in ("wq", "wk", "wv", "wo"):
                expected[f"layers.{i}.{name}"] = (D, D)
            if c.ffn:
                expected[f"layers.{i}.w1"] = (D, c.d_ff)
                expected[f"layers.{i}.w2"] = (c.d_ff, D)
        got = dict(w.named_tensors())
        if len(w.layers) != c.n_layers or set(got) != set(expected):
            raise InvalidInputError("weights do not match the model config")
        for name, shape in expected.items():
            if got[name].shape != shape:
                raise InvalidInputError(f"{name} has shape {got[name].shape}, expected {shape}")
            if not np.all(np.isfinite(got[name])):
                raise InvalidInputError(f"{name} has non-finite entries")

    # -- building blocks -------------------------------------------------------

    def embed(self, tokens, start: int = 0) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InvalidInputError(f"token ids must lie in [0, {self.config.vocab_size})")
        if start + tokens.size > self.config.max_context:
            raise InvalidInputError(f"sequence exceeds max context {self.config.max_context}")
        h = self.weights.embed[tokens]
        if self.config.positional:
            h = h + sinusoidal_positions(np.arange(start, start + tokens.size), self.config.d_model)
        return h

    def project_qkv(self, x, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Query/key/value projections split per head.

        ``x`` of shape ``(d_model,)`` gives ``(heads, head_dim)`` outputs;
        ``(T, d_model)`` gives ``(heads, T, head_dim)``.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.d_model or x.ndim > 2:
            raise InvalidInputError(f"input of shape {x.shape} does not match d_model={self.config.d_model}")
        lw = self.weights.layers[layer]
        H, d = self.config.n_heads, self.config.head_dim

        def split(y: np.ndarray) -> np.ndarray:
            if y.ndim == 1:
                return y.reshape(H, d)
            return y.reshape(y.shape[0], H, d).transpose(1, 0, 2)

        return split(x @ lw.wq), split(x @ lw.wk), split(x @ lw.wv)

    def _merge_heads(self, o: np.ndarray) -> np.ndarray:
        if o.ndim == 2:
            return o.reshape(-1)
        return o.transpose(1, 0, 2).reshape(o.shape[1], -1)

    def _finish_layer(self, h: np.ndarray, attn: np.ndarray, layer: int) -> np.ndarray:
        lw = self.weights.layers[layer]
        h = h + self._merge_heads(attn) @ lw.wo
        if self.config.ffn:
            h = h + np.maximum(h @ lw.w1, 0.0) @ lw.w2
        return h

    # -- whole-sequence evaluation ---------------------------------------------

    def forward(self, tokens, kv_hook: KVHook | None = None, record: list | None = None) -> np.ndarray:
        """Causal full-recompute pass returning ``(T, vocab)`` logits.

        ``kv_hook(layer, K, V)`` may return replacement key/value tensors for
        a layer before attention is evaluated. ``record`` collects the
        ``(K, V)`` each layer actually attended over.
        """
        h = self.embed(tokens)
        T = h.shape[0]
        causal = np.triu(np.full((T, T), -np.inf), k=1)
        scale = 1.0 / math.sqrt(self.config.head_dim)
        for layer in range(self.config.n_layers):
            q, k, v = self.project_qkv(h, layer)
            if kv_hook is not None:
                k, v = kv_hook(layer, k, v)
            if record is not None:
                record.append((k, v))
            scores = np.einsum("htd,hsd->hts", q, k) * scale + causal
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            h = self._finish_layer(h, np.einsum("hts,hsd->htd", w, v), layer)
        return h @ self.weights.unembed

    # -- incremental decoding --------------------------------------------------

    def prefill(self, tokens, compression: Compression | None = None) -> tuple[np.ndarray, list]:
        """Run the prompt with full attention and build one cache per layer.

        With ``compression`` the caches are compressed, unless the prompt is
        too short to leave a middle segment, in which case they stay full.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise InvalidInputError("prompt is empty")
        record: list = []
        logits = self.forward(tokens, record=record)
        N = tokens.size
        caches: list = []
        for layer, (k, v) in enumerate(record):
            if compression is None or N <= compression.sink + compression.recent:
                caches.append(FullCache.from_prefill(k, v))
            else:
                caches.append(prefill_compress(k, v, compression.mask, layer, compression.sink,
                                               compression.recent, compression.mode))
        return logits, caches

    def decode_step(self, caches: list, token: int) -> np.ndarray:
        """Feed one token through the stack, appending to ``caches`` in place."""
        if not 0 <= int(token) < self.config.vocab_size:
            raise InvalidInputError(f"token id {token} outside vocabulary")
        pos = caches[0].n_tokens
        h = self.embed([token], start=pos)[0]
        for layer, cache in enumerate(caches):
            q, k, v = self.project_qkv(h, layer)
            cache.append(k, v)
            h = self._finish_layer(h, cache.attend(q), layer)
        return h @ self.weights.unembed


def decode_step(model: ToyModel, caches: list, token: int) -> np.ndarray:
    return model.decode_step(caches, token)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    return logits - m - np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))


def sequence_perplexity(logits: np.ndarray, targets) -> float:
    """``exp`` of the mean next-token cross-entropy; ``logits[i]`` predicts ``targets[i]``."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    nll = -logp[np.arange(targets.size), targets]
    return float(np.exp(np.mean(nll)))


def perplexity(model: ToyModel, tokens, compression: Compression | None = None,
               prefill_len: int | None = None, kv_hook: KVHook | None = None) -> float:
    """Next-token perplexity of ``tokens``.

    Without ``compression`` this is one causal pass (optionally with a
    ``kv_hook``). With it, the first ``prefill_len`` tokens are prefilled
    and compressed, and the rest are scored one decode step at a time.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise InvalidInputError("perplexity needs at least two tokens")
    if compression is None:
        logits = model.forward(tokens[:-1], kv_hook=kv_hook)
        return sequence_perplexity(logits, tokens[1:])
    if prefill_len is None:
        prefill_len = max(compression.sink + compression.recent + 1, tokens.size // 2)
    if not 1 <= prefill_len < tokens.size:
        raise InvalidInputError(f"prefill length {prefill_len} must leave tokens to decode")
    logits, caches = model.prefill(tokens[:prefill_len], compression)
    rows = [logits]
    for tok in tokens[prefill_len:-1]:
        rows.append(model.decode_step(caches, int(tok))[None])
    return sequence_perplexity(np.concatenate(rows), tokens[1:])


def greedy_generate(model: ToyModel, prompt, steps: int, compression: Compression | None = None):
    """Greedy decoding; returns generated ids and the logits that chose them."""
    logits, caches = model.prefill(prompt, compression)
    last = logits[-1]
    ids, history = [], []
    for _ in range(steps):
        tok = int(np.argmax(last))
        ids.append(tok)
        history.append(last)
        last = model.decode_step(caches, tok)
    return ids, history


# -- construction and persistence ------------------------------------------------

def _f32_exact(x: np.ndarray) -> np.ndarray:
    # Weights are persisted as float32; keep in-memory values representable.
    return x.astype(np.float32).astype(np.float64)


def init_model(config: ModelConfig, seed: int = 0) -> ToyModel:
    rng = np.random.default_rng(seed)
    D, V = config.d_model, config.vocab_size
    std = 1.0 / math.sqrt(D)
    layers = []
    for _ in range(config.n_layers):
        mats = [_f32_exact(rng.normal(0.0, std, (D, D))) for _ in range(4)]
        w1 = w2 = None
        if config.ffn:
            w1 = _f32_exact(rng.normal(0.0, std, (D, config.d_ff)))
            w2 = _f32_exact(rng.normal(0.0, 1.0 / math.sqrt(config.d_ff), (config.d_ff, D)))
        layers.append(LayerWeights(*mats, w1, w2))
    weights = Weights(
        embed=_f32_exact(rng.normal(0.0, 1.0, (V, D))),
        unembed=_f32_exact(rng.normal(0.0, std, (D, V))),
        layers=layers,
    )
    return ToyModel(config, weights)


WEIGHTS_MAGIC = b"FKVW"
WEIGHTS_VERSION = 1
_CONFIG = struct.Struct("<IIIIIIBB")


def save_weights(model: ToyModel, path) -> None:
    """Write the ``FKVW`` weight file (float32, little-endian, row-major)."""
    c = model.config
    tensors = model.weights.named_tensors()
    parts = [
        WEIGHTS_MAGIC,
        struct.pack("<I", WEIGHTS_VERSION),
        _CONFIG.pack(c.n_layers, c.n_heads, c.head_dim, c.vocab_size, c.max_context, c.d_ff,
                     int(c.ffn), int(c.positional)),
        struct.pack("<I", len(tensors)),
    ]
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<I", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> ToyModel:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise InvalidInputError(f"{path}: not an FKVW weight file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != WEIGHTS_VERSION:
        raise InvalidInputError(f"{path}: unsupported weight file version {version}")
    pos = 8
    n_layers, n_heads, head_dim, vocab, max_ctx, d_ff, ffn, positional = _CONFIG.unpack_from(buf, pos)
    pos += _CONFIG.size
    config = ModelConfig(n_layers, n_heads, head_dim, vocab, max_ctx, bool(ffn), d_ff, bool(positional))
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            tensors[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise InvalidInputError(f"{path}: truncated weight file") from exc
    layers = []
    for i in range(n_layers):
        get = lambda n: tensors.get(f"layers.{i}.{n}")  # noqa: E731
        layers.append(LayerWeights(get("wq"), get("wk"), get("wv"), get("wo"), get("w1"), get("w2")))
    try:
        weights = Weights(tensors["embed"], tensors["unembed"], layers)
    except KeyError as exc:
        raise InvalidInputError(f"{path}: missing tensor {exc}") from exc
    return ToyModel(config, weights)


def read_sequences(path) -> list[np.ndarray]:
    """Newline-delimited token sequences, ids separated by whitespace."""
    seqs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            seqs.append(np.array([int(t) for t in line.split()], dtype=np.int64))
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
        if seqs[-1].min() < 0:
            raise InvalidInputError(f"{path}:{lineno}: token ids must be unsigned")
    return seqs


def write_sequences(path, seqs) -> None:
    Path(path).write_text("".join(" ".join(str(int(t)) for t in s) + "\n" for s in seqs))
