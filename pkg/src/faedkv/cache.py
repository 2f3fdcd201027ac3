"""Full and frequency-compressed KV caches for one layer.

A compressed cache splits a prompt of ``N`` tokens into three parts:

* the first ``sink`` rows, kept verbatim;
* the middle ``M = N - sink - recent`` rows, transformed along the token
  axis, pruned to the layer's kept bins and held as an :class:`IwdftState`;
* the last ``recent`` prompt rows, kept verbatim (the tail).

Decoded tokens enter a window of capacity ``recent``. Once the window
overflows, its oldest token is folded into the frequency state. Attention
sees ``[sink; reconstructed middle; tail; window]``.

All arrays are laid out ``(heads, tokens, head_dim)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContextTooShortError, InvalidInputError
from .iwdft import IwdftState, Mode
from .masks import PruneMask
from .spectral import dft_select, real_part_ifft, real_rows_dft


@dataclass(frozen=True)
class Compression:
    """Settings for compressing a cache at prefill time."""

    sink: int = 10
    recent: int = 50
    mask: PruneMask | None = None
    mode: Mode = Mode.PAPER_APPROX

    def __post_init__(self):
        if self.sink < 0 or self.recent < 0:
            raise InvalidInputError("sink and recent sizes must be non-negative")
        object.__setattr__(self, "mode", Mode.parse(self.mode))


@dataclass
class AssembledKV:
    keys: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return self.keys.shape[-2]


@dataclass
class MemoryReport:
    sink_reals: int
    recent_reals: int
    frequency_reals: int
    uncompressed_reals: int
    kept_bins: int
    period: int
    total_reals: int
    ratio: float
    middle_ratio: float
    bin_ratio: float


def _as_heads(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise InvalidInputError(f"expected (heads, tokens, dim) array, got shape {arr.shape}")
    return arr


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def attend(q, keys, values) -> np.ndarray:
    """Scaled dot-product attention of one query per head over cached rows.

    Args:
        q: ``(..., d)`` query.
        keys: ``(..., T, d)``.
        values: ``(..., T, d)``.

    Raises:
        InvalidInputError: If there are no cached rows.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape[-2] == 0:
        raise InvalidInputError("cannot attend over an empty cache")
    if keys.shape != values.shape or keys.shape[-1] != q.shape[-1]:
        raise InvalidInputError(f"shape mismatch: q {q.shape}, K {keys.shape}, V {values.shape}")
    scores = (keys @ q[..., None])[..., 0] / math.sqrt(q.shape[-1])
    return (softmax(scores)[..., None, :] @ values)[..., 0, :]


class FullCache:
    """Uncompressed cache that grows by one row per token."""

    def __init__(self, n_heads: int, head_dim: int, capacity: int = 256):
        self._k = np.zeros((n_heads, max(capacity, 1), head_dim))
        self._v = np.zeros_like(self._k)
        self.n_tokens = 0

    @classmethod
    def from_prefill(cls, K, V) -> "FullCache":
        K, V = _as_heads(K), _as_heads(V)
        cache = cls(K.shape[0], K.shape[2], capacity=2 * K.shape[1])
        cache._k[:, : K.shape[1]] = K
        cache._v[:, : V.shape[1]] = V
        cache.n_tokens = K.shape[1]
        return cache

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, : self.n_tokens]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, : self.n_tokens]

    def append(self, k, v) -> None:
        if self.n_tokens == self._k.shape[1]:
            self._k = np.concatenate([self._k, np.zeros_like(self._k)], axis=1)
            self._v = np.concatenate([self._v, np.zeros_like(self._v)], axis=1)
        self._k[:, self.n_tokens] = k
        self._v[:, self.n_tokens] = v
        self.n_tokens += 1

    def assemble(self) -> AssembledKV:
        return AssembledKV(self.keys.copy(), self.values.copy())

    def attend(self, q) -> np.ndarray:
        return attend(q, self.keys, self.values)

    def memory_report(self) -> MemoryReport:
        H, _, d = self._k.shape
        reals = 2 * H * self.n_tokens * d
        return MemoryReport(0, reals, 0, reals, 0, 0, reals, 1.0 if reals else 0.0, 0.0, 0.0)


class RowWindow:
    """Most recent decoded rows, oldest first, in a compacting buffer."""

    def __init__(self, n_heads: int, head_dim: int, capacity: int):
        self.capacity = capacity
        size = 2 * max(capacity, 1)
        self._k = np.zeros((n_heads, size, head_dim))
        self._v = np.zeros_like(self._k)
        self._start = 0
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def rows(self) -> tuple[np.ndarray, np.ndarray]:
        span = slice(self._start, self._start + self._len)
        return self._k[:, span], self._v[:, span]

    def push(self, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """Append a row; return the evicted oldest row once over capacity."""
        end = self._start + self._len
        if end == self._k.shape[1]:
            self._k[:, : self._len] = self._k[:, self._start : end]
            self._v[:, : self._len] = self._v[:, self._start : end]
            self._start, end = 0, self._len
        self._k[:, end] = k
        self._v[:, end] = v
        self._len += 1
        if self._len <= self.capacity:
            return None
        old = self._k[:, self._start].copy(), self._v[:, self._start].copy()
        self._start += 1
        self._len -= 1
        return old


class CompressedKV:
    """Sink rows, a pruned frequency state, the prompt tail and a decode window.

    Build one with :func:`prefill_compress`. The frequency state for keys and
    values batches every head: its channels are ``heads * head_dim`` wide.
    """

    def __init__(self, sink_k, sink_v, tail_k, tail_v, freq_k: IwdftState, freq_v: IwdftState, recent: int,
                 fold_block: int = 32):
        self.sink_k, self.sink_v = sink_k, sink_v
        self.tail_k, self.tail_v = tail_k, tail_v
        self._freq_k, self._freq_v = freq_k, freq_v
        self.recent = recent
        self.n_heads, self.head_dim = sink_k.shape[0], sink_k.shape[2]
        self.window = RowWindow(self.n_heads, self.head_dim, recent)
        # Evicted rows waiting to be folded as one block; attention accounts
        # for them exactly through the fold operator.
        self.fold_block = max(1, fold_block)
        self._pending: list[tuple[np.ndarray, np.ndarray]] = []

    @property
    def freq_k(self) -> IwdftState:
        self.flush()
        return self._freq_k

    @property
    def freq_v(self) -> IwdftState:
        self.flush()
        return self._freq_v

    def flush(self) -> None:
        """Fold every evicted row still pending into the frequency states."""
        if self._pending:
            ks, vs = zip(*self._pending)
            self._pending = []
            self._freq_k.fold(np.stack(ks))
            self._freq_v.fold(np.stack(vs))

    @property
    def sink(self) -> int:
        return self.sink_k.shape[1]

    @property
    def period(self) -> int:
        return self._freq_k.period

    @property
    def kept_indices(self) -> np.ndarray:
        return self._freq_k.indices

    @property
    def tokens_folded(self) -> int:
        return self._freq_k.tokens_folded + len(self._pending)

    @property
    def n_tokens(self) -> int:
        return self.sink + self.tokens_folded + self.tail_k.shape[1] + len(self.window)

    def append(self, k, v) -> None:
        """Add a decoded token; fold the oldest window entry if the window overflows."""
        k = np.asarray(k, dtype=np.float64).reshape(self.n_heads, self.head_dim)
        v = np.asarray(v, dtype=np.float64).reshape(self.n_heads, self.head_dim)
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise InvalidInputError("key/value vectors must be finite")
        evicted = self.window.push(k, v)
        if evicted is not None:
            old_k, old_v = evicted
            self._pending.append((old_k.reshape(-1), old_v.reshape(-1)))
            if len(self._pending) >= self.fold_block:
                self.flush()

    def _window_rows(self) -> tuple[np.ndarray, np.ndarray]:
        return self.window.rows()

    def _heads_view(self, flat: np.ndarray) -> np.ndarray:
        # (M, H*d) -> (H, M, d)
        return flat.reshape(flat.shape[0], self.n_heads, self.head_dim).transpose(1, 0, 2)

    def reconstruct(self, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
        """Middle segment in the time domain, ``M`` rows per head."""
        return (self._heads_view(self.freq_k.reconstruct(method)),
                self._heads_view(self.freq_v.reconstruct(method)))

    def assemble(self) -> AssembledKV:
        k_mid, v_mid = self.reconstruct()
        win_k, win_v = self._window_rows()
        keys = np.concatenate([self.sink_k, k_mid, self.tail_k, win_k], axis=1)
        values = np.concatenate([self.sink_v, v_mid, self.tail_v, win_v], axis=1)
        return AssembledKV(keys, values)

    def attend(self, q) -> np.ndarray:
        """Attention over the assembled cache without materializing the middle rows.

        Middle-segment scores are the real part of an inverse DFT of the
        query contracted with the kept key coefficients; the value read-out
        contracts the kept value coefficients with the transform of the
        attention weights. Equal to ``attend(q, *assemble())`` up to rounding.
        """
        q = np.asarray(q, dtype=np.float64).reshape(self.n_heads, self.head_dim)
        M, H, d = self.period, self.n_heads, self.head_dim
        idx = self.kept_indices
        gain = float(self.tokens_folded)
        carry, fold_w = self._freq_k.fold_operator(len(self._pending))
        if self._pending:
            pend_k = np.stack([row for row, _ in self._pending]).reshape(-1, H, d)
            pend_v = np.stack([row for _, row in self._pending]).reshape(-1, H, d)

        # z[h, k] = sum_c S_K[k, h, c] q[h, c], with pending rows folded in
        sk = self._freq_k.bins.reshape(-1, H, d).transpose(1, 0, 2)
        z = (sk @ q[:, :, None].astype(np.complex128))[:, :, 0] * carry
        if self._pending:
            z += (fold_w @ np.einsum("phd,hd->ph", pend_k, q)).T
        dense = np.zeros((H, M), dtype=np.complex128)
        dense[:, idx] = z
        mid_scores = gain * real_part_ifft(dense)

        win_k, win_v = self._window_rows()
        verbatim_k = np.concatenate([self.sink_k, self.tail_k, win_k], axis=1)
        verbatim_v = np.concatenate([self.sink_v, self.tail_v, win_v], axis=1)
        side_scores = (verbatim_k @ q[:, :, None])[:, :, 0]
        weights = softmax(np.concatenate([mid_scores, side_scores], axis=1) / math.sqrt(d))
        w_mid, w_side = weights[:, :M], weights[:, M:]

        # ifft(w)[k] == conj(fft(w)[k]) / M for real w
        transform = np.conj(real_rows_dft(w_mid, idx)) / M
        sv = self._freq_v.bins.reshape(-1, H, d).transpose(1, 0, 2)
        mid = ((transform * carry)[:, None, :] @ sv)[:, 0, :]
        if self._pending:
            mid += np.einsum("hp,phd->hd", transform @ fold_w, pend_v)
        return gain * mid.real + (w_side[:, None, :] @ verbatim_v)[:, 0, :]

    def memory_report(self) -> MemoryReport:
        H, d = self.n_heads, self.head_dim
        kept = int(self.kept_indices.size)
        sink = 2 * H * self.sink * d
        recent = 2 * H * (self.tail_k.shape[1] + len(self.window)) * d
        freq = 2 * 2 * H * kept * d
        full = 2 * H * self.n_tokens * d
        total = sink + recent + freq
        return MemoryReport(
            sink_reals=sink,
            recent_reals=recent,
            frequency_reals=freq,
            uncompressed_reals=full,
            kept_bins=kept,
            period=self.period,
            total_reals=total,
            ratio=total / full if full else 0.0,
            middle_ratio=2 * kept / self.period,
            bin_ratio=kept / self.period,
        )


def prefill_compress(K, V, mask: PruneMask | None = None, layer: int = 0, sink: int = 10,
                     recent: int = 50, mode=Mode.PAPER_APPROX) -> CompressedKV:
    """Compress a prefilled layer cache.

    The middle rows ``[sink, N - recent)`` are transformed along the token
    axis, divided by ``M`` (so decode-time updates continue the same running
    average) and pruned to the mask's kept bins for ``layer``. ``mask=None``
    keeps every bin.

    Raises:
        ContextTooShortError: If ``N <= sink + recent``.
        InvalidInputError: If ``K`` and ``V`` disagree in shape or the mask
            is pinned to a different segment length.
    """
    K, V = _as_heads(K), _as_heads(V)
    if K.shape != V.shape:
        raise InvalidInputError(f"K shape {K.shape} != V shape {V.shape}")
    H, N, d = K.shape
    if N <= sink + recent:
        raise ContextTooShortError(f"context of {N} tokens leaves no middle segment (sink={sink}, recent={recent})")
    M = N - sink - recent
    kept = np.arange(M) if mask is None else mask.kept_indices(layer, M)

    def to_state(X: np.ndarray) -> IwdftState:
        # (H*d, M) rows so the transform runs over contiguous memory
        rows = X[:, sink : N - recent].transpose(0, 2, 1).reshape(H * d, M)
        bins = dft_select(rows, kept, axis=1) / M
        return IwdftState(M, kept, bins.T, M, mode)

    return CompressedKV(
        K[:, :sink].copy(), V[:, :sink].copy(),
        K[:, N - recent :].copy(), V[:, N - recent :].copy(),
        to_state(K), to_state(V), recent,
    )


def reconstruct(cache: CompressedKV) -> tuple[np.ndarray, np.ndarray]:
    return cache.reconstruct()


def append_token(cache: CompressedKV | FullCache, k, v):
    cache.append(k, v)
    return cache


def assemble(cache: CompressedKV | FullCache) -> AssembledKV:
    return cache.assemble()


def memory_report(cache: CompressedKV | FullCache) -> MemoryReport:
    return cache.memory_report()


# -- snapshots ---------------------------------------------------------------

SNAPSHOT_MAGIC = b"FKVC"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sIIIIIIQI")


def _f32(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype="<f4").tobytes()


def save_snapshot(caches: list[CompressedKV], directory) -> list[Path]:
    """Write one ``layer_XXX.fkvc`` file per layer.

    Layout: header (magic, version, sink, recent, M, head_dim, heads, N_cur,
    window length), then float32 sink K/V, float32 recent K/V (tail followed
    by window), then one IWDF blob per head for K and then for V.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, cache in enumerate(caches):
        if not isinstance(cache, CompressedKV):
            raise InvalidInputError(f"layer {layer} is not compressed; only compressed caches snapshot")
        H, d = cache.n_heads, cache.head_dim
        win_k, win_v = cache._window_rows()
        parts = [
            _SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, cache.sink, cache.recent, cache.period,
                              d, H, cache.n_tokens, len(cache.window)),
            _f32(cache.sink_k), _f32(cache.sink_v),
            _f32(np.concatenate([cache.tail_k, win_k], axis=1)),
            _f32(np.concatenate([cache.tail_v, win_v], axis=1)),
        ]
        for state in (cache.freq_k, cache.freq_v):
            for h in range(H):
                head = IwdftState(state.period, state.indices, state.bins[:, h * d : (h + 1) * d],
                                  state.tokens_folded, state.mode)
                parts.append(head.to_bytes())
        path = directory / f"layer_{layer:03d}.fkvc"
        path.write_bytes(b"".join(parts))
        paths.append(path)
    return paths


def load_snapshot(directory) -> list[CompressedKV]:
    caches = []
    for path in sorted(Path(directory).glob("layer_*.fkvc")):
        buf = path.read_bytes()
        magic, version, sink, recent, M, d, H, n_cur, n_win = _SNAP_HEADER.unpack_from(buf, 0)
        if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
            raise InvalidInputError(f"{path}: not a version-{SNAPSHOT_VERSION} FKVC file")
        pos = _SNAP_HEADER.size

        def block(rows: int) -> np.ndarray:
            nonlocal pos
            count = H * rows * d
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
            pos += 4 * count
            return arr.reshape(H, rows, d)

        sink_k, sink_v = block(sink), block(sink)
        rec_k, rec_v = block(recent + n_win), block(recent + n_win)
        states = []
        for _ in range(2):
            heads = []
            for _ in range(H):
                state, pos = IwdftState.unpack_from(buf, pos, channels=d)
                heads.append(state)
            first = heads[0]
            states.append(IwdftState(first.period, first.indices,
                                     np.concatenate([s.bins for s in heads], axis=1),
                                     first.tokens_folded, first.mode))
        cache = CompressedKV(sink_k, sink_v, rec_k[:, :recent], rec_v[:, :recent], states[0], states[1], recent)
        for i in range(n_win):
            cache.window.push(rec_k[:, recent + i], rec_v[:, recent + i])
        if cache.n_tokens != n_cur or cache.period != M:
            raise InvalidInputError(f"{path}: header does not match payload")
        caches.append(cache)
    return caches
