"""Wall-clock measurements of the compression pipeline on random caches."""

from __future__ import annotations

import time

import numpy as np

from .cache import FullCache, prefill_compress
from .iwdft import IwdftState, Mode
from .masks import PruneMask


def time_call(fn, reps: int = 5, inner: int = 3, warmup: int = 1) -> tuple[int, int]:
    """Median and interquartile range, in ns, of ``reps`` samples of ``inner`` calls each."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter_ns() - start) / inner)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return int(med), int(q3 - q1)


class _Workload:
    def __init__(self, context_len, r, heads, head_dim, C, sink, recent, mode, seed):
        self.rng = np.random.default_rng(seed)
        shape = (heads, context_len, head_dim)
        self.K = self.rng.normal(size=shape)
        self.V = self.rng.normal(size=shape)
        self.mask = PruneMask.lowest(1, C, r)
        self.args = (self.mask, 0, sink, recent, Mode.parse(mode))
        self.heads, self.head_dim, self.recent = heads, head_dim, recent

    def token(self):
        return self.rng.normal(size=(self.heads, self.head_dim)), self.rng.normal(size=(self.heads, self.head_dim))

    def compressed(self):
        cache = prefill_compress(self.K, self.V, *self.args)
        for _ in range(self.recent):  # fill the window so every append folds
            cache.append(*self.token())
        return cache


def bench_length(context_len: int, r: float = 0.1, steps: int = 10, reps: int = 5, heads: int = 4,
                 head_dim: int = 128, C: int = 22, sink: int = 10, recent: int = 50,
                 mode="approx", seed: int = 0, reconstruct: bool = True) -> list[dict]:
    """Rows for one context length.

    Phases: ``prefill`` (transform and prune the middle segment);
    ``decode`` (fold one token, then attend in the frequency domain);
    ``decode_reconstruct`` (fold one token, then sparse inverse DFT of the
    middle segment); ``full_attend`` (append and attend on an uncompressed
    cache). Decode phases are skipped when ``steps == 0``; each decode
    sample runs ``steps`` tokens and is reported per step. ``reconstruct=False``
    skips ``decode_reconstruct``, by far the slowest phase.
    """
    work = _Workload(context_len, r, heads, head_dim, C, sink, recent, mode, seed)
    rows = []

    def row(phase, stats):
        rows.append({"phase": phase, "context_len": context_len, "r": r,
                     "median_ns": stats[0], "iqr_ns": stats[1]})

    row("prefill", time_call(lambda: prefill_compress(work.K, work.V, *work.args), reps))
    if steps <= 0:
        return rows

    q = work.rng.normal(size=(heads, head_dim))
    tokens = [work.token() for _ in range(steps)]
    cache = work.compressed()

    def decode():
        for k, v in tokens:
            cache.append(k, v)
            cache.attend(q)

    def decode_reconstruct():
        for k, v in tokens:
            cache.append(k, v)
            cache.reconstruct(method="direct")

    full = FullCache.from_prefill(work.K, work.V)

    def full_attend():
        for k, v in tokens:
            full.append(k, v)
            full.attend(q)

    phases = [("decode", decode), ("decode_reconstruct", decode_reconstruct), ("full_attend", full_attend)]
    for phase, fn in phases:
        if phase == "decode_reconstruct" and not reconstruct:
            continue
        med, iqr = time_call(fn, reps, inner=1)
        row(phase, (med // steps, iqr // steps))
    return rows


def update_reconstruct_ns(period: int, kept: int, channels: int = 512, reps: int = 5, inner: int = 5,
                          seed: int = 0) -> int:
    """Median cost of one fold plus one sparse inverse DFT with ``kept`` tracked bins."""
    rng = np.random.default_rng(seed)
    state = IwdftState(period, np.arange(kept), rng.normal(size=(kept, channels)) + 0j, period, Mode.EXACT)
    sample = rng.normal(size=channels)

    def step():
        state.update(sample)
        state.reconstruct(method="direct")

    return time_call(step, reps, inner)[0]


def scaling_exponent(lengths, medians) -> float:
    """Least-squares slope of log(time) against log(length)."""
    return float(np.polyfit(np.log(lengths), np.log(medians), 1)[0])
