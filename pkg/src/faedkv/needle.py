"""Synthetic needle-retrieval probe on a single attention head.

Keys and values are random unit vectors. One key, at the needle position,
is the probe query's direction; the query is scaled so that uncompressed
attention puts essentially all its weight there. Retrieval reads the
attention output back against the original value rows and succeeds when
the best-matching row is the needle's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cache import attend, prefill_compress
from .errors import InvalidInputError
from .iwdft import Mode
from .masks import PruneMask

# No other key may have cosine similarity above this with the needle key.
MAX_DISTRACTOR_COSINE = 0.5


@dataclass
class NeedleProbe:
    keys: np.ndarray  # (N, d)
    values: np.ndarray  # (N, d)
    query: np.ndarray  # (d,)
    answer: int


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def build_needle_probe(context_len: int, needle_pos: int, d: int = 128, seed=0,
                       logit_scale: float = 60.0) -> NeedleProbe:
    """Random key/value rows with a query aimed at ``needle_pos``.

    The uncompressed attention logit of the needle is ``logit_scale``; every
    other logit is at most ``MAX_DISTRACTOR_COSINE * logit_scale``.
    """
    if not 0 <= needle_pos < context_len:
        raise InvalidInputError(f"needle position {needle_pos} outside context of {context_len}")
    rng = np.random.default_rng(seed)
    keys = _unit_rows(rng, context_len, d)
    values = _unit_rows(rng, context_len, d)
    needle = keys[needle_pos]
    while True:
        cos = keys @ needle
        cos[needle_pos] = 0.0
        close = np.flatnonzero(np.abs(cos) > MAX_DISTRACTOR_COSINE)
        if close.size == 0:
            break
        keys[close] = _unit_rows(rng, close.size, d)
    query = logit_scale * math.sqrt(d) * needle
    return NeedleProbe(keys, values, query, needle_pos)


def retrieve(probe: NeedleProbe, keys: np.ndarray, values: np.ndarray) -> int:
    """Position whose original value row best matches the attention output."""
    out = attend(probe.query, keys, values)
    return int(np.argmax(probe.values @ out))


def compressed_retrieve(probe: NeedleProbe, mask: PruneMask, sink: int, recent: int,
                        mode=Mode.EXACT, fused: bool = True) -> int:
    cache = prefill_compress(probe.keys, probe.values, mask, 0, sink, recent, mode)
    if fused:
        out = cache.attend(probe.query)[0]
        return int(np.argmax(probe.values @ out))
    kv = cache.assemble()
    return retrieve(probe, kv.keys[0], kv.values[0])


def truncated_retrieve(probe: NeedleProbe, sink: int, recent: int) -> int:
    """Baseline that drops the middle segment and keeps only sink and tail rows."""
    N = probe.keys.shape[0]
    rows = np.r_[0:sink, N - recent : N]
    return retrieve(probe, probe.keys[rows], probe.values[rows])


def depth_positions(context_len: int, n_depths: int = 9) -> list[tuple[float, int]]:
    """Evenly spaced relative depths from 0 to 1 and their token positions."""
    depths = np.linspace(0.0, 1.0, n_depths)
    return [(float(f), int(round(f * (context_len - 1)))) for f in depths]


def run_needle(context_len: int, r: float, reps: int, C: int = 22, sink: int = 10, recent: int = 50,
               d: int = 128, seed: int = 0, mask: PruneMask | None = None,
               method: str = "faedkv") -> list[dict]:
    """Retrieval accuracy per depth; one row per depth.

    ``method`` is ``"faedkv"`` (compress with ``mask``, defaulting to the
    lowest ``round(r * C)`` chunks) or ``"truncate"``.
    """
    if method not in ("faedkv", "truncate"):
        raise InvalidInputError(f"unknown needle method {method!r}")
    if method == "faedkv" and mask is None:
        mask = PruneMask.lowest(1, C, r)
    rows = []
    for depth_idx, (depth, pos) in enumerate(depth_positions(context_len)):
        hits = 0
        for rep in range(reps):
            probe = build_needle_probe(context_len, pos, d, seed=[seed, context_len, depth_idx, rep])
            if method == "truncate":
                got = truncated_retrieve(probe, sink, recent)
            else:
                got = compressed_retrieve(probe, mask, sink, recent)
            hits += got == pos
        rows.append({
            "context_len": context_len,
            "depth": depth,
            "r": r if method == "faedkv" else 0.0,
            "accuracy": hits / reps,
            "position": pos,
        })
    return rows


def protected(position: int, context_len: int, sink: int, recent: int) -> bool:
    """Whether a position is stored verbatim (sink or tail)."""
    return position < sink or position >= context_len - recent


def flatness(rows: list[dict], sink: int, recent: int) -> float:
    """Max minus min accuracy over depths that land in the compressed middle."""
    mids = [row["accuracy"] for row in rows
            if not protected(row["position"], row["context_len"], sink, recent)]
    return max(mids) - min(mids) if mids else 0.0
