"""Layer-wise frequency ablation and greedy chunk selection.

For every layer and chunk, the middle segment of that layer's keys and
values is transformed along the token axis, the chunk's bins are zeroed,
the segment is transformed back, and the corpus perplexity is measured with
that layer's cache replaced. The normalized perplexity increase ranks the
chunks; each layer then keeps its ``round(r * C)`` highest-ranked chunks.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .masks import PruneMask, partition, retained_count
from .model import ToyModel, perplexity
from .spectral import dft_forward, idft_full

log = logging.getLogger(__name__)


def delta_score(ppl_pruned: float, ppl_orig: float) -> float:
    """Normalized perplexity increase ``(pruned - orig) / orig``."""
    if ppl_orig <= 0:
        raise InvalidInputError(f"baseline perplexity must be positive, got {ppl_orig}")
    return (ppl_pruned - ppl_orig) / ppl_orig


@dataclass
class ImportanceTable:
    deltas: np.ndarray  # (layers, chunks)
    ppl_orig: float

    @property
    def n_layers(self) -> int:
        return self.deltas.shape[0]

    @property
    def C(self) -> int:
        return self.deltas.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "chunk", "delta"])
        for layer in range(self.n_layers):
            for chunk in range(self.C):
                writer.writerow([layer, chunk, repr(float(self.deltas[layer, chunk]))])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, ppl_orig: float = float("nan")) -> "ImportanceTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise InvalidInputError("empty importance table")
        L = 1 + max(int(r["layer"]) for r in rows)
        C = 1 + max(int(r["chunk"]) for r in rows)
        deltas = np.full((L, C), np.nan)
        for r in rows:
            deltas[int(r["layer"]), int(r["chunk"])] = float(r["delta"])
        if np.isnan(deltas).any():
            raise InvalidInputError("importance table is missing cells")
        return cls(deltas, ppl_orig)


def greedy_select(table: ImportanceTable, r: float) -> PruneMask:
    """Keep the ``round(r * C)`` chunks with the largest deltas in each layer.

    Ties go to the lower chunk index.
    """
    if not 0 < r <= 1:
        raise InvalidInputError(f"retention ratio must be in (0, 1], got {r}")
    k = retained_count(r, table.C)
    layers = []
    for row in table.deltas:
        order = sorted(range(table.C), key=lambda c: (-row[c], c))
        layers.append(tuple(sorted(order[:k])))
    return PruneMask(table.C, r, layers)


def filter_middle(X: np.ndarray, sink: int, recent: int, keep=None, drop=None) -> np.ndarray:
    """Round-trip the middle rows of ``X`` (heads, tokens, dim) through the DFT.

    Bins listed in ``drop`` are zeroed, or everything outside ``keep``.
    """
    T = X.shape[1]
    spectrum = dft_forward(X[:, sink : T - recent], axis=1)
    if keep is not None:
        pruned = np.zeros_like(spectrum)
        pruned[:, keep] = spectrum[:, keep]
        spectrum = pruned
    if drop is not None:
        spectrum[:, drop] = 0
    out = X.copy()
    out[:, sink : T - recent] = idft_full(spectrum, axis=1)
    return out


def _check_corpus(corpus, C: int, sink: int, recent: int) -> list[np.ndarray]:
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus]
    if not seqs:
        raise InvalidInputError("corpus is empty")
    for i, s in enumerate(seqs):
        if s.size < 2:
            raise InvalidInputError(f"sequence {i} has fewer than 2 tokens")
        # The model scores s[:-1], so that is the length whose middle is filtered.
        M = s.size - 1 - sink - recent
        if M < C:
            raise InvalidInputError(
                f"sequence {i} leaves a middle segment of {M} tokens, fewer than C={C} chunks"
            )
    return seqs


def layer_chunk_hook(layer: int, chunk: int, C: int, sink: int, recent: int):
    def hook(l, k, v):
        if l != layer:
            return k, v
        drop = partition(k.shape[1] - sink - recent, C).bins(chunk)
        return filter_middle(k, sink, recent, drop=drop), filter_middle(v, sink, recent, drop=drop)

    return hook


def mask_hook(mask: PruneMask, sink: int, recent: int):
    """Hook applying ``mask`` to every layer's middle segment at once."""

    def hook(l, k, v):
        keep = mask.kept_indices(l, k.shape[1] - sink - recent)
        return filter_middle(k, sink, recent, keep=keep), filter_middle(v, sink, recent, keep=keep)

    return hook


def corpus_perplexity(model: ToyModel, corpus, kv_hook=None) -> float:
    """Mean of per-sequence perplexities."""
    return float(np.mean([perplexity(model, s, kv_hook=kv_hook) for s in corpus]))


def run_ablation(model: ToyModel, corpus, C: int, sink: int = 10, recent: int = 50) -> ImportanceTable:
    """Score every (layer, chunk) by the perplexity increase from zeroing it.

    Per-sequence perplexities are averaged over the corpus before the delta
    is taken.

    Raises:
        InvalidInputError: If the corpus is empty or a sequence is too short
            to split its middle segment into ``C`` chunks.
    """
    seqs = _check_corpus(corpus, C, sink, recent)
    ppl_orig = corpus_perplexity(model, seqs)
    L = model.config.n_layers
    deltas = np.zeros((L, C))
    for layer in range(L):
        for chunk in range(C):
            ppl = corpus_perplexity(model, seqs, layer_chunk_hook(layer, chunk, C, sink, recent))
            deltas[layer, chunk] = delta_score(ppl, ppl_orig)
        log.debug("layer %d deltas: %s", layer, deltas[layer])
    return ImportanceTable(deltas, ppl_orig)


def chunk_sweep(model: ToyModel, corpus, chunk_counts, r: float, sink: int = 10, recent: int = 50):
    """Perplexity of the masked model for each chunk count ``C``.

    Each ``C`` gets its own ablation and greedy mask at ratio ``r``; the
    returned rows hold ``C``, the baseline and masked perplexities and their
    normalized increase.
    """
    rows = []
    for C in chunk_counts:
        table = run_ablation(model, corpus, C, sink, recent)
        mask = greedy_select(table, r)
        masked = corpus_perplexity(model, corpus, mask_hook(mask, sink, recent))
        rows.append({
            "C": C,
            "r": r,
            "ppl_orig": table.ppl_orig,
            "ppl_masked": masked,
            "delta": delta_score(masked, table.ppl_orig),
        })
    return rows
