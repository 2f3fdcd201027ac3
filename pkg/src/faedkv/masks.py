"""Frequency chunks and per-layer prune masks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class ChunkPartition:
    """``C`` contiguous chunks covering bins ``[0, M)``.

    The first ``C - 1`` chunks hold ``M // C`` bins; the last one takes the
    remainder.
    """

    M: int
    C: int
    boundaries: tuple[int, ...]

    def bins(self, c: int) -> np.ndarray:
        if not 0 <= c < self.C:
            raise InvalidInputError(f"chunk {c} out of range [0, {self.C})")
        return np.arange(self.boundaries[c], self.boundaries[c + 1])

    def sizes(self) -> list[int]:
        return [b - a for a, b in zip(self.boundaries[:-1], self.boundaries[1:])]


def partition(M: int, C: int) -> ChunkPartition:
    if M < 1 or C < 1:
        raise InvalidInputError(f"need M >= 1 and C >= 1, got M={M}, C={C}")
    if C > M:
        raise InvalidInputError(f"cannot split {M} bins into {C} chunks")
    size = M // C
    bounds = tuple(c * size for c in range(C)) + (M,)
    return ChunkPartition(M, C, bounds)


def zero_chunk(spectrum, part: ChunkPartition, c: int, axis: int = 0) -> np.ndarray:
    """Copy of ``spectrum`` with the bins of chunk ``c`` set to zero along ``axis``."""
    bins = part.bins(c)
    out = np.array(spectrum, dtype=np.complex128, copy=True)
    if out.shape[axis] != part.M:
        raise InvalidInputError(f"spectrum has {out.shape[axis]} bins, partition expects {part.M}")
    index = [slice(None)] * out.ndim
    index[axis] = bins
    out[tuple(index)] = 0
    return out


def retained_count(r: float, C: int) -> int:
    """``round(r * C)`` with halves rounded up."""
    return int(math.floor(r * C + 0.5))


@dataclass
class PruneMask:
    """Retained chunk indices per layer.

    Chunks are relative bands, so the same mask applies to any segment
    length ``M >= C``; kept bin indices are derived per length. Set
    ``period`` to pin the mask to one segment length.
    """

    C: int
    r: float
    layers: list[tuple[int, ...]]
    period: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.layers = [tuple(sorted(int(c) for c in chunks)) for chunks in self.layers]
        for chunks in self.layers:
            if any(not 0 <= c < self.C for c in chunks) or len(set(chunks)) != len(chunks):
                raise InvalidInputError(f"invalid chunk set {chunks} for C={self.C}")

    @classmethod
    def keep_all(cls, n_layers: int, C: int = 1) -> "PruneMask":
        return cls(C, 1.0, [tuple(range(C))] * n_layers)

    @classmethod
    def lowest(cls, n_layers: int, C: int, r: float) -> "PruneMask":
        """Mask keeping the lowest-index chunks: what ``greedy_select`` gives on tied scores."""
        k = retained_count(r, C)
        return cls(C, r, [tuple(range(k))] * n_layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def kept_chunks(self, layer: int) -> tuple[int, ...]:
        if not 0 <= layer < len(self.layers):
            raise InvalidInputError(f"mask has no layer {layer}")
        return self.layers[layer]

    def kept_indices(self, layer: int, M: int) -> np.ndarray:
        if self.period is not None and self.period != M:
            raise InvalidInputError(f"mask is pinned to period {self.period}, segment has {M} bins")
        part = partition(M, self.C)
        chunks = self.kept_chunks(layer)
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([part.bins(c) for c in chunks])

    def to_json(self) -> str:
        return json.dumps({"C": self.C, "r": self.r, "layers": [list(c) for c in self.layers]})

    @classmethod
    def from_json(cls, text: str) -> "PruneMask":
        try:
            data = json.loads(text)
            return cls(int(data["C"]), float(data["r"]), [tuple(c) for c in data["layers"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed mask JSON: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PruneMask":
        return cls.from_json(Path(path).read_text())
