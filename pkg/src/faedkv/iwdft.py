"""Infinite-window recursive DFT.

A state tracks a fixed set of frequency bins of period ``M``. Each new sample
is folded in with a count-based normalization::

    S'[k] = w_k * ((N - 1) / N * S[k] + x / N)        # Mode.EXACT
    S'[k] = w_k * (S[k] + x / N)                      # Mode.PAPER_APPROX

where ``N = tokens_folded + 1`` and ``w_k = exp(+2j*pi*k/M)``. The rotation
is the sliding-DFT step for the forward convention used in
:mod:`faedkv.spectral`, so a state seeded with ``dft_forward(x) / M`` and a
count of ``M`` keeps absorbing samples as if the DFT had been accumulated
sample by sample. In exact mode the state after ``t`` samples is::

    S_t[k] = (1/t) * sum_{n=1..t} x_n * w_k ** (t - n + 1)

i.e. the average of all samples, each rotated to its phase relative to the
most recent one. Bins are independent, so a state may track any subset of
indices and a batch of channels at once.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UnsupportedModeError
from .spectral import SparseSpectrum, sparse_idft, twiddle_exponents, validate_indices

MAGIC = b"IWDF"
VERSION = 1
_HEADER = struct.Struct("<4sIIQBI")


class Mode(enum.IntEnum):
    EXACT = 0
    PAPER_APPROX = 1

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        names = {"exact": cls.EXACT, "approx": cls.PAPER_APPROX, "paper_approx": cls.PAPER_APPROX}
        try:
            return names[str(value).lower()]
        except KeyError:
            raise InvalidInputError(f"unknown IWDFT mode {value!r}") from None

    @property
    def label(self) -> str:
        return "exact" if self is Mode.EXACT else "approx"


def rotation_factors(M: int, indices) -> np.ndarray:
    """Per-step rotation ``exp(+2j*pi*k/M)`` for each tracked bin."""
    return np.exp(2j * np.pi * np.asarray(indices, dtype=np.float64) / M)


@dataclass
class IwdftState:
    """Recursive frequency state for one (layer, head).

    ``bins`` has shape ``(len(indices), channels)``.
    """

    period: int
    indices: np.ndarray
    bins: np.ndarray
    tokens_folded: int = 0
    mode: Mode = Mode.EXACT
    _rotation: np.ndarray = field(init=False, repr=False, compare=False)
    _power_table: np.ndarray | None = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        validate_indices(self.indices, self.period)
        bins = np.array(self.bins, dtype=np.complex128, order="C")
        if bins.ndim == 1:
            bins = bins[:, None]
        if bins.ndim != 2 or bins.shape[0] != self.indices.size:
            raise InvalidInputError(
                f"bins shape {bins.shape} does not match {self.indices.size} kept indices"
            )
        self.bins = bins
        if self.tokens_folded < 0:
            raise InvalidInputError("tokens_folded must be non-negative")
        self.mode = Mode.parse(self.mode)
        self._rotation = rotation_factors(self.period, self.indices)[:, None]

    @property
    def channels(self) -> int:
        return self.bins.shape[1]

    def copy(self) -> "IwdftState":
        return IwdftState(self.period, self.indices.copy(), self.bins.copy(), self.tokens_folded, self.mode)

    def update(self, sample) -> "IwdftState":
        """Fold one sample (scalar or one value per channel) into the state in place."""
        x = np.asarray(sample, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("sample must be finite")
        if x.ndim > 1 or (x.ndim == 1 and x.shape[0] != self.channels):
            raise InvalidInputError(f"sample shape {x.shape} does not match {self.channels} channels")
        n = self.tokens_folded + 1
        if self.mode is Mode.EXACT:
            self.bins *= (n - 1) / n
        self.bins += x / n
        self.bins *= self._rotation
        self.tokens_folded = n
        return self

    def fold_operator(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Linear map that folds ``count`` samples at once.

        Returns ``(carry, weights)`` such that folding samples ``X`` (shape
        ``(count, channels)``) one at a time gives
        ``carry[:, None] * bins + weights @ X``. ``carry`` has one entry per
        kept bin and ``weights`` is ``(kept, count)``.
        """
        if count < 0:
            raise InvalidInputError(f"fold count must be non-negative, got {count}")
        f = self.tokens_folded
        last = f + count
        j = np.arange(1, count + 1)
        table = self._powers(count)
        phases = table[:, count - j + 1]
        carry = table[:, count]
        if self.mode is Mode.EXACT:
            # the (n - 1) / n factors telescope
            carry = carry * (f / last if last else 1.0)
            scale = np.full(count, 1.0 / last) if count else np.zeros(0)
        else:
            scale = 1.0 / (f + j)
        return carry, phases * scale

    def _powers(self, count: int) -> np.ndarray:
        # rotation ** m for m = 0..count, one row per kept bin
        table = self._power_table
        if table is None or table.shape[1] <= count:
            m = np.arange(max(count + 1, 2 * (0 if table is None else table.shape[1]), 33))
            table = np.exp(2j * np.pi * twiddle_exponents(self.period, self.indices, m) / self.period)
            self._power_table = table
        return table

    def fold(self, samples) -> "IwdftState":
        """Fold a block of samples (``(count, channels)``) in place, in arrival order."""
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.channels:
            raise InvalidInputError(f"samples shape {x.shape} does not match {self.channels} channels")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("samples must be finite")
        if x.shape[0] == 0:
            return self
        carry, weights = self.fold_operator(x.shape[0])
        self.bins *= carry[:, None]
        self.bins += weights @ x
        self.tokens_folded += x.shape[0]
        return self

    def spectrum(self) -> SparseSpectrum:
        return SparseSpectrum(self.period, self.indices, self.bins)

    def densify(self) -> np.ndarray:
        return self.spectrum().densify()

    def reconstruct(self, method: str = "auto") -> np.ndarray:
        """Time-domain view of the state: ``M`` rows by ``channels``.

        The inverse is scaled by ``tokens_folded`` so that a state seeded
        from a prefill DFT reproduces that segment exactly.
        """
        return sparse_idft(self.spectrum(), self.period, gain=float(self.tokens_folded), method=method)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.period, self.tokens_folded, int(self.mode), self.indices.size)
        idx = self.indices.astype("<u4").tobytes()
        coeffs = np.ascontiguousarray(self.bins.T).astype("<c16").tobytes()
        return head + idx + coeffs

    @classmethod
    def unpack_from(cls, buf, offset: int = 0, channels: int | None = None) -> tuple["IwdftState", int]:
        """Parse a state from ``buf`` at ``offset``; returns the state and the end offset.

        ``channels`` must be given when the blob is embedded in a larger
        buffer; standalone blobs infer it from the remaining length.
        """
        buf = memoryview(buf)
        if len(buf) - offset < _HEADER.size:
            raise InvalidInputError("truncated IWDF header")
        magic, version, period, folded, mode, kept = _HEADER.unpack_from(buf, offset)
        if magic != MAGIC:
            raise InvalidInputError(f"bad IWDF magic {magic!r}")
        if version != VERSION:
            raise InvalidInputError(f"unsupported IWDF version {version}")
        pos = offset + _HEADER.size
        indices = np.frombuffer(buf, dtype="<u4", count=kept, offset=pos).astype(np.int64)
        pos += 4 * kept
        if channels is None:
            remaining = len(buf) - pos
            channels = remaining // (16 * kept) if kept else 1
        count = kept * channels
        if len(buf) - pos < 16 * count:
            raise InvalidInputError("truncated IWDF coefficients")
        flat = np.frombuffer(buf, dtype="<c16", count=count, offset=pos)
        bins = flat.reshape(channels, kept).T.astype(np.complex128)
        return cls(int(period), indices, bins, int(folded), Mode(mode)), pos + 16 * count

    @classmethod
    def from_bytes(cls, data: bytes, channels: int | None = None) -> "IwdftState":
        state, end = cls.unpack_from(data, 0, channels)
        if end != len(data):
            raise InvalidInputError(f"{len(data) - end} trailing bytes after IWDF state")
        return state


def zero_state(period: int, indices=None, channels: int = 1, mode=Mode.EXACT) -> IwdftState:
    indices = np.arange(period) if indices is None else np.asarray(indices, dtype=np.int64)
    return IwdftState(period, indices, np.zeros((len(indices), channels), np.complex128), 0, mode)


def iwdft_init(spectrum: SparseSpectrum, initial_count: int, mode=Mode.EXACT) -> IwdftState:
    """Seed a state from (normalized) coefficients after ``initial_count`` samples.

    For a prefill handoff pass ``dft_forward(x)[kept] / M`` and ``initial_count = M``.
    """
    if initial_count < 0:
        raise InvalidInputError(f"initial count must be non-negative, got {initial_count}")
    return IwdftState(spectrum.period, spectrum.indices.copy(), spectrum.coefficients.copy(), initial_count, mode)


def iwdft_update(state: IwdftState, sample) -> IwdftState:
    """Functional form of :meth:`IwdftState.update`; ``state`` is left untouched."""
    return state.copy().update(sample)


def iwdft_oracle(samples, period: int, mode=Mode.EXACT, indices=None) -> IwdftState:
    """State after folding ``samples`` into a zero state, by direct summation.

    Evaluates the unrolled recursion without iterating it: sample ``n``
    (1-based) of ``t`` carries rotation ``w_k ** (t - n + 1)`` and weight
    ``1/t`` (exact) or ``1/n`` (approximate, the count when it was absorbed).
    """
    mode = Mode.parse(mode)
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    indices = np.arange(period) if indices is None else np.asarray(indices, dtype=np.int64)
    t = x.shape[0]
    if t == 0:
        return zero_state(period, indices, x.shape[1], mode)
    n = np.arange(1, t + 1)
    powers = twiddle_exponents(period, t - n + 1, indices)
    phases = np.exp(2j * np.pi * powers / period)
    weights = np.full(t, 1.0 / t) if mode is Mode.EXACT else 1.0 / n
    bins = (phases * weights[:, None]).T @ x
    return IwdftState(period, indices, bins, t, mode)


def magnitude_bound_check(state: IwdftState, history_max: float) -> bool:
    """Whether every bin magnitude is within ``history_max`` (exact mode only).

    Raises:
        UnsupportedModeError: For approximate-mode states, which carry no bound.
    """
    if state.mode is not Mode.EXACT:
        raise UnsupportedModeError("magnitude bound only holds in exact mode")
    if state.bins.size == 0:
        return True
    return bool(np.max(np.abs(state.bins)) <= history_max * (1 + 1e-9))
