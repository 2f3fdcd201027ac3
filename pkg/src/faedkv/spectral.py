"""Forward and inverse DFTs along the token axis.

Every transform here works on arrays whose ``axis`` dimension is the token
(time) axis; any remaining dimensions are independent channels. Spectra use
the unnormalized forward convention::

    X[k] = sum_n x[n] * exp(-2j*pi*k*n/M)

and the inverse carries the ``1/M`` factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import InvalidInputError

# Largest dense inverse basis (in complex entries) kept in the cache.
_BASIS_CACHE_LIMIT = 4_000_000


def _as_signal(x, axis: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise InvalidInputError("signal must have at least one dimension")
    if arr.shape[axis] == 0:
        raise InvalidInputError("signal must contain at least one sample")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("signal contains non-finite samples")
    return arr


def _as_spectrum(X, axis: int) -> np.ndarray:
    arr = np.asarray(X, dtype=np.complex128)
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise InvalidInputError("spectrum must contain at least one bin")
    return arr


def twiddle_exponents(M: int, n, k) -> np.ndarray:
    """Return ``(n*k) mod M`` as an integer array broadcast over ``n`` and ``k``.

    Reducing the exponent before scaling keeps the phase argument in
    ``[0, 2*pi)``, which is what lets the direct sum hit 1e-12 accuracy.
    """
    n = np.asarray(n, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    return np.mod(np.multiply.outer(n, k), M)


def dft_matrix(M: int, sign: int = -1) -> np.ndarray:
    """Dense ``M x M`` DFT matrix with entries ``exp(sign*2j*pi*k*n/M)``."""
    idx = np.arange(M)
    return np.exp(sign * 2j * np.pi * twiddle_exponents(M, idx, idx) / M)


def dft_direct(x, axis: int = 0) -> np.ndarray:
    """O(M^2) evaluation of the forward DFT as a matrix product."""
    arr = _as_signal(x, axis)
    moved = np.moveaxis(arr, axis, 0)
    M = moved.shape[0]
    out = np.tensordot(dft_matrix(M, -1), moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def dft_forward(x, axis: int = 0, method: str = "fft") -> np.ndarray:
    """Forward DFT of a real signal along ``axis``.

    Args:
        x: Real samples; ``x.shape[axis]`` is the period ``M``.
        axis: Token axis.
        method: ``"fft"`` (pocketfft via :mod:`scipy.fft`, which covers
            prime and other awkward lengths with Bluestein's algorithm) or
            ``"direct"``.

    Returns:
        Complex spectrum with the same shape as ``x``.

    Raises:
        InvalidInputError: If the signal is empty or not finite.
    """
    if method == "direct":
        return dft_direct(x, axis=axis)
    if method != "fft":
        raise InvalidInputError(f"unknown DFT method {method!r}")
    return sfft.fft(_as_signal(x, axis), axis=axis)


def dft_select(x, indices, axis: int = -1) -> np.ndarray:
    """Forward DFT of a real signal evaluated only at ``indices`` along ``axis``.

    Runs a one-sided transform and reads bins above ``M/2`` off their
    conjugate mirror. The selected bins replace ``axis`` in the output.
    """
    arr = _as_signal(x, axis)
    M = arr.shape[axis]
    indices = np.asarray(indices, dtype=np.int64)
    validate_indices(indices, M)
    half = sfft.rfft(arr, axis=axis)
    mirrored = indices > M // 2
    src = np.where(mirrored, M - indices, indices)
    out = np.take(half, src, axis=axis)
    shape = [1] * out.ndim
    shape[axis] = -1
    return np.where(mirrored.reshape(shape), np.conj(out), out)


def is_conjugate_symmetric(X, axis: int = 0, atol: float = 1e-9) -> bool:
    arr = np.moveaxis(np.asarray(X, dtype=np.complex128), axis, 0)
    M = arr.shape[0]
    mirror = arr[(-np.arange(M)) % M]
    return bool(np.allclose(arr, np.conj(mirror), rtol=0.0, atol=atol))


def idft_full(X, axis: int = 0) -> np.ndarray:
    """Inverse DFT, returning the real part.

    Pruned spectra are generally not conjugate symmetric, so the imaginary
    residue is discarded rather than rejected. For symmetric input it must
    be negligible.
    """
    arr = _as_spectrum(X, axis)
    z = sfft.ifft(arr, axis=axis)
    if __debug__ and is_conjugate_symmetric(arr, axis=axis):
        scale = max(1.0, float(np.max(np.abs(z.real), initial=0.0)))
        assert np.max(np.abs(z.imag), initial=0.0) <= 1e-6 * scale
    return np.ascontiguousarray(z.real)


def spectral_energy(X, axis: int = 0) -> np.ndarray | float:
    """Sum of squared bin magnitudes along ``axis`` (Parseval: ``M * sum(x**2)``)."""
    arr = _as_spectrum(X, axis)
    energy = np.sum(arr.real**2 + arr.imag**2, axis=axis)
    return float(energy) if np.ndim(energy) == 0 else energy


@dataclass
class SparseSpectrum:
    """Spectrum stored only at ``indices``; every other bin is zero.

    ``coefficients`` has shape ``(len(indices),)`` or ``(len(indices), channels)``.
    """

    period: int
    indices: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.coefficients = np.asarray(self.coefficients, dtype=np.complex128)
        validate_indices(self.indices, self.period)
        if self.coefficients.shape[:1] != self.indices.shape:
            raise InvalidInputError(
                f"{len(self.indices)} indices but {self.coefficients.shape[0]} coefficients"
            )

    @classmethod
    def from_dense(cls, X, indices) -> "SparseSpectrum":
        X = np.asarray(X, dtype=np.complex128)
        indices = np.asarray(indices, dtype=np.int64)
        return cls(X.shape[0], indices, X[indices])

    def densify(self) -> np.ndarray:
        out = np.zeros((self.period,) + self.coefficients.shape[1:], dtype=np.complex128)
        out[self.indices] = self.coefficients
        return out


def validate_indices(indices: np.ndarray, period: int) -> None:
    if period < 1:
        raise InvalidInputError(f"period must be positive, got {period}")
    if indices.size:
        if indices[0] < 0 or indices[-1] >= period:
            raise InvalidInputError("kept indices must lie in [0, period)")
        if np.any(np.diff(indices) <= 0):
            raise InvalidInputError("kept indices must be strictly increasing")


@lru_cache(maxsize=32)
def _cached_basis(M: int, key: bytes) -> np.ndarray:
    indices = np.frombuffer(key, dtype=np.int64)
    basis = np.exp(2j * np.pi * twiddle_exponents(M, np.arange(M), indices) / M) / M
    basis.setflags(write=False)
    return basis


def idft_basis(M: int, indices) -> np.ndarray:
    """``(M, kept)`` matrix mapping kept coefficients to time samples (includes ``1/M``)."""
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if M * indices.size <= _BASIS_CACHE_LIMIT:
        return _cached_basis(M, indices.tobytes())
    return np.exp(2j * np.pi * twiddle_exponents(M, np.arange(M), indices) / M) / M


def sparse_idft(spectrum: SparseSpectrum, n_out: int, gain: float = 1.0, method: str = "auto") -> np.ndarray:
    """Inverse DFT that only touches the kept bins.

    ``method="direct"`` multiplies by the ``(n_out, kept)`` inverse basis, so
    work is ``kept * n_out`` per channel. ``"fft"`` zero-fills and runs a
    full inverse FFT. ``"auto"`` takes the direct route while it is the
    cheaper one. ``gain`` scales the coefficients before the inverse.

    Raises:
        InvalidInputError: If ``n_out`` differs from the spectrum's period.
    """
    if n_out != spectrum.period:
        raise InvalidInputError(
            f"sparse IDFT reconstructs the original period {spectrum.period}, got n_out={n_out}"
        )
    M = spectrum.period
    kept = spectrum.indices.size
    coeffs = spectrum.coefficients
    if kept == 0:
        return np.zeros((M,) + coeffs.shape[1:])
    if method == "auto":
        method = "direct" if kept <= 8 * max(1, math.ceil(math.log2(M))) else "fft"
    if method == "fft" or M * kept > _BASIS_CACHE_LIMIT:
        dense = np.zeros((M,) + coeffs.shape[1:], dtype=np.complex128)
        dense[spectrum.indices] = coeffs if gain == 1.0 else gain * coeffs
        return np.ascontiguousarray(sfft.ifft(dense, axis=0).real)
    if method != "direct":
        raise InvalidInputError(f"unknown sparse IDFT method {method!r}")
    basis = idft_basis(M, spectrum.indices)
    z = basis @ coeffs if gain == 1.0 else basis @ (gain * coeffs)
    return np.ascontiguousarray(z.real)


def _pairs(rows: np.ndarray) -> np.ndarray:
    # pad to an even row count so rows can be packed two per complex transform
    if rows.shape[0] % 2:
        rows = np.concatenate([rows, np.zeros((1,) + rows.shape[1:], dtype=rows.dtype)])
    return rows


def real_part_ifft(Z) -> np.ndarray:
    """``Re(ifft(Z))`` for each row of a ``(rows, M)`` spectrum.

    Two rows share one complex transform: the real part of a row's inverse
    is the inverse of its Hermitian part, which is real, so one row rides in
    the real output and the next in the imaginary output.
    """
    Z = np.asarray(Z, dtype=np.complex128)
    rows, M = Z.shape
    mirror = (-np.arange(M)) % M
    herm = 0.5 * (Z + np.conj(Z[:, mirror]))
    herm = _pairs(herm)
    packed = sfft.ifft(herm[0::2] + 1j * herm[1::2], axis=1)
    out = np.empty((herm.shape[0], M))
    out[0::2] = packed.real
    out[1::2] = packed.imag
    return out[:rows]


def real_rows_dft(x, indices) -> np.ndarray:
    """Forward DFT of each real row of ``x`` (``(rows, M)``) at ``indices`` only.

    Rows are packed in pairs into complex transforms and separated with the
    conjugate mirror bins.
    """
    x = np.asarray(x, dtype=np.float64)
    rows, M = x.shape
    indices = np.asarray(indices, dtype=np.int64)
    packed = _pairs(x)
    A = sfft.fft(packed[0::2] + 1j * packed[1::2], axis=1)
    a, b = A[:, indices], np.conj(A[:, (-indices) % M])
    out = np.empty((packed.shape[0], indices.size), dtype=np.complex128)
    out[0::2] = 0.5 * (a + b)
    out[1::2] = -0.5j * (a - b)
    return out[:rows]
