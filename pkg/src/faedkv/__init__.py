"""Frequency-domain KV-cache compression with an infinite-window recursive DFT."""

from .cache import (
    AssembledKV,
    CompressedKV,
    Compression,
    FullCache,
    MemoryReport,
    append_token,
    assemble,
    attend,
    load_snapshot,
    memory_report,
    prefill_compress,
    reconstruct,
    save_snapshot,
)
from .errors import ContextTooShortError, InvalidInputError, UnsupportedModeError
from .iwdft import IwdftState, Mode, iwdft_init, iwdft_oracle, iwdft_update, magnitude_bound_check
from .masks import ChunkPartition, PruneMask, partition, zero_chunk
from .model import ModelConfig, ToyModel, init_model, load_weights, perplexity, save_weights
from .spectral import SparseSpectrum, dft_forward, idft_full, sparse_idft, spectral_energy

__version__ = "0.1.0"
