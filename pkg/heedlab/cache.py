"""
Density-weighted residual alignment laboratory.

One-time per-corpus density cache.

Layout (all integers little-endian)::

    header   magic "HEEDCACH" | version u32 | n_samples u32
    index    n_samples x (sample_id u64 | offset u64 | n_positions u32)
    payload  one block per sample, starting on a 64-byte boundary

A block holds one 4-bit code per visual position, two per byte, the earlier
position in the low nibble. An odd count leaves the last high nibble at 0 and
every block is zero-padded up to the next multiple of 64 bytes.
"""
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from tendo.singleton import SingleInstance, SingleInstanceException

from .constants import CACHE_ALIGNMENT, CACHE_LEVELS, CACHE_MAGIC, CACHE_VERSION, GRAD_NAMESPACE
from .density import DensityMap
from .exceptions import (
    BadMagic,
    BadVersion,
    CacheError,
    DuplicateSample,
    Misaligned,
    QuantizationRangeError,
    Truncated,
)
from .utils import sizeof_fmt

__all__ = (
    "CacheEntry",
    "CacheFile",
    "decode_cache",
    "dequantize4",
    "encode_cache",
    "estimate_cache_size",
    "quantize4",
    "read_cache",
    "summarize",
    "write_cache",
)

log = logging.getLogger(__name__)

HEADER = struct.Struct("<8sII")
INDEX_ENTRY = struct.Struct("<QQI")

Scalars = Union[float, Sequence[float], np.ndarray]


def quantize4(rho_tilde: Scalars) -> Union[int, np.ndarray]:
    """Code = round(ρ̃·15), halves rounded away from zero."""
    values = np.asarray(rho_tilde, dtype=np.float64)
    if not np.all((values >= 0.0) & (values <= 1.0)):
        raise QuantizationRangeError("quantize4 expects values in [0, 1]")
    codes = np.floor(values * CACHE_LEVELS + 0.5).astype(np.uint8)
    if codes.ndim == 0:
        return int(codes)
    return codes


def dequantize4(codes: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
    values = np.asarray(codes, dtype=np.float64) / CACHE_LEVELS
    if values.ndim == 0:
        return float(values)
    return values


def _padded(size: int) -> int:
    return -(-size // CACHE_ALIGNMENT) * CACHE_ALIGNMENT


def pack_nibbles(codes: np.ndarray) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    pairs = codes.reshape(-1, 2)
    return ((pairs[:, 1] << 4) | pairs[:, 0]).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    return np.dstack((raw & 0xF, raw >> 4)).ravel()[:count].astype(np.uint8)


@dataclass(frozen=True)
class CacheEntry:
    sample_id: int
    n_positions: int
    nibbles: np.ndarray

    def __post_init__(self) -> None:
        if not 0 <= self.sample_id < 1 << 64:
            raise CacheError(f"sample id {self.sample_id} does not fit in 64 bits")
        if self.n_positions < 1:
            raise CacheError(f"sample {self.sample_id} has no visual position")
        if self.nibbles.size != self.n_positions:
            raise CacheError(f"sample {self.sample_id}: {self.nibbles.size} codes for {self.n_positions} positions")
        if self.nibbles.size and int(self.nibbles.max()) > CACHE_LEVELS:
            raise CacheError(f"sample {self.sample_id}: nibble codes must be in [0, 15]")

    @classmethod
    def from_rho_tilde(cls, sample_id: int, rho_tilde: Scalars) -> "CacheEntry":
        codes = np.atleast_1d(quantize4(np.ravel(np.asarray(rho_tilde, dtype=np.float64))))
        return cls(sample_id=int(sample_id), n_positions=int(codes.size), nibbles=codes)

    @property
    def rho_tilde(self) -> np.ndarray:
        return dequantize4(self.nibbles)

    def density_map(self) -> DensityMap:
        """
        Density map rebuilt from the cached codes.

        The cache only knows ρ̃, so it stands in for ρ: text densities are then
        derived on the normalized scale by sequence_weights.
        """
        rho_tilde = self.rho_tilde
        degenerate = bool(rho_tilde.max() == rho_tilde.min())
        return DensityMap(
            rho=rho_tilde,
            rho_tilde=np.zeros_like(rho_tilde) if degenerate else rho_tilde,
            degenerate_flag=degenerate,
        )


@dataclass(frozen=True)
class CacheFile:
    version: int
    entries: Tuple[CacheEntry, ...]

    @property
    def n_samples(self) -> int:
        return len(self.entries)

    def by_id(self) -> Dict[int, CacheEntry]:
        return {entry.sample_id: entry for entry in self.entries}

    def density_maps(self) -> Dict[int, DensityMap]:
        return {entry.sample_id: entry.density_map() for entry in self.entries if entry.sample_id < GRAD_NAMESPACE}

    def grad_weights(self) -> Dict[int, np.ndarray]:
        """Gradient reference weights stored under the upper id namespace, rescaled to Σw = T."""
        weights = {}
        for entry in self.entries:
            if entry.sample_id >= GRAD_NAMESPACE:
                # A zero code still means "some" sensitivity: floor at half a level
                values = np.maximum(entry.rho_tilde, 0.5 / CACHE_LEVELS)
                weights[entry.sample_id - GRAD_NAMESPACE] = values * (values.size / values.sum())
        return weights


def grad_entry(sample_id: int, weights: np.ndarray) -> CacheEntry:
    """Cache entry of a gradient weight vector, stored as w / max(w)."""
    weights = np.asarray(weights, dtype=np.float64)
    return CacheEntry.from_rho_tilde(GRAD_NAMESPACE | int(sample_id), weights / weights.max())


def _as_entries(samples: Iterable[Union[CacheEntry, Tuple[int, Scalars]]]) -> List[CacheEntry]:
    entries = []
    for sample in samples:
        if isinstance(sample, CacheEntry):
            entries.append(sample)
        else:
            sample_id, rho_tilde = sample
            entries.append(CacheEntry.from_rho_tilde(sample_id, rho_tilde))
    return entries


def encode_cache(samples: Iterable[Union[CacheEntry, Tuple[int, Scalars]]]) -> bytes:
    """Serialize (sample_id, ρ̃) pairs or ready CacheEntry objects."""
    entries = _as_entries(samples)

    seen = set()
    for entry in entries:
        if entry.sample_id in seen:
            raise DuplicateSample(f"duplicate sample id {entry.sample_id}")
        seen.add(entry.sample_id)

    header = HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(entries))
    if not entries:
        return header

    offset = _padded(HEADER.size + INDEX_ENTRY.size * len(entries))
    index = bytearray()
    blocks = []
    for entry in entries:
        index += INDEX_ENTRY.pack(entry.sample_id, offset, entry.n_positions)
        block = pack_nibbles(entry.nibbles)
        blocks.append(block.ljust(_padded(len(block)), b"\x00"))
        offset += len(blocks[-1])

    head = header + bytes(index)
    return head.ljust(_padded(len(head)), b"\x00") + b"".join(blocks)


def decode_cache(data: bytes) -> CacheFile:
    if len(data) < HEADER.size:
        raise Truncated(f"cache holds {len(data)} bytes, the header alone needs {HEADER.size}")

    magic, version, n_samples = HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise BadVersion(f"unsupported cache version {version}")

    index_end = HEADER.size + INDEX_ENTRY.size * n_samples
    if len(data) < index_end:
        raise Truncated(f"index of {n_samples} samples is cut at byte {len(data)}")

    entries = []
    seen = set()
    previous = index_end - 1
    for n in range(n_samples):
        sample_id, offset, n_positions = INDEX_ENTRY.unpack_from(data, HEADER.size + n * INDEX_ENTRY.size)
        if offset % CACHE_ALIGNMENT or offset <= previous:
            raise Misaligned(f"sample {sample_id}: payload offset {offset} is misaligned")
        end = offset + (n_positions + 1) // 2
        block_end = offset + _padded(end - offset)
        if block_end > len(data):
            raise Truncated(f"sample {sample_id}: block ends at byte {block_end}, cache holds {len(data)}")
        if sample_id in seen:
            raise DuplicateSample(f"duplicate sample id {sample_id}")
        seen.add(sample_id)
        previous = offset

        codes = unpack_nibbles(data[offset:end], n_positions)
        entries.append(CacheEntry(sample_id=sample_id, n_positions=n_positions, nibbles=codes))

    return CacheFile(version=version, entries=tuple(entries))


def estimate_cache_size(positions_per_sample: Sequence[int]) -> int:
    """Exact encoded size for the given per-sample visual position counts."""
    n_samples = len(positions_per_sample)
    if not n_samples:
        return HEADER.size
    head = _padded(HEADER.size + INDEX_ENTRY.size * n_samples)
    return head + sum(_padded((int(n) + 1) // 2) for n in positions_per_sample)


def estimate_corpus_cache_size(n_scalars: int, positions_per_sample: int) -> int:
    """Size formula for a corpus of equally sized samples, evaluated without building anything."""
    n_samples = -(-int(n_scalars) // int(positions_per_sample))
    head = _padded(HEADER.size + INDEX_ENTRY.size * n_samples)
    return head + n_samples * _padded((int(positions_per_sample) + 1) // 2)


def write_cache(path: Union[str, Path], samples: Iterable[Union[CacheEntry, Tuple[int, Scalars]]]) -> int:
    """Encode and atomically write a cache file; one writer per file."""
    path = Path(path)
    try:
        me = SingleInstance(flavor_id=path.name, lockfile=str(path) + ".lock")  # noqa
    except SingleInstanceException:
        raise CacheError(f"another process is writing {path}")

    data = encode_cache(samples)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(data)
        # Force write of file to disk
        handle.flush()
        os.fsync(handle.fileno())
    tmp.replace(path)
    log.info("wrote %s (%s)", path, sizeof_fmt(len(data)))
    return len(data)


def read_cache(path: Union[str, Path]) -> CacheFile:
    return decode_cache(Path(path).read_bytes())


def summarize(cache: CacheFile, size: int) -> Dict[str, object]:
    """Counts and sizes of a decoded cache, as printed by `cache inspect`."""
    density = [entry for entry in cache.entries if entry.sample_id < GRAD_NAMESPACE]
    grad = [entry for entry in cache.entries if entry.sample_id >= GRAD_NAMESPACE]
    return {
        "version": cache.version,
        "n_samples": cache.n_samples,
        "density_entries": len(density),
        "grad_entries": len(grad),
        "positions": sum(entry.n_positions for entry in cache.entries),
        "size": size,
        "size_human": sizeof_fmt(size),
        "estimated_size": estimate_cache_size([entry.n_positions for entry in cache.entries]),
    }
