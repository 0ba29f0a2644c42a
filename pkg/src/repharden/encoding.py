"""Character-trigram signed-hash features with order-invariant category pooling.

Entries are encoded independently of any learned state, so encodings are
cached by string. Pooling sums sparse encodings in sorted-entry order, which
makes the result bitwise independent of entry permutation — required for the
determinism guarantees downstream.
"""

from __future__ import annotations

import zlib

import numpy as np

from .reports import CATEGORIES, Report

DEFAULT_HASH_DIM = 1024


# Trigram CRCs are independent of hash_dim, so one process-wide cache serves
# every encoder. Trigram vocabulary is small in practice; the cap is a fuse.
_CRC_CACHE: dict[str, int] = {}
_CRC_CACHE_CAP = 2_000_000


def _crc32(trigram: str) -> int:
    h = _CRC_CACHE.get(trigram)
    if h is None:
        if len(_CRC_CACHE) >= _CRC_CACHE_CAP:
            _CRC_CACHE.clear()
        h = zlib.crc32(trigram.encode("utf-8"))
        _CRC_CACHE[trigram] = h
    return h


def _trigram_sparse(s: str, hash_dim: int) -> tuple[np.ndarray, np.ndarray]:
    padded = "^" + s + "$"
    buckets: dict[int, float] = {}
    for i in range(len(padded) - 2):
        h = _crc32(padded[i : i + 3])
        sign = 1.0 if (h >> 17) & 1 else -1.0
        b = h % hash_dim
        buckets[b] = buckets.get(b, 0.0) + sign
    items = sorted((b, v) for b, v in buckets.items() if v != 0.0)
    if not items:  # total signed cancellation: degenerate zero encoding
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    idx = np.array([b for b, _ in items], dtype=np.int64)
    vals = np.array([v for _, v in items], dtype=np.float64)
    vals /= np.sqrt(np.sum(vals * vals))
    return idx, vals


class EntryEncoder:
    """Caching encoder mapping entry strings to sparse unit-norm vectors."""

    def __init__(self, hash_dim: int = DEFAULT_HASH_DIM, cache_cap: int = 500_000):
        self.hash_dim = hash_dim
        self.cache_cap = cache_cap
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def sparse(self, s: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(s)
        if hit is None:
            if len(self._cache) >= self.cache_cap:
                self._cache.clear()
            hit = _trigram_sparse(s, self.hash_dim)
            self._cache[s] = hit
        return hit

    def dense(self, s: str) -> np.ndarray:
        idx, vals = self.sparse(s)
        out = np.zeros(self.hash_dim, dtype=np.float64)
        out[idx] = vals
        return out


def encode_entry(s: str, hash_dim: int = DEFAULT_HASH_DIM) -> np.ndarray:
    """L2-normalized signed-hash vector of the boundary-padded trigrams of s."""
    idx, vals = _trigram_sparse(s, hash_dim)
    out = np.zeros(hash_dim, dtype=np.float64)
    out[idx] = vals
    return out


def pool_category(entries: list[str], encoder: EntryEncoder) -> np.ndarray:
    """Mean of entry encodings, accumulated in sorted-entry order.

    Empty categories pool to the zero vector. Sorting before summation makes
    the float result identical under any permutation of the input list.
    """
    out = np.zeros(encoder.hash_dim, dtype=np.float64)
    if not entries:
        return out
    pairs = [encoder.sparse(e) for e in sorted(entries)]
    idx = np.concatenate([p[0] for p in pairs])
    vals = np.concatenate([p[1] for p in pairs])
    np.add.at(out, idx, vals)
    out /= len(entries)
    return out


def pool_report(r: Report, encoder: EntryEncoder) -> np.ndarray:
    """(13, hash_dim) stack of category pools in canonical category order."""
    return np.stack([pool_category(r.categories[c], encoder) for c in CATEGORIES])
