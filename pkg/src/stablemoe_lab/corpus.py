"""Byte-level tokenization and contiguous train/valid/test splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ContractError

VOCAB_SIZE = 256


def tokenize(data: bytes | str) -> np.ndarray:
    """Each byte becomes its own id (0-255); strings are UTF-8 encoded first."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise ValueError("token ids must lie in [0, 256)")
    return arr.astype(np.uint8).tobytes()


@dataclass
class CorpusSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    fractions: tuple[float, float, float]
    source: str
    content_hash: str
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


def split_tokens(ids: np.ndarray, fractions=(0.9, 0.05, 0.05), seed: int = 0, source: str = "<memory>") -> CorpusSplit:
    """Cut the stream into three contiguous, disjoint byte ranges.

    The order of the three ranges along the file is a seeded permutation, so
    the same seed always yields the same split.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0]
    if n == 0:
        raise ContractError("corpus is empty")
    sizes = [int(round(f * n)) for f in fr[:2]]
    sizes.append(n - sum(sizes))
    order = [0, 1, 2] if seed == 0 else list(np.random.default_rng(seed).permutation(3))
    bounds = {}
    start = 0
    for part in order:
        bounds[part] = (start, start + sizes[part])
        start += sizes[part]
    digest = hashlib.sha256(ids.astype(np.uint8).tobytes()).hexdigest()
    train, valid, test = (ids[slice(*bounds[i])] for i in range(3))
    return CorpusSplit(train, valid, test, fr, source, digest, seed)


def load_corpus(path, fractions=(0.9, 0.05, 0.05), seed: int = 0) -> CorpusSplit:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {p}")
    data = p.read_bytes()
    if not data:
        raise ContractError(f"corpus file is empty: {p}")
    return split_tokens(tokenize(data), fractions, seed, source=str(p))
