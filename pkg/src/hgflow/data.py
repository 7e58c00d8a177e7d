"""Corpus ingestion, byte-level tokenization, and deterministic batching.

Tokenization is byte-level (vocab 256): ids are the raw byte values, so
detokenize(tokenize(text)) is the identity on byte strings. Batches are
a pure function of (seed, step), which is what makes training runs
bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

VOCAB_SIZE = 256


def tokenize_bytes(text) -> np.ndarray:
    """Map a str (utf-8) or bytes to an int64 id stream with vocab 256."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ContractError("byte ids must be in [0, 256)")
    return ids.astype(np.uint8).tobytes()


class Corpus:
    """A byte-id stream split into disjoint train and validation parts.

    The validation slice is the final `val_fraction` of the stream, so
    the split is position-deterministic and the two parts never overlap.
    """

    def __init__(self, ids: np.ndarray, val_fraction: float = 0.02):
        ids = np.asarray(ids, dtype=np.int64)
        if not (0.0 < val_fraction < 1.0):
            raise ContractError("val_fraction must be in (0, 1)")
        if ids.size < 4:
            raise ContractError("corpus is too small to split")
        self.ids = ids
        self.val_fraction = val_fraction
        n_val = max(1, int(round(ids.size * val_fraction)))
        self.train_ids = ids[: ids.size - n_val]
        self.val_ids = ids[ids.size - n_val:]

    @classmethod
    def from_text(cls, text, val_fraction: float = 0.02) -> "Corpus":
        return cls(tokenize_bytes(text), val_fraction=val_fraction)

    @classmethod
    def from_files(cls, paths, val_fraction: float = 0.02) -> "Corpus":
        if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
            paths = [paths]
        chunks = []
        for path in paths:
            with open(path, "rb") as fh:
                chunks.append(fh.read())
        return cls(tokenize_bytes(b"".join(chunks)), val_fraction=val_fraction)


def batch_stream(ids: np.ndarray, ctx_len: int, micro_batch: int, seed: int, step: int):
    """One deterministic training micro-batch.

    Window starts are drawn from a generator keyed by (seed, step) only,
    so the same arguments always produce the same batch. Returns
    (inputs, targets) where targets are inputs shifted left by one.
    """
    ids = np.asarray(ids)
    if ids.size < ctx_len + 1:
        raise ContractError(
            f"corpus has {ids.size} tokens, need at least ctx_len + 1 = {ctx_len + 1}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    starts = rng.integers(0, ids.size - ctx_len, size=micro_batch)
    windows = np.stack([ids[s: s + ctx_len + 1] for s in starts])
    return windows[:, :-1], windows[:, 1:]


def validation_batches(ids: np.ndarray, ctx_len: int, micro_batch: int, n_batches: int):
    """Fixed evaluation slice: sequential windows, wrapping if needed."""
    ids = np.asarray(ids)
    if n_batches < 1:
        raise ContractError("need at least one validation batch")
    if ids.size < ctx_len + 1:
        raise ContractError(
            f"validation stream has {ids.size} tokens, need at least {ctx_len + 1}"
        )
    span = ids.size - ctx_len - 1
    batches = []
    index = 0
    for _ in range(n_batches):
        rows = []
        for _ in range(micro_batch):
            start = index % (span + 1)
            rows.append(ids[start: start + ctx_len + 1])
            index += ctx_len + 1
        windows = np.stack(rows)
        batches.append((windows[:, :-1], windows[:, 1:]))
    return batches
