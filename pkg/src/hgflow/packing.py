"""Bit-packed storage codecs for ternary weight matrices.

Two layouts are supported, both little-endian byte streams:

* TWO_BIT: 4 trits per byte. Trit i occupies bit pair 2*(i mod 4) of
  byte i//4 with the mapping {-1: 0b10, 0: 0b00, +1: 0b01}. Trailing
  pairs of the final byte are zero-padded. The pair value 0b11 never
  appears in a valid stream.
* FIVE_PER_BYTE: base-3 digit packing, 5 trits per byte (1.6 bits per
  trit). Byte value = sum_j (trit_{5k+j} + 1) * 3^j, so valid bytes are
  in [0, 242]. Trailing digits are padded with trit 0 (digit 1).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import CodecError

_TWO_BIT_CODES = {-1: 0b10, 0: 0b00, 1: 0b01}


class PackingMode(str, Enum):
    TWO_BIT = "2bit"
    FIVE_PER_BYTE = "5pb"

    @classmethod
    def from_token(cls, token: str) -> "PackingMode":
        for mode in cls:
            if mode.value == token:
                return mode
        raise CodecError(f"unknown packing mode {token!r}")


def packed_length(count: int, mode: PackingMode) -> int:
    """Exact byte length of `count` packed trits."""
    if count < 0:
        raise CodecError("trit count must be non-negative")
    if mode is PackingMode.TWO_BIT:
        return (count + 3) // 4
    return (count + 4) // 5


def _validated_trits(trits) -> np.ndarray:
    arr = np.asarray(trits)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size and not np.all(np.isin(arr, (-1, 0, 1))):
        bad = arr[~np.isin(arr, (-1, 0, 1))][0]
        raise CodecError(f"invalid trit value {bad!r}, expected -1, 0 or +1")
    return arr.astype(np.int8)


def pack_trits(trits, mode: PackingMode = PackingMode.TWO_BIT) -> np.ndarray:
    """Pack a flat trit sequence into a uint8 buffer."""
    arr = _validated_trits(trits)
    n = arr.size
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    if mode is PackingMode.TWO_BIT:
        codes = np.where(arr == -1, 2, arr).astype(np.uint8)
        pad = (-n) % 4
        if pad:
            codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
        quads = codes.reshape(-1, 4)
        return (
            quads[:, 0]
            | (quads[:, 1] << 2)
            | (quads[:, 2] << 4)
            | (quads[:, 3] << 6)
        ).astype(np.uint8)
    digits = (arr.astype(np.int16) + 1).astype(np.uint8)
    pad = (-n) % 5
    if pad:
        digits = np.concatenate([digits, np.ones(pad, dtype=np.uint8)])
    groups = digits.reshape(-1, 5).astype(np.uint16)
    bytes_ = groups[:, 0] + 3 * groups[:, 1] + 9 * groups[:, 2] + 27 * groups[:, 3] + 81 * groups[:, 4]
    return bytes_.astype(np.uint8)


def unpack_trits(packed, count: int, mode: PackingMode = PackingMode.TWO_BIT) -> np.ndarray:
    """Decode `count` trits from a packed buffer. Exact inverse of pack_trits."""
    buf = np.asarray(packed, dtype=np.uint8).reshape(-1)
    expected = packed_length(count, mode)
    if buf.size != expected:
        raise CodecError(
            f"packed buffer has {buf.size} bytes, expected {expected} for {count} trits"
        )
    if count == 0:
        return np.zeros(0, dtype=np.int8)
    if mode is PackingMode.TWO_BIT:
        pairs = np.stack(
            [buf & 0b11, (buf >> 2) & 0b11, (buf >> 4) & 0b11, (buf >> 6) & 0b11],
            axis=1,
        ).reshape(-1)
        if np.any(pairs == 0b11):
            raise CodecError("invalid bit pair 0b11 in TWO_BIT stream")
        trits = pairs.astype(np.int8)
        trits[trits == 2] = -1
        return trits[:count]
    if np.any(buf > 242):
        raise CodecError("byte value out of base-3 range in FIVE_PER_BYTE stream")
    vals = buf.astype(np.uint16)
    digits = np.empty((buf.size, 5), dtype=np.int8)
    for j in range(5):
        digits[:, j] = (vals % 3).astype(np.int8)
        vals //= 3
    return (digits.reshape(-1) - 1)[:count]
