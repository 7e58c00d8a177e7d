"""Ternary weight and int8 activation quantizers, plus straight-through
training ops.

Conventions, shared by the training (fake-quantized) and inference
(integer) paths so both produce identical integer grids:

* rounding is round-half-to-even everywhere (numpy rint semantics);
* scales are stored directly (gamma, not 1/gamma) and clamped to >= 1e-5;
* weights use one scale per matrix (mean absolute value), activations one
  scale per token (max absolute value over the feature axis);
* int8 activations use the symmetric range [-127, 127].
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .packing import PackingMode, pack_trits, packed_length, unpack_trits

SCALE_EPS = 1e-5
INT8_MAX = 127
# int32 accumulation of int8 * trit products is exact up to this width.
MAX_ACCUM_DIM = 1 << 16


def weight_grid(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Map a weight matrix onto the ternary grid.

    Returns (trits in {-1,0,1} as int8, scale gamma). The dequantized
    matrix is gamma * trits.
    """
    w = np.asarray(w)
    if w.size < 1:
        raise ContractError("cannot quantize an empty matrix")
    if not np.all(np.isfinite(w)):
        raise ContractError("weight matrix contains non-finite values")
    scale = max(float(np.mean(np.abs(w), dtype=np.float64)), SCALE_EPS)
    scale = float(w.dtype.type(scale))
    trits = np.clip(np.rint(w / w.dtype.type(scale)), -1, 1).astype(np.int8)
    return trits, scale


def activation_grid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-token int8 grid: values in [-127, 127], one scale per token.

    The token axis is everything except the last (feature) axis.
    """
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ContractError("activations contain non-finite values")
    amax = np.max(np.abs(x), axis=-1)
    scales = np.maximum(amax, x.dtype.type(SCALE_EPS))
    ratio = (x / scales[..., None]) * x.dtype.type(INT8_MAX)
    values = np.clip(np.rint(ratio), -INT8_MAX, INT8_MAX).astype(np.int8)
    return values, scales


class TernaryWeight:
    """A packed trit matrix with its dequantization scale."""

    __slots__ = ("shape", "packed", "scale", "packing_mode", "_dense")

    def __init__(self, shape, packed, scale, packing_mode: PackingMode):
        self.shape = tuple(int(s) for s in shape)
        self.packed = np.asarray(packed, dtype=np.uint8)
        if scale <= 0:
            raise ContractError("ternary scale must be positive")
        self.scale = float(scale)
        self.packing_mode = packing_mode
        self._dense = None

    @property
    def out_features(self) -> int:
        return self.shape[0]

    @property
    def in_features(self) -> int:
        return self.shape[1]

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))

    def trits(self) -> np.ndarray:
        """Decode to an int8 matrix of shape (out_features, in_features)."""
        if self._dense is None:
            flat = unpack_trits(self.packed, self.count, self.packing_mode)
            self._dense = flat.reshape(self.shape)
        return self._dense

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return self.trits().astype(dtype) * dtype(self.scale)


class QuantizedActivation:
    """Int8 activation values with per-token float scales."""

    __slots__ = ("values", "scales")

    def __init__(self, values: np.ndarray, scales: np.ndarray):
        self.values = values
        self.scales = scales

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return self.values.astype(dtype) * (
            self.scales.astype(dtype)[..., None] / dtype(INT8_MAX)
        )


def quantize_weights(w, packing: PackingMode = PackingMode.TWO_BIT) -> TernaryWeight:
    """Absmean ternary quantization of a 2D weight matrix."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2D weight matrix, got shape {w.shape}")
    trits, scale = weight_grid(w)
    return TernaryWeight(w.shape, pack_trits(trits.reshape(-1), packing), scale, packing)


def quantize_activations(x) -> QuantizedActivation:
    """Dynamic per-token int8 quantization over the last axis."""
    values, scales = activation_grid(np.asarray(x))
    return QuantizedActivation(values, scales)


def ternary_forward(x: np.ndarray, w: TernaryWeight) -> np.ndarray:
    """Integer-path linear layer: (x_int8 @ trits.T) * (gamma_x * gamma_w / 127).

    Accumulates in int32; exact because |sum| <= d * 127 < 2^31 for the
    asserted width limit.
    """
    x = np.asarray(x)
    d = x.shape[-1]
    if d != w.in_features:
        raise ShapeError(f"input width {d} does not match weight in_features {w.in_features}")
    if d > MAX_ACCUM_DIM:
        raise ContractError(f"inner dimension {d} exceeds the int32 accumulator contract")
    qa = quantize_activations(x)
    acc = np.matmul(qa.values.astype(np.int32), w.trits().T.astype(np.int32))
    coeff = qa.scales.astype(np.float32) * np.float32(w.scale) / np.float32(INT8_MAX)
    return acc.astype(np.float32) * coeff[..., None]


# ---------------------------------------------------------------------------
# Straight-through estimator ops on the autodiff tape.
#
# Forward values sit exactly on the quantization grids above; backward
# passes gradients through unchanged, as if quantization were the
# identity. The rounding step has zero derivative almost everywhere, so
# this identity rule is what lets latent weights keep learning.

def ste_quantize_weights(w: T.Tensor) -> T.Tensor:
    trits, scale = weight_grid(w.data)
    value = trits.astype(w.data.dtype) * w.data.dtype.type(scale)
    return T._result(value, "ste_weight_quant", (w,))


def ste_quantize_activations(x: T.Tensor) -> T.Tensor:
    values, scales = activation_grid(x.data)
    value = values.astype(x.data.dtype) * (scales[..., None] / x.data.dtype.type(INT8_MAX))
    return T._result(value, "ste_act_quant", (x,))


def _ste_identity_backward(node, g):
    return (g,)


T.register_op("ste_weight_quant", _ste_identity_backward)
T.register_op("ste_act_quant", _ste_identity_backward)


def ste_linear(x: T.Tensor, w_latent: T.Tensor) -> T.Tensor:
    """Training-path quantized linear body.

    `x` must already be layer-normalized by the caller. The forward value
    equals fake-quantize-both-then-matmul; gradients reach `x` and
    `w_latent` as if both quantizers were the identity.
    """
    if w_latent.data.ndim != 2:
        raise ShapeError("latent weight must be 2D (out_features, in_features)")
    xq = ste_quantize_activations(x)
    wq = ste_quantize_weights(w_latent)
    return T.matmul(xq, T.transpose(wq, (1, 0)))


def export_size_bytes(count: int, mode: PackingMode) -> int:
    """Payload bytes for one packed matrix (scale lives in the header)."""
    return packed_length(count, mode)
