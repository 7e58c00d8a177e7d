"""hgflow: ternary-backbone transformer layers with gated low-rank
correction, differential attention, desk-scale training, packed
inference, and deployment calculators.
"""

from .config import Mode, ModelConfig, TrainConfig
from .data import Corpus, batch_stream, detokenize, tokenize_bytes
from .layers import Model, gate_statistics
from .packing import PackingMode, pack_trits, unpack_trits
from .quant import (
    QuantizedActivation,
    TernaryWeight,
    quantize_activations,
    quantize_weights,
    ternary_forward,
)
from .tensor import Tensor, backward, no_grad
from .training import AdamW, MetricsRecord, Trainer, evaluate, reg_weight

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Corpus",
    "MetricsRecord",
    "Mode",
    "Model",
    "ModelConfig",
    "PackingMode",
    "QuantizedActivation",
    "Tensor",
    "TernaryWeight",
    "TrainConfig",
    "Trainer",
    "backward",
    "batch_stream",
    "detokenize",
    "evaluate",
    "gate_statistics",
    "no_grad",
    "pack_trits",
    "quantize_activations",
    "quantize_weights",
    "reg_weight",
    "ternary_forward",
    "tokenize_bytes",
    "unpack_trits",
    "__version__",
]
