"""Checkpoint container: a human-readable JSON header describing a
tensor table, followed by contiguous little-endian tensor payloads.

Layout:

    b"HGFCKPT1\\n"
    b"<decimal header byte length>\\n"
    <header JSON, utf-8>
    b"\\n"
    <payload bytes>

The header round-trips every config field, and saving a loaded
checkpoint reproduces the file byte for byte. Two variants exist:
"train" stores every parameter as FP32; "ternary" stores quantized
backbones as packed trits plus a scale, and gate parameters as their
frozen tanh values, so inference needs no latent backbone weights.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import CheckpointError, ConfigError
from .layers import DiffAttention, Model
from .packing import PackingMode, packed_length
from .quant import TernaryWeight, quantize_weights

MAGIC = b"HGFCKPT1\n"
FORMAT_VERSION = 1

DTYPE_FP32 = "FP32"
DTYPE_INT8 = "INT8"
DTYPE_TRIT_2BIT = "TRIT_PACKED_2BIT"
DTYPE_TRIT_5PB = "TRIT_PACKED_5PB"

_TRIT_DTYPES = {
    DTYPE_TRIT_2BIT: PackingMode.TWO_BIT,
    DTYPE_TRIT_5PB: PackingMode.FIVE_PER_BYTE,
}
_PACKING_DTYPES = {v: k for k, v in _TRIT_DTYPES.items()}


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    length: int
    scale: float | None = None

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "dtype": self.dtype,
            "shape": list(self.shape),
            "offset": self.offset,
            "length": self.length,
        }
        if self.scale is not None:
            d["scale"] = self.scale
        return d


class Checkpoint:
    def __init__(self, header: dict, payload: bytes):
        self.header = header
        self.payload = payload
        self.entries = [
            TensorEntry(
                name=e["name"], dtype=e["dtype"], shape=tuple(e["shape"]),
                offset=e["offset"], length=e["length"], scale=e.get("scale"),
            )
            for e in header["tensors"]
        ]
        self._validate_table()

    def _validate_table(self):
        cursor = -1
        for e in self.entries:
            if e.offset <= cursor:
                raise CheckpointError(f"tensor table offsets overlap at {e.name!r}")
            if e.offset + e.length > len(self.payload):
                raise CheckpointError(f"tensor {e.name!r} extends past the payload")
            cursor = e.offset + e.length - 1

    # -- basic access --------------------------------------------------------

    def tensor_bytes(self, entry: TensorEntry) -> bytes:
        return self.payload[entry.offset: entry.offset + entry.length]

    def tensor_array(self, entry: TensorEntry) -> np.ndarray:
        raw = self.tensor_bytes(entry)
        if entry.dtype == DTYPE_FP32:
            return np.frombuffer(raw, dtype="<f4").reshape(entry.shape).copy()
        if entry.dtype == DTYPE_INT8:
            return np.frombuffer(raw, dtype="<i1").reshape(entry.shape).copy()
        raise CheckpointError(f"tensor {entry.name!r} is packed; use ternary_weight()")

    def ternary_weight(self, entry: TensorEntry) -> TernaryWeight:
        mode = _TRIT_DTYPES.get(entry.dtype)
        if mode is None:
            raise CheckpointError(f"tensor {entry.name!r} is not a packed ternary tensor")
        if entry.scale is None:
            raise CheckpointError(f"packed tensor {entry.name!r} is missing its scale")
        packed = np.frombuffer(self.tensor_bytes(entry), dtype=np.uint8)
        return TernaryWeight(entry.shape, packed, entry.scale, mode)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["model_config"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.header["train_config"])

    @property
    def step(self) -> int:
        return self.header["step"]

    @property
    def variant(self) -> str:
        return self.header["variant"]

    # -- file io ---------------------------------------------------------------

    def save(self, path):
        header_bytes = json.dumps(self.header, indent=2, sort_keys=True).encode("utf-8")
        blob = b"".join([
            MAGIC,
            str(len(header_bytes)).encode("ascii") + b"\n",
            header_bytes,
            b"\n",
            self.payload,
        ])
        directory = os.path.dirname(os.path.abspath(path)) or "."
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if not blob.startswith(MAGIC):
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        rest = blob[len(MAGIC):]
        newline = rest.index(b"\n")
        try:
            header_len = int(rest[:newline])
        except ValueError:
            raise CheckpointError("corrupt header length field") from None
        header_start = newline + 1
        header_bytes = rest[header_start: header_start + header_len]
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header JSON: {exc}") from None
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"refusing checkpoint with format_version {version!r}; "
                f"this build reads version {FORMAT_VERSION}"
            )
        payload = rest[header_start + header_len + 1:]
        return cls(header, payload)


def _build(header_base: dict, tensors: list[tuple[str, str, tuple, bytes, float | None]]) -> Checkpoint:
    entries = []
    chunks = []
    offset = 0
    for name, dtype, shape, raw, scale in tensors:
        entries.append(
            TensorEntry(name=name, dtype=dtype, shape=shape, offset=offset,
                        length=len(raw), scale=scale).to_dict()
        )
        chunks.append(raw)
        offset += len(raw)
    header = dict(header_base)
    header["tensors"] = entries
    return Checkpoint(header, b"".join(chunks))


def _blas_thread_hint() -> int:
    # forward determinism holds per thread count; record what was in effect
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        value = os.environ.get(var)
        if value and value.isdigit():
            return int(value)
    return os.cpu_count() or 1


def _header_base(model_cfg: ModelConfig, train_cfg: TrainConfig, step: int,
                 variant: str, packing: PackingMode | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "variant": variant,
        "step": step,
        "mode": model_cfg.mode.value,
        "packing": packing.value if packing is not None else None,
        "blas_threads": _blas_thread_hint(),
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
    }


def backbone_weight_names(model: Model) -> set[str]:
    return {f"{prefix}.weight" for prefix in model.bit_linears()}


def save_model(path, model: Model, train_cfg: TrainConfig, step: int) -> Checkpoint:
    """Write a full-precision training checkpoint."""
    tensors = []
    for name, p in model.parameters().items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append((name, DTYPE_FP32, p.data.shape, raw, None))
    ckpt = _build(_header_base(model.config, train_cfg, step, "train"), tensors)
    ckpt.save(path)
    return ckpt


def export_ternary(path_in, path_out, packing: PackingMode = PackingMode.TWO_BIT) -> Checkpoint:
    """Freeze a training checkpoint for integer-path inference.

    Backbone latent weights become packed trits plus one scale each; gate
    parameters are replaced by their tanh values under a `_value` suffix.
    Everything else (norms, correction matrices, embeddings, head) stays
    FP32.
    """
    ckpt = Checkpoint.load(path_in)
    if ckpt.variant != "train":
        raise CheckpointError("export requires a full-precision training checkpoint")
    model, train_cfg, step = load_model_checkpoint(ckpt)
    backbone = backbone_weight_names(model)
    if not backbone:
        raise ConfigError(f"mode '{model.config.mode.value}' has no ternary backbone to export")
    dtype_tag = _PACKING_DTYPES[packing]
    tensors = []
    for name, p in model.parameters().items():
        if name in backbone:
            tw = quantize_weights(p.data.astype(np.float32), packing)
            assert tw.packed.nbytes == packed_length(tw.count, packing)
            tensors.append((name, dtype_tag, tw.shape, tw.packed.tobytes(), tw.scale))
        elif "gate" in name:
            value = np.tanh(p.data.astype(np.float32))
            raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
            tensors.append((f"{name}_value", DTYPE_FP32, value.shape, raw, None))
        else:
            raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            tensors.append((name, DTYPE_FP32, p.data.shape, raw, None))
    out = _build(_header_base(model.config, train_cfg, step, "ternary", packing), tensors)
    out.save(path_out)
    return out


def load_model_checkpoint(source) -> tuple[Model, TrainConfig, int]:
    """Rebuild a model from a checkpoint path or object.

    Training checkpoints restore every FP32 parameter; ternary
    checkpoints build an inference-only model with packed backbones and
    frozen gate values.
    """
    ckpt = source if isinstance(source, Checkpoint) else Checkpoint.load(source)
    model_cfg = ckpt.model_config
    train_cfg = ckpt.train_config

    if ckpt.variant == "train":
        model = Model(model_cfg, seed=train_cfg.seed)
        params = model.parameters()
        seen = set()
        for entry in ckpt.entries:
            if entry.name not in params:
                raise CheckpointError(f"checkpoint tensor {entry.name!r} has no model slot")
            arr = ckpt.tensor_array(entry)
            if arr.shape != params[entry.name].data.shape:
                raise CheckpointError(f"shape mismatch for {entry.name!r}")
            params[entry.name].data = arr.astype(np.float32)
            seen.add(entry.name)
        missing = set(params) - seen
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:4]}")
        return model, train_cfg, ckpt.step

    if ckpt.variant != "ternary":
        raise CheckpointError(f"unknown checkpoint variant {ckpt.variant!r}")

    model = Model(model_cfg, seed=train_cfg.seed, inference_only=True)
    params = model.parameters()
    bit_layers = model.bit_linears()
    dual_layers = model.dual_path_layers()
    seen = set()
    for entry in ckpt.entries:
        if entry.dtype in _TRIT_DTYPES:
            prefix = entry.name.removesuffix(".weight")
            layer = bit_layers.get(prefix)
            if layer is None:
                raise CheckpointError(f"packed tensor {entry.name!r} has no quantized layer")
            layer.load_frozen(ckpt.ternary_weight(entry))
            continue
        arr = ckpt.tensor_array(entry)
        if entry.name.endswith("_value") and "gate" in entry.name:
            base = entry.name.removesuffix("_value")
            if base.endswith(".gate") and base.removesuffix(".gate") in dual_layers:
                dual_layers[base.removesuffix(".gate")].frozen_gate = arr
            else:
                prefix, _, gate_name = base.rpartition(".")
                attn = _find_attention(model, prefix)
                attn.frozen_gates[gate_name] = arr
            continue
        if entry.name not in params:
            raise CheckpointError(f"checkpoint tensor {entry.name!r} has no model slot")
        params[entry.name].data = arr.astype(np.float32)
        seen.add(entry.name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:4]}")
    for prefix, layer in bit_layers.items():
        if layer.frozen is None:
            raise CheckpointError(f"quantized layer {prefix!r} has no packed weight")
    return model, train_cfg, ckpt.step


def _find_attention(model: Model, prefix: str) -> DiffAttention:
    for i, block in enumerate(model.blocks):
        if prefix == f"layers.{i}.attn" and isinstance(block.attn, DiffAttention):
            return block.attn
    raise CheckpointError(f"no attention block at {prefix!r}")
