"""Model / training configuration and the flat key=value config format.

Config files contain one `field = value` pair per line, with `#`
comments. Keys mirror the dataclass field names exactly, so the file
format and the in-memory configs never drift apart.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError


class Mode(Enum):
    """Architecture variants covered by the experiment matrix."""

    BASELINE_FP = "baseline"
    BITNET = "bitnet"
    DIFF_ONLY = "diff-only"
    HGF_FULL = "hgf"
    HGF_QK_ONLY = "hgf-qk"

    @classmethod
    def from_token(cls, token: str) -> "Mode":
        for mode in cls:
            if mode.value == token:
                return mode
        valid = ", ".join(m.value for m in cls)
        raise ConfigError(f"unknown mode {token!r} (expected one of: {valid})")


#: modes whose attention is the two-softmax differential block
DIFF_ATTENTION_MODES = {Mode.BITNET, Mode.DIFF_ONLY, Mode.HGF_FULL, Mode.HGF_QK_ONLY}
#: modes with a ternary backbone (quantized linear layers)
QUANTIZED_MODES = {Mode.BITNET, Mode.HGF_FULL, Mode.HGF_QK_ONLY}
#: modes with gated low-rank correction paths
GATED_MODES = {Mode.HGF_FULL, Mode.HGF_QK_ONLY}


def mlp_hidden_dim(d_model: int) -> int:
    """SwiGLU hidden width: floor(2 * (4 * d) / 3)."""
    return (2 * (4 * d_model)) // 3


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 256
    ctx_len: int = 64
    lora_rank: int = 8
    mode: Mode = Mode.HGF_FULL

    def __post_init__(self):
        self.validate()

    def validate(self):
        for field in ("d_model", "n_layers", "n_heads", "vocab_size", "ctx_len", "lora_rank"):
            if getattr(self, field) < 1:
                raise ConfigError(f"field '{field}' must be positive")
        if self.mode in DIFF_ATTENTION_MODES:
            if self.d_model % (2 * self.n_heads) != 0:
                raise ConfigError(
                    "field 'd_model' must be divisible by 2 * n_heads for differential attention"
                )
        elif self.d_model % self.n_heads != 0:
            raise ConfigError("field 'd_model' must be divisible by n_heads")
        if self.mode in GATED_MODES:
            h = mlp_hidden_dim(self.d_model)
            if self.lora_rank >= min(self.d_model, h):
                raise ConfigError("field 'lora_rank' must be < min(d_model, mlp hidden dim)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mode"] = Mode.from_token(d["mode"])
        return cls(**d)


@dataclass
class TrainConfig:
    total_steps: int = 2500
    lr_main: float = 2.5e-3
    lr_gate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    accumulation_steps: int = 4
    micro_batch: int = 16
    reg_start: int = 500
    gate_freeze: int = 900
    reg_max: float = 0.02
    seed: int = 42
    val_fraction: float = 0.02
    eval_interval: int = 250
    eval_batches: int = 16
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_steps < 0:
            raise ConfigError("field 'total_steps' must be >= 0")
        if self.lr_main <= 0 or self.lr_gate <= 0:
            raise ConfigError("fields 'lr_main' and 'lr_gate' must be positive")
        if not (0 <= self.reg_start < self.gate_freeze):
            raise ConfigError("fields must satisfy 0 <= reg_start < gate_freeze")
        # total_steps == 0 is the vacuous smoke run; the schedule bound
        # only binds once there are steps to schedule.
        if self.total_steps > 0 and self.gate_freeze > self.total_steps:
            raise ConfigError("field 'gate_freeze' must be <= total_steps")
        if self.accumulation_steps < 1 or self.micro_batch < 1:
            raise ConfigError("fields 'accumulation_steps' and 'micro_batch' must be >= 1")
        if self.seed < 0:
            raise ConfigError("field 'seed' must be >= 0")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError("field 'val_fraction' must be in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    if key == "mode":
        return Mode.from_token(raw)
    target = _MODEL_FIELDS.get(key) or _TRAIN_FIELDS.get(key)
    try:
        if target == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        kind = "an integer" if target == "int" else "a number"
        raise ConfigError(f"field '{key}' expects {kind}, got {raw!r}") from None


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'field = value', got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in _MODEL_FIELDS:
            model_kw[key] = _parse_value(key, raw)
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _parse_value(key, raw)
        else:
            raise ConfigError(f"line {lineno}: unknown field '{key}'")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def parse_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


def format_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = []
    for cfg in (model_cfg, train_cfg):
        for field in dataclasses.fields(cfg):
            value = getattr(cfg, field.name)
            if isinstance(value, Mode):
                value = value.value
            lines.append(f"{field.name} = {value}")
    return "\n".join(lines) + "\n"
