"""Model building blocks: quantized linear layers, the gated dual-path
linear, differential attention, the SwiGLU block, and full model
assembly for every architecture mode.

Parameter initialization is keyed by (seed, parameter name), so two
models that share a parameter name initialize that tensor identically
regardless of mode. That is what makes the quantized-backbone modes
bit-exact subsets of the gated modes when the correction paths are
zeroed out.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import tensor as T
from .config import (
    DIFF_ATTENTION_MODES,
    GATED_MODES,
    QUANTIZED_MODES,
    Mode,
    ModelConfig,
    mlp_hidden_dim,
)
from .errors import ContextLengthError, ContractError, ShapeError
from .quant import TernaryWeight, ste_linear, ternary_forward
from .tensor import Tensor

GATE_INIT = 0.1
LORA_UP_STD = 1e-3


def lambda_init(head_dim: int) -> float:
    """Differential-attention mixing scalar at initialization."""
    return 0.8 - 0.6 * math.exp(-0.3 * head_dim)


def _name_seed(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_uniform_fan_in(fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


def init_normal(std: float):
    return lambda rng, shape: rng.normal(0.0, std, size=shape)


def init_constant(value: float):
    return lambda rng, shape: np.full(shape, value)


class ParamStore:
    """Ordered name -> Tensor registry with name-keyed deterministic init."""

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, init) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        data = np.asarray(init(_name_seed(self.seed, name), shape), dtype=self.dtype)
        t = Tensor(data, requires_grad=True, dtype=self.dtype, name=name)
        self.params[name] = t
        return t


class DenseLinear:
    """Plain full-precision linear layer, no bias."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int):
        self.weight = store.add(f"{prefix}.weight", (d_out, d_in), init_uniform_fan_in(d_in))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.weight, (1, 0)))


class BitLinear:
    """Quantized linear layer: input layernorm, then a ternary matmul.

    During training the matmul runs on the fake-quantized grid with
    straight-through gradients. After export the latent weight is gone
    and the layer evaluates the packed integer path instead.
    """

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int,
                 inference_only: bool = False):
        self.d_in = d_in
        self.d_out = d_out
        self.prefix = prefix
        self.norm_gain = store.add(f"{prefix}.norm.gain", (d_in,), init_constant(1.0))
        self.norm_bias = store.add(f"{prefix}.norm.bias", (d_in,), init_constant(0.0))
        self.weight = None
        self.frozen: TernaryWeight | None = None
        if not inference_only:
            self.weight = store.add(f"{prefix}.weight", (d_out, d_in), init_uniform_fan_in(d_in))

    def load_frozen(self, tw: TernaryWeight):
        if tw.shape != (self.d_out, self.d_in):
            raise ShapeError(f"packed weight shape {tw.shape} does not match layer {self.prefix}")
        self.frozen = tw

    def __call__(self, x: Tensor) -> Tensor:
        xn = T.layer_norm(x, self.norm_gain, self.norm_bias)
        if self.frozen is not None:
            return Tensor(ternary_forward(xn.data, self.frozen), dtype=x.data.dtype)
        return ste_linear(xn, self.weight)


class LoraPath:
    """Low-rank correction branch: down-project, SiLU, up-project.

    The up-projection starts as small Gaussian noise rather than zeros so
    the branch carries signal (and therefore gate gradient) from step 0.
    """

    def __init__(self, store: ParamStore, prefix: str, d_in: int, rank: int, d_out: int):
        self.down = store.add(f"{prefix}.lora_down", (d_in, rank), init_uniform_fan_in(d_in))
        self.up = store.add(f"{prefix}.lora_up", (rank, d_out), init_normal(LORA_UP_STD))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(T.silu(T.matmul(x, self.down)), self.up)


class DualPathLinear:
    """Ternary backbone plus tanh-gated low-rank correction.

    y = BitLinear(x) + tanh(gate) * (SiLU(x @ A) @ B)

    The gate is one value per output feature (or a single scalar in probe
    mode, which is what the closed-form gate-gradient checks use).
    """

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int, rank: int,
                 scalar_gate: bool = False, inference_only: bool = False):
        if not (1 <= rank < min(d_in, d_out)):
            raise ContractError(f"lora rank must satisfy 1 <= r < min({d_in}, {d_out})")
        self.backbone = BitLinear(store, prefix, d_in, d_out, inference_only=inference_only)
        self.lora = LoraPath(store, prefix, d_in, rank, d_out)
        self.gate = None
        self.frozen_gate: np.ndarray | None = None
        if not inference_only:
            gate_shape = (1,) if scalar_gate else (d_out,)
            self.gate = store.add(f"{prefix}.gate", gate_shape, init_constant(GATE_INIT))

    def gate_value(self) -> Tensor:
        if self.frozen_gate is not None:
            return Tensor(self.frozen_gate)
        return T.tanh(self.gate)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(self.backbone(x), T.mul(self.gate_value(), self.lora(x)))


_MASK_CACHE: dict[tuple, np.ndarray] = {}
_MASK_FILL = -1e9  # finite stand-in for -inf; exp underflows to exactly 0


def causal_mask(length: int, dtype) -> np.ndarray:
    key = (length, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.triu(np.full((length, length), _MASK_FILL, dtype=dtype), k=1)
        mask = mask.reshape(1, 1, length, length)
        _MASK_CACHE[key] = mask
    return mask


def _masked_attention(q: Tensor, k: Tensor, v: Tensor, head_dim: int,
                      probes: list | None = None) -> Tensor:
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    if probes is not None:
        probes.append(scores.retain_grad())
    scores = T.add(scores, Tensor(causal_mask(q.data.shape[2], q.data.dtype)))
    return T.matmul(T.softmax(scores, axis=-1), v)


class DiffAttention:
    """Differential attention with optional gated low-rank projections.

    Q and K project to width d and split into two groups of n_heads; V
    projects to width d/2. The output is 0.5 * (attn1 - lam * attn2),
    with one learnable lam per attention block.
    """

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig,
                 inference_only: bool = False):
        d = cfg.d_model
        if d % (2 * cfg.n_heads) != 0:
            raise ShapeError("d_model must be divisible by 2 * n_heads")
        self.n_heads = cfg.n_heads
        self.sub_head_dim = d // (2 * cfg.n_heads)
        self.quantized = cfg.mode in QUANTIZED_MODES
        self.gated_qk = cfg.mode in GATED_MODES
        self.gated_v = cfg.mode is Mode.HGF_FULL

        linear = BitLinear if self.quantized else DenseLinear
        kwargs = {"inference_only": inference_only} if self.quantized else {}
        self.q_proj = linear(store, f"{prefix}.q", d, d, **kwargs)
        self.k_proj = linear(store, f"{prefix}.k", d, d, **kwargs)
        self.v_proj = linear(store, f"{prefix}.v", d, d // 2, **kwargs)
        self.o_proj = linear(store, f"{prefix}.o", d // 2, d, **kwargs)

        self.q_lora = self.k_lora = self.v_lora = None
        self.gate_q = self.gate_k = self.gate_v = None
        self.frozen_gates: dict[str, np.ndarray] = {}
        if self.gated_qk:
            r = cfg.lora_rank
            self.q_lora = LoraPath(store, f"{prefix}.q", d, r, d)
            self.k_lora = LoraPath(store, f"{prefix}.k", d, r, d)
            if not inference_only:
                self.gate_q = store.add(f"{prefix}.gate_q", (cfg.n_heads,), init_constant(GATE_INIT))
                self.gate_k = store.add(f"{prefix}.gate_k", (cfg.n_heads,), init_constant(GATE_INIT))
            if self.gated_v:
                self.v_lora = LoraPath(store, f"{prefix}.v", d, r, d // 2)
                if not inference_only:
                    self.gate_v = store.add(f"{prefix}.gate_v", (cfg.n_heads,), init_constant(GATE_INIT))

        self.lam = store.add(f"{prefix}.lam", (), init_constant(lambda_init(cfg.head_dim)))
        # when set, forward keeps the pre-mask attention logits and their
        # gradients here (variance measurement harness)
        self.score_probes: list[Tensor] | None = None

    def _gate(self, name: str, param) -> Tensor:
        if name in self.frozen_gates:
            return Tensor(self.frozen_gates[name])
        return T.tanh(param)

    def _split_heads(self, t: Tensor, n: int) -> Tensor:
        b, length, width = t.data.shape
        return T.transpose(T.reshape(t, (b, length, n, width // n)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, length, d = x.data.shape
        h = self.n_heads
        qh = self._split_heads(self.q_proj(x), 2 * h)
        kh = self._split_heads(self.k_proj(x), 2 * h)
        vh = self._split_heads(self.v_proj(x), h)

        if self.gated_qk:
            qh = self._add_gated_pairwise(qh, self.q_lora(x), self._gate("gate_q", self.gate_q))
            kh = self._add_gated_pairwise(kh, self.k_lora(x), self._gate("gate_k", self.gate_k))
        if self.gated_v:
            gate = T.reshape(self._gate("gate_v", self.gate_v), (h, 1, 1))
            vh = T.add(vh, T.mul(gate, self._split_heads(self.v_lora(x), h)))

        q1, q2 = T.narrow(qh, 1, 0, h), T.narrow(qh, 1, h, 2 * h)
        k1, k2 = T.narrow(kh, 1, 0, h), T.narrow(kh, 1, h, 2 * h)
        if self.score_probes is not None:
            self.score_probes.clear()
        a1 = _masked_attention(q1, k1, vh, self.sub_head_dim, self.score_probes)
        a2 = _masked_attention(q2, k2, vh, self.sub_head_dim, self.score_probes)
        out = T.scale(T.sub(a1, T.mul(self.lam, a2)), 0.5)
        merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, length, d // 2))
        return self.o_proj(merged)

    def _add_gated_pairwise(self, heads: Tensor, lora_out: Tensor, gate: Tensor) -> Tensor:
        """Apply per-head gates to 2*n_heads projections, pairing sub-heads.

        Head pair (2j, 2j+1) shares gate j, matching a pairwise repeat of
        the gate vector onto the doubled head axis.
        """
        b, two_h, length, sub = heads.data.shape
        h = two_h // 2
        lo = self._split_heads(lora_out, two_h)
        paired = T.reshape(lo, (b, h, 2, length, sub))
        gated = T.mul(T.reshape(gate, (h, 1, 1, 1)), paired)
        return T.add(heads, T.reshape(gated, (b, two_h, length, sub)))


class StandardAttention:
    """Conventional causal multi-head attention (full-precision baseline)."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig):
        d = cfg.d_model
        if d % cfg.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.q_proj = DenseLinear(store, f"{prefix}.q", d, d)
        self.k_proj = DenseLinear(store, f"{prefix}.k", d, d)
        self.v_proj = DenseLinear(store, f"{prefix}.v", d, d)
        self.o_proj = DenseLinear(store, f"{prefix}.o", d, d)

    def _split_heads(self, t: Tensor) -> Tensor:
        b, length, width = t.data.shape
        return T.transpose(T.reshape(t, (b, length, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, length, d = x.data.shape
        q = self._split_heads(self.q_proj(x))
        k = self._split_heads(self.k_proj(x))
        v = self._split_heads(self.v_proj(x))
        out = _masked_attention(q, k, v, self.head_dim)
        merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, length, d))
        return self.o_proj(merged)


class SwiGLUBlock:
    """Gated MLP: w3(SiLU(w1(x)) * w2(x)) with mode-dependent linear kind."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig,
                 inference_only: bool = False):
        d = cfg.d_model
        h = mlp_hidden_dim(d)
        self.hidden_dim = h
        if cfg.mode in GATED_MODES:
            def make(name, d_in, d_out):
                return DualPathLinear(store, f"{prefix}.{name}", d_in, d_out, cfg.lora_rank,
                                      inference_only=inference_only)
        elif cfg.mode in QUANTIZED_MODES:
            def make(name, d_in, d_out):
                return BitLinear(store, f"{prefix}.{name}", d_in, d_out,
                                 inference_only=inference_only)
        else:
            def make(name, d_in, d_out):
                return DenseLinear(store, f"{prefix}.{name}", d_in, d_out)
        self.w1 = make("w1", d, h)
        self.w2 = make("w2", d, h)
        self.w3 = make("w3", h, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w3(T.mul(T.silu(self.w1(x)), self.w2(x)))


class Block:
    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig,
                 inference_only: bool = False):
        d = cfg.d_model
        self.norm1_gain = store.add(f"{prefix}.norm1.gain", (d,), init_constant(1.0))
        self.norm1_bias = store.add(f"{prefix}.norm1.bias", (d,), init_constant(0.0))
        self.norm2_gain = store.add(f"{prefix}.norm2.gain", (d,), init_constant(1.0))
        self.norm2_bias = store.add(f"{prefix}.norm2.bias", (d,), init_constant(0.0))
        if cfg.mode in DIFF_ATTENTION_MODES:
            self.attn = DiffAttention(store, f"{prefix}.attn", cfg, inference_only=inference_only)
        else:
            self.attn = StandardAttention(store, f"{prefix}.attn", cfg)
        self.mlp = SwiGLUBlock(store, f"{prefix}.mlp", cfg, inference_only=inference_only)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(T.layer_norm(x, self.norm1_gain, self.norm1_bias)))
        return T.add(x, self.mlp(T.layer_norm(x, self.norm2_gain, self.norm2_bias)))


class Model:
    """Decoder-only language model with pre-norm residual blocks."""

    def __init__(self, cfg: ModelConfig, seed: int = 42, dtype=np.float32,
                 inference_only: bool = False):
        cfg.validate()
        self.config = cfg
        self.seed = seed
        self.inference_only = inference_only
        self.gates_frozen = False
        store = ParamStore(seed, dtype=dtype)
        self.store = store
        self.embedding = store.add("embedding.weight", (cfg.vocab_size, cfg.d_model),
                                   init_normal(1.0))
        self.pos_embedding = store.add("pos_embedding.weight", (cfg.ctx_len, cfg.d_model),
                                       init_normal(1.0))
        self.blocks = [
            Block(store, f"layers.{i}", cfg, inference_only=inference_only)
            for i in range(cfg.n_layers)
        ]
        self.final_norm_gain = store.add("final_norm.gain", (cfg.d_model,), init_constant(1.0))
        self.final_norm_bias = store.add("final_norm.bias", (cfg.d_model,), init_constant(0.0))
        self.head = DenseLinear(store, "head", cfg.d_model, cfg.vocab_size)

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.store.params

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        """Disjoint main/gate split used for the dual learning rates."""
        groups = {"main": {}, "gate": {}}
        for name, p in self.store.params.items():
            groups["gate" if "gate" in name else "main"][name] = p
        return groups

    def zero_grad(self):
        for p in self.store.params.values():
            p.zero_grad()

    def freeze_gates(self):
        for name, p in self.param_groups()["gate"].items():
            p.requires_grad = False
        self.gates_frozen = True

    # -- gate statistics ----------------------------------------------------

    def _gate_value_tensors(self) -> list[Tensor]:
        values = []
        for block in self.blocks:
            attn = block.attn
            if isinstance(attn, DiffAttention):
                if attn.gated_qk:
                    values.append(attn._gate("gate_q", attn.gate_q))
                    values.append(attn._gate("gate_k", attn.gate_k))
                if attn.gated_v:
                    values.append(attn._gate("gate_v", attn.gate_v))
            for layer in (block.mlp.w1, block.mlp.w2, block.mlp.w3):
                if isinstance(layer, DualPathLinear):
                    values.append(layer.gate_value())
        return values

    def gate_penalty(self) -> Tensor | None:
        """Mean absolute gate value, averaged per gate tensor, on the tape."""
        values = self._gate_value_tensors()
        if not values:
            return None
        total = None
        for v in values:
            term = T.mean_all(T.absolute(v))
            total = term if total is None else T.add(total, term)
        return T.scale(total, 1.0 / len(values))

    def gate_mean(self) -> float:
        with T.no_grad():
            penalty = self.gate_penalty()
        return 0.0 if penalty is None else penalty.item()

    # -- forward ------------------------------------------------------------

    def forward(self, ids: np.ndarray, targets: np.ndarray | None = None):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"token ids must be 2D [batch, length], got {ids.shape}")
        length = ids.shape[1]
        if length > self.config.ctx_len:
            raise ContextLengthError(
                f"sequence length {length} exceeds context window {self.config.ctx_len}"
            )
        x = T.add(
            T.embedding(self.embedding, ids),
            T.embedding(self.pos_embedding, np.arange(length)),
        )
        for block in self.blocks:
            x = block(x)
        x = T.layer_norm(x, self.final_norm_gain, self.final_norm_bias)
        logits = self.head(x)
        loss = None
        if targets is not None:
            loss = T.cross_entropy(logits, np.asarray(targets))
        return logits, loss

    # -- quantized layer enumeration (export / audits) ----------------------

    def bit_linears(self) -> dict[str, BitLinear]:
        found: dict[str, BitLinear] = {}

        def visit(obj):
            if isinstance(obj, BitLinear):
                found[obj.prefix] = obj
            elif isinstance(obj, DualPathLinear):
                visit(obj.backbone)
            elif isinstance(obj, DiffAttention):
                for proj in (obj.q_proj, obj.k_proj, obj.v_proj, obj.o_proj):
                    visit(proj)
            elif isinstance(obj, SwiGLUBlock):
                for layer in (obj.w1, obj.w2, obj.w3):
                    visit(layer)
            elif isinstance(obj, Block):
                visit(obj.attn)
                visit(obj.mlp)

        for block in self.blocks:
            visit(block)
        return found

    def dual_path_layers(self) -> dict[str, DualPathLinear]:
        found = {}
        for i, block in enumerate(self.blocks):
            for name in ("w1", "w2", "w3"):
                layer = getattr(block.mlp, name)
                if isinstance(layer, DualPathLinear):
                    found[f"layers.{i}.mlp.{name}"] = layer
        return found


def gate_statistics(model: Model) -> float:
    """Mean absolute tanh-gate value; 0.0 for gateless modes."""
    return model.gate_mean()


def build_probe_dual_path(d_in: int, d_out: int, rank: int, seed: int = 0,
                          dtype=np.float64, scalar_gate: bool = True):
    """Standalone gated layer for gradient-law checks. Returns (layer, store)."""
    store = ParamStore(seed, dtype=dtype)
    layer = DualPathLinear(store, "probe", d_in, d_out, rank, scalar_gate=scalar_gate)
    return layer, store
