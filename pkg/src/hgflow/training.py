"""Training protocol: dual-learning-rate AdamW, the gate schedule
(warmup, regularization ramp, freeze), gradient accumulation, metrics,
and the finite-difference gradient verification harness.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import Mode, ModelConfig, TrainConfig
from .data import Corpus, batch_stream, validation_batches
from .errors import ContractError, TrainingDiverged
from .layers import Model
from .tensor import Tensor, backward


def reg_weight(step: int, cfg: TrainConfig) -> float:
    """Gate regularization weight at a training step.

    Zero during warmup, a linear ramp to reg_max on
    [reg_start, gate_freeze), and zero again once gates are frozen.
    """
    if step < 0:
        raise ContractError("step must be >= 0")
    if step < cfg.reg_start or step >= cfg.gate_freeze:
        return 0.0
    return cfg.reg_max * (step - cfg.reg_start) / (cfg.gate_freeze - cfg.reg_start)


class AdamW:
    """Decoupled-weight-decay Adam with per-group learning rates.

    Parameters whose requires_grad was cleared (frozen gates) are skipped
    entirely, so neither their values nor their moment estimates move.
    """

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        # groups: list of {"params": {name: Tensor}, "lr": float}
        self.groups = groups
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}
        seen: set[str] = set()
        for group in groups:
            for name, p in group["params"].items():
                if name in seen:
                    raise ContractError(f"parameter {name!r} appears in more than one group")
                seen.add(name)
                self.state[name] = {
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                    "t": 0,
                }

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"].values():
                p.zero_grad()

    def step(self):
        for group in self.groups:
            lr = group["lr"]
            for name, p in group["params"].items():
                if not p.requires_grad:
                    continue
                g = p.grad
                st = self.state[name]
                st["t"] += 1
                t = st["t"]
                st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
                st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
                m_hat = st["m"] / (1.0 - self.beta1 ** t)
                v_hat = st["v"] / (1.0 - self.beta2 ** t)
                update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
                p.data = p.data - (lr * update).astype(p.data.dtype)


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    reg_weight: float
    gate_mean: float
    val_loss: float | None = None
    wall_time: float = 0.0

    def to_json_line(self) -> str:
        # wall_time deliberately stays out of the wire format so that
        # identical runs emit byte-identical streams.
        payload = {
            "step": self.step,
            "train_loss": self.train_loss,
            "reg_weight": self.reg_weight,
            "gate_mean": self.gate_mean,
        }
        if self.val_loss is not None:
            payload["val_loss"] = self.val_loss
        return json.dumps(payload)

    def numeric_fields(self) -> tuple:
        return (self.step, self.train_loss, self.reg_weight, self.gate_mean, self.val_loss)


def make_optimizer(model: Model, cfg: TrainConfig) -> AdamW:
    groups = model.param_groups()
    return AdamW(
        [
            {"params": groups["main"], "lr": cfg.lr_main},
            {"params": groups["gate"], "lr": cfg.lr_gate},
        ],
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )


def _nonfinite_groups(model: Model) -> list[str]:
    bad = []
    for group_name, params in model.param_groups().items():
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad.append(f"{group_name}:{name}")
    return bad


def evaluate(model: Model, batches, n_batches: int | None = None) -> float:
    """Mean cross-entropy over held-out batches. Pure given batch order."""
    batches = list(batches)
    if n_batches is not None:
        batches = batches[:n_batches]
    if not batches:
        raise ContractError("evaluate requires a non-empty validation stream")
    losses = []
    with T.no_grad():
        for inputs, targets in batches:
            _, loss = model.forward(inputs, targets)
            losses.append(loss.item())
    return float(np.mean(losses))


class Trainer:
    """Sequential training loop over a byte corpus.

    Per step: accumulate gradients over `accumulation_steps` micro
    batches of (task + reg_weight * gate_penalty) / accumulation_steps,
    then apply one AdamW update with the main/gate learning-rate split.
    At `gate_freeze` the gates become non-trainable before the update.
    """

    def __init__(self, model: Model, corpus: Corpus, cfg: TrainConfig,
                 metrics_path=None, checkpoint_path=None):
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.metrics_path = metrics_path
        self.checkpoint_path = checkpoint_path
        self.optimizer = make_optimizer(model, cfg)
        self.records: list[MetricsRecord] = []
        self._val_batches = None

    def _validation_set(self):
        if self._val_batches is None:
            self._val_batches = validation_batches(
                self.corpus.val_ids, self.model.config.ctx_len,
                self.cfg.micro_batch, self.cfg.eval_batches,
            )
        return self._val_batches

    def _nonfinite_value_groups(self) -> list[str]:
        bad = []
        for group_name, params in self.model.param_groups().items():
            for name, p in params.items():
                if not np.all(np.isfinite(p.data)):
                    bad.append(f"{group_name}:{name}")
        return bad

    def train_step(self, step: int) -> MetricsRecord:
        cfg = self.cfg
        model = self.model
        if step == cfg.gate_freeze and not model.gates_frozen:
            model.freeze_gates()
        started = time.perf_counter()
        self.optimizer.zero_grad()
        weight = reg_weight(step, cfg)
        task_losses = []
        try:
            for micro in range(cfg.accumulation_steps):
                inputs, targets = batch_stream(
                    self.corpus.train_ids, model.config.ctx_len, cfg.micro_batch,
                    cfg.seed, step * cfg.accumulation_steps + micro,
                )
                _, task_loss = model.forward(inputs, targets)
                loss = task_loss
                if weight > 0.0:
                    penalty = model.gate_penalty()
                    if penalty is not None:
                        loss = T.add(loss, T.scale(penalty, weight))
                backward(T.scale(loss, 1.0 / cfg.accumulation_steps))
                task_losses.append(task_loss.item())
        except ContractError as exc:
            # a quantizer or tensor constructor saw non-finite values
            bad = self._nonfinite_value_groups()
            raise TrainingDiverged(
                f"non-finite values during forward at step {step} "
                f"(parameter groups: {bad or 'activations only'}): {exc}"
            ) from exc
        mean_task = float(np.mean(task_losses))
        if not np.isfinite(mean_task):
            bad = _nonfinite_groups(model)
            raise TrainingDiverged(
                f"non-finite loss at step {step}; non-finite gradients in: {bad or 'none found'}"
            )
        bad = _nonfinite_groups(model)
        if bad:
            raise TrainingDiverged(f"non-finite gradients at step {step} in: {bad}")
        self.optimizer.step()
        record = MetricsRecord(
            step=step,
            train_loss=mean_task,
            reg_weight=weight,
            gate_mean=self.model.gate_mean(),
            wall_time=time.perf_counter() - started,
        )
        if cfg.eval_interval > 0 and (step + 1) % cfg.eval_interval == 0:
            record.val_loss = evaluate(model, self._validation_set())
        return record

    def run(self) -> list[MetricsRecord]:
        metrics_fh = open(self.metrics_path, "w", encoding="utf-8") if self.metrics_path else None
        try:
            for step in range(self.cfg.total_steps):
                record = self.train_step(step)
                self.records.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(record.to_json_line() + "\n")
                    metrics_fh.flush()
                if (
                    self.checkpoint_path
                    and self.cfg.checkpoint_interval > 0
                    and (step + 1) % self.cfg.checkpoint_interval == 0
                ):
                    self._save(step + 1, suffix=f".step{step + 1:06d}")
            if self.checkpoint_path:
                self._save(self.cfg.total_steps)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return self.records

    def _save(self, step: int, suffix: str = ""):
        from .checkpoint import save_model  # local import to avoid a cycle

        path = str(self.checkpoint_path)
        if suffix:
            if path.endswith(".ckpt"):
                path = path[: -len(".ckpt")] + suffix + ".ckpt"
            else:
                path = path + suffix
        save_model(path, self.model, self.cfg, step)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification.

#: groups whose finite differences legitimately disagree with the
#: straight-through analytic gradients near quantization plateaus
STE_GROUPS = {"backbone"}


def classify_param(name: str) -> str:
    if "lora_down" in name:
        return "lora_down"
    if "lora_up" in name:
        return "lora_up"
    if "gate" in name:
        return "gate"
    if name.endswith(".lam"):
        return "lam"
    if "norm" in name:
        return "layernorm"
    if "embedding" in name:
        return "embedding"
    return "weight"


@dataclass
class GradCheckEntry:
    name: str
    group: str
    max_rel_err: float
    informational: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    def group_errors(self, informational: bool = False) -> dict[str, float]:
        """Max relative error per group, split by informational status."""
        out: dict[str, float] = {}
        for e in self.entries:
            if e.informational != informational:
                continue
            out[e.group] = max(out.get(e.group, 0.0), e.max_rel_err)
        return out

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [
            e for e in self.entries
            if not e.informational and e.max_rel_err > self.tolerance
        ]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        checked = self.group_errors(informational=False)
        info = self.group_errors(informational=True)
        groups = {
            group: {
                "max_rel_err": checked.get(group),
                "informational_max_rel_err": info.get(group),
            }
            for group in sorted(set(checked) | set(info))
        }
        return json.dumps(
            {
                "tolerance": self.tolerance,
                "ok": self.ok,
                "groups": groups,
                "failures": [e.name for e in self.failures],
            },
            indent=2,
        )


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    err = 0.0
    for a, n in zip(analytic.reshape(-1), numeric.reshape(-1)):
        denom = max(abs(a), abs(n))
        if denom < 1e-8:
            continue
        err = max(err, abs(a - n) / denom)
    return err


def gradcheck_params(loss_fn, params: dict[str, Tensor], informational=(),
                     tolerance: float = 1e-3, h: float = 1e-3,
                     group_overrides: dict[str, str] | None = None) -> GradCheckReport:
    """Core checker: analytic gradients of loss_fn versus central finite
    differences, perturbing every element of every listed parameter.

    Meant for float64 probes small enough (d <= 16) that the element loop
    is cheap. Only parameters with a rounding-free path to the loss are
    meaningful to check; anything routed through a quantizer belongs in
    `informational` because the loss surface is piecewise constant there,
    which is exactly what the straight-through rule ignores.
    """
    informational = set(informational)
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with T.no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = loss_fn().item()
                flat[i] = keep - h
                down = loss_fn().item()
                flat[i] = keep
                num_flat[i] = (up - down) / (2.0 * h)
        group = (group_overrides or {}).get(name, classify_param(name))
        report.entries.append(
            GradCheckEntry(
                name=name,
                group=group,
                max_rel_err=_relative_error(analytic[name], numeric),
                informational=name in informational,
            )
        )
    return report


def gradcheck_dual_path_slice(tolerance: float = 1e-3, h: float = 1e-3,
                              seed: int = 7) -> GradCheckReport:
    """FD check on one gated quantized layer with a loss linear in its
    output: the correction matrices and the gate are smooth, while the
    straight-through latent weight and the input norm are informational.
    """
    from .layers import build_probe_dual_path

    layer, store = build_probe_dual_path(8, 6, 2, seed=seed, dtype=np.float64,
                                         scalar_gate=False)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.normal(size=(3, 8)), dtype=np.float64)
    c = Tensor(rng.normal(size=(3, 6)), dtype=np.float64)

    def loss_fn():
        return T.sum_all(T.mul(layer(x), c))

    informational = {n for n in store.params
                     if n.endswith(".weight") or ".norm." in n}
    overrides = {n: "backbone" for n in store.params if n.endswith(".weight")}
    return gradcheck_params(loss_fn, store.params, informational,
                            tolerance=tolerance, h=h, group_overrides=overrides)


def gradcheck_dense_model(tolerance: float = 1e-3, h: float = 1e-3,
                          seed: int = 7) -> GradCheckReport:
    """FD check of every parameter of a tiny dense differential model.

    With no quantizer anywhere the whole loss surface is smooth, which is
    what makes lam, layernorms, embeddings, and dense weights checkable
    end to end.
    """
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, vocab_size=13,
                      ctx_len=6, lora_rank=2, mode=Mode.DIFF_ONLY)
    model = Model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 2)
    inputs = rng.integers(0, cfg.vocab_size, size=(2, 5))
    targets = rng.integers(0, cfg.vocab_size, size=(2, 5))

    def loss_fn():
        return model.forward(inputs, targets)[1]

    return gradcheck_params(loss_fn, model.parameters(), tolerance=tolerance, h=h)


def standard_gradcheck(tolerance: float = 1e-3, h: float = 1e-3,
                       seed: int = 7) -> GradCheckReport:
    """The shipped verification battery: the quantized layer slice plus
    the dense model, merged into one report.
    """
    report = GradCheckReport(tolerance=tolerance)
    report.entries.extend(gradcheck_dual_path_slice(tolerance, h, seed).entries)
    report.entries.extend(gradcheck_dense_model(tolerance, h, seed).entries)
    return report


def attention_logit_gradient_variance(mode: Mode, seeds, d_model: int = 16,
                                      n_heads: int = 2, length: int = 8) -> float:
    """Variance of attention-logit gradients across seeded layer draws.

    Measurement only: the claimed variance reduction from quantized
    projections rests on population assumptions this harness does not
    assert. It reports the mean elementwise variance of dL/d(logits)
    over the given seeds for one standalone attention block.
    """
    from .layers import DiffAttention, ParamStore

    if mode not in {Mode.BITNET, Mode.DIFF_ONLY, Mode.HGF_FULL, Mode.HGF_QK_ONLY}:
        raise ContractError("logit-gradient variance is defined for differential modes")
    samples = []
    for seed in seeds:
        cfg = ModelConfig(d_model=d_model, n_layers=1, n_heads=n_heads,
                          vocab_size=32, ctx_len=length,
                          lora_rank=max(1, d_model // 4), mode=mode)
        store = ParamStore(int(seed), dtype=np.float32)
        attn = DiffAttention(store, "attn", cfg)
        attn.score_probes = []
        rng = np.random.default_rng(int(seed))
        x = Tensor(rng.normal(size=(2, length, d_model)).astype(np.float32))
        c = Tensor(rng.normal(size=(2, length, d_model)).astype(np.float32))
        backward(T.sum_all(T.mul(attn(x), c)))
        samples.append(np.concatenate([p.grad.reshape(-1) for p in attn.score_probes]))
    stacked = np.stack(samples)
    return float(np.mean(np.var(stacked.astype(np.float64), axis=0)))
