import json
import math

import numpy as np
import pytest

from hgflow import tensor as T
from hgflow.config import Mode, ModelConfig, TrainConfig
from hgflow.data import Corpus, validation_batches
from hgflow.errors import ConfigError, ContractError, TrainingDiverged
from hgflow.layers import Model
from hgflow.tensor import Tensor, backward
from hgflow.training import (
    AdamW,
    MetricsRecord,
    Trainer,
    attention_logit_gradient_variance,
    evaluate,
    make_optimizer,
    reg_weight,
    standard_gradcheck,
)


def small_model_config(mode=Mode.HGF_FULL):
    return ModelConfig(d_model=16, n_layers=1, n_heads=2, vocab_size=256,
                       ctx_len=32, lora_rank=4, mode=mode)


def small_train_config(**overrides):
    base = dict(total_steps=12, micro_batch=4, accumulation_steps=2,
                reg_start=3, gate_freeze=8, eval_interval=6, eval_batches=2,
                seed=5)
    base.update(overrides)
    return TrainConfig(**base)


class TestRegSchedule:
    def test_branch_values(self):
        cfg = TrainConfig(total_steps=1000, reg_start=500, gate_freeze=900, reg_max=0.02)
        assert reg_weight(0, cfg) == 0.0
        assert reg_weight(499, cfg) == 0.0
        assert reg_weight(700, cfg) == pytest.approx(0.01)
        assert reg_weight(900, cfg) == 0.0
        assert reg_weight(1500, cfg) == 0.0

    def test_shape_properties(self):
        cfg = TrainConfig(total_steps=1000, reg_start=100, gate_freeze=400, reg_max=0.02)
        values = [reg_weight(t, cfg) for t in range(1000)]
        ramp = values[100:400]
        assert all(b >= a for a, b in zip(ramp, ramp[1:]))  # nondecreasing
        steps = [abs(b - a) for a, b in zip(ramp, ramp[1:])]
        assert max(steps) <= cfg.reg_max / (400 - 100) + 1e-12  # no jumps on the ramp
        assert all(v == 0.0 for v in values[:100])
        assert all(v == 0.0 for v in values[400:])
        assert reg_weight(100, cfg) == 0.0  # ramp starts exactly at zero

    def test_negative_step_rejected(self):
        with pytest.raises(ContractError):
            reg_weight(-1, TrainConfig())

    def test_schedule_bounds_validated(self):
        with pytest.raises(ConfigError):
            TrainConfig(total_steps=100, reg_start=50, gate_freeze=40)
        with pytest.raises(ConfigError):
            TrainConfig(total_steps=100, reg_start=50, gate_freeze=200)
        # vacuous smoke runs skip the freeze bound
        TrainConfig(total_steps=0, reg_start=500, gate_freeze=900)


class TestAdamW:
    def test_first_step_moves_opposite_gradient_sign(self):
        rng = np.random.default_rng(0)
        for betas in ((0.9, 0.98), (0.9, 0.9)):
            p = Tensor(rng.normal(size=(6,)).astype(np.float32), requires_grad=True)
            opt = AdamW([{"params": {"p": p}, "lr": 1e-2}],
                        beta1=betas[0], beta2=betas[1], weight_decay=0.0)
            before = p.data.copy()
            p.grad = rng.normal(size=(6,)).astype(np.float32)
            p.grad[p.grad == 0] = 0.5
            opt.step()
            moved = p.data - before
            assert np.all(np.sign(moved) == -np.sign(p.grad))

    def test_decoupled_decay_shrinks_unused_parameter(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        opt = AdamW([{"params": {"p": p}, "lr": 0.1}], weight_decay=0.01)
        opt.step()  # zero gradient: only decay acts
        np.testing.assert_allclose(p.data, 1.0 - 0.1 * 0.01)

    def test_frozen_parameter_untouched(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        opt = AdamW([{"params": {"p": p}, "lr": 0.1}], weight_decay=0.01)
        p.requires_grad = False
        opt.step()
        np.testing.assert_allclose(p.data, 1.0)
        assert opt.state["p"]["t"] == 0

    def test_duplicate_param_rejected(self):
        p = Tensor(np.ones(1), requires_grad=True)
        with pytest.raises(ContractError):
            AdamW([
                {"params": {"p": p}, "lr": 0.1},
                {"params": {"p": p}, "lr": 0.2},
            ])


class TestParameterPartition:
    @pytest.mark.parametrize("mode", list(Mode))
    def test_total_and_disjoint(self, mode):
        model = Model(small_model_config(mode), seed=2)
        groups = model.param_groups()
        names_main = set(groups["main"])
        names_gate = set(groups["gate"])
        assert not (names_main & names_gate)
        assert names_main | names_gate == set(model.parameters())
        assert all("gate" in n for n in names_gate)
        assert all("gate" not in n for n in names_main)
        if mode in (Mode.HGF_FULL, Mode.HGF_QK_ONLY):
            assert names_gate
        else:
            assert not names_gate

    def test_lam_is_a_main_parameter(self):
        model = Model(small_model_config(Mode.HGF_FULL), seed=2)
        assert "layers.0.attn.lam" in model.param_groups()["main"]


class TestTrainerLoop:
    def _run(self, corpus_text, cfg=None, model_cfg=None, metrics_path=None):
        model_cfg = model_cfg or small_model_config()
        cfg = cfg or small_train_config()
        model = Model(model_cfg, seed=cfg.seed)
        corpus = Corpus.from_text(corpus_text, val_fraction=cfg.val_fraction)
        trainer = Trainer(model, corpus, cfg, metrics_path=metrics_path)
        records = trainer.run()
        return model, records

    def test_bitwise_identical_runs(self, corpus_text, tmp_path):
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for path in paths:
            self._run(corpus_text, metrics_path=path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert paths[0].stat().st_size > 0

    def test_reg_weight_trace_matches_formula(self, corpus_text):
        cfg = small_train_config()
        _, records = self._run(corpus_text, cfg=cfg)
        for r in records:
            assert r.reg_weight == reg_weight(r.step, cfg)

    def test_gate_trajectory_phases(self, corpus_text):
        cfg = small_train_config()
        _, records = self._run(corpus_text, cfg=cfg)
        before = [r.gate_mean for r in records if r.step < cfg.gate_freeze]
        after = [r.gate_mean for r in records if r.step >= cfg.gate_freeze]
        assert len(set(before)) > 1  # gates actually move
        assert len(set(after)) == 1  # bitwise constant once frozen

    def test_frozen_gates_bit_identical(self, corpus_text):
        cfg = small_train_config()
        model_cfg = small_model_config()
        model = Model(model_cfg, seed=cfg.seed)
        corpus = Corpus.from_text(corpus_text)
        trainer = Trainer(model, corpus, cfg)
        snapshots = []
        for step in range(cfg.total_steps):
            trainer.train_step(step)
            if step >= cfg.gate_freeze - 1:
                snapshots.append({
                    n: p.data.copy() for n, p in model.param_groups()["gate"].items()
                })
        frozen = snapshots[0]  # state after the last pre-freeze update
        for later in snapshots[1:]:
            for name in frozen:
                assert np.array_equal(frozen[name], later[name])

    def test_val_loss_recorded_on_cadence(self, corpus_text):
        cfg = small_train_config()
        _, records = self._run(corpus_text, cfg=cfg)
        with_val = [r.step for r in records if r.val_loss is not None]
        assert with_val == [cfg.eval_interval - 1, 2 * cfg.eval_interval - 1]

    def test_penalty_alone_drives_gates_toward_zero(self, corpus_text):
        model = Model(small_model_config(), seed=1)
        opt = make_optimizer(model, TrainConfig(total_steps=10, reg_start=1, gate_freeze=5))
        gates = model.param_groups()["gate"]
        start = {n: np.abs(p.data).max() for n, p in gates.items()}
        for _ in range(5):
            opt.zero_grad()
            backward(T.scale(model.gate_penalty(), 0.5))
            opt.step()
        for name, p in gates.items():
            assert np.abs(p.data).max() < start[name]
            assert np.all(p.data > 0.0)  # moving toward zero, not through it

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_aborts_with_group_diagnostic(self, corpus_text):
        cfg = small_train_config()
        model = Model(small_model_config(), seed=3)
        model.parameters()["embedding.weight"].data[:] = np.inf
        corpus = Corpus.from_text(corpus_text)
        trainer = Trainer(model, corpus, cfg)
        with pytest.raises(TrainingDiverged) as err:
            trainer.train_step(0)
        assert "main" in str(err.value)


class TestEvaluate:
    def test_pure(self, corpus_text):
        model = Model(small_model_config(), seed=4)
        corpus = Corpus.from_text(corpus_text)
        batches = validation_batches(corpus.val_ids, 32, 4, 4)
        assert evaluate(model, batches) == evaluate(model, batches)

    def test_untrained_byte_model_near_uniform_entropy(self, corpus_text):
        model = Model(small_model_config(), seed=4)
        corpus = Corpus.from_text(corpus_text)
        loss = evaluate(model, validation_batches(corpus.val_ids, 32, 4, 4))
        assert abs(loss - math.log(256)) / math.log(256) <= 0.15

    def test_empty_stream_rejected(self):
        model = Model(small_model_config(), seed=4)
        with pytest.raises(ContractError):
            evaluate(model, [])


class TestMetricsWireFormat:
    def test_wall_time_not_serialized(self):
        record = MetricsRecord(step=3, train_loss=1.5, reg_weight=0.0,
                               gate_mean=0.1, wall_time=123.0)
        payload = json.loads(record.to_json_line())
        assert payload == {"step": 3, "train_loss": 1.5, "reg_weight": 0.0,
                           "gate_mean": 0.1}

    def test_val_loss_optional(self):
        record = MetricsRecord(step=1, train_loss=1.0, reg_weight=0.01,
                               gate_mean=0.09, val_loss=2.5)
        payload = json.loads(record.to_json_line())
        assert payload["val_loss"] == 2.5


class TestGradcheckHarness:
    def test_standard_battery_passes(self):
        report = standard_gradcheck(tolerance=1e-3)
        errors = report.group_errors(informational=False)
        for group in ("lora_down", "lora_up", "gate", "lam", "layernorm", "embedding"):
            assert group in errors, f"missing group {group}"
            assert errors[group] <= 1e-3, f"{group}: {errors[group]}"
        assert report.ok
        # the straight-through latent weights are present but informational
        backbone = [e for e in report.entries if e.group == "backbone"]
        assert backbone and all(e.informational for e in backbone)

    def test_report_json_shape(self):
        report = standard_gradcheck(tolerance=1e-3)
        payload = json.loads(report.to_json())
        assert payload["ok"] is True
        assert payload["groups"]["backbone"]["max_rel_err"] is None
        assert payload["groups"]["backbone"]["informational_max_rel_err"] is not None
        assert payload["groups"]["gate"]["max_rel_err"] <= 1e-3


class TestLogitGradientVarianceHarness:
    def test_reports_finite_positive_values(self):
        seeds = range(4)
        values = {
            mode: attention_logit_gradient_variance(mode, seeds)
            for mode in (Mode.HGF_FULL, Mode.DIFF_ONLY)
        }
        for mode, value in values.items():
            assert np.isfinite(value) and value > 0.0, mode

    def test_deterministic_for_fixed_seeds(self):
        a = attention_logit_gradient_variance(Mode.BITNET, range(3))
        b = attention_logit_gradient_variance(Mode.BITNET, range(3))
        assert a == b

    def test_rejects_non_differential_mode(self):
        with pytest.raises(ContractError):
            attention_logit_gradient_variance(Mode.BASELINE_FP, range(2))
