"""Command-line surface: train, eval, export-ternary, report, gradcheck,
and a standalone trit packing tool.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import struct
import sys

import numpy as np

from . import analysis
from .checkpoint import Checkpoint, export_ternary, load_model_checkpoint
from .config import GATED_MODES, Mode, parse_config_file
from .data import Corpus, validation_batches
from .errors import (
    CapacityError,
    CheckpointError,
    CodecError,
    ConfigError,
    ContextLengthError,
    ContractError,
    ShapeError,
    TrainingDiverged,
)
from .layers import GATE_INIT, Model
from .packing import PackingMode, pack_trits, unpack_trits
from .training import MetricsRecord, Trainer, evaluate, standard_gradcheck

PACK_MAGIC = b"HGFPACK1"
_PACK_MODE_BYTE = {PackingMode.TWO_BIT: 0, PackingMode.FIVE_PER_BYTE: 1}

_CLI_ERRORS = (
    ConfigError, CheckpointError, CodecError, ContractError, ShapeError,
    CapacityError, ContextLengthError, TrainingDiverged, OSError,
)


def _add_packing_flag(parser):
    parser.add_argument("--packing", choices=[m.value for m in PackingMode],
                        default=PackingMode.TWO_BIT.value,
                        help="ternary storage codec (default: 2bit)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hgflow",
        description="Ternary-backbone language models with gated low-rank "
                    "correction: training, packed inference, and deployment "
                    "calculators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--corpus", help="raw text/byte corpus path (required when steps > 0)")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--mode", choices=[m.value for m in Mode], help="override architecture mode")
    p.add_argument("--metrics-out", help="JSONL metrics path (default: stdout)")
    p.add_argument("--ckpt-out", default="model.ckpt", help="checkpoint path (default: model.ckpt)")
    p.add_argument("--ckpt-interval", type=int, help="also checkpoint every N steps")

    p = sub.add_parser("eval", help="mean validation loss of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-batches", type=int, help="validation batches (default: from config)")

    p = sub.add_parser("export-ternary", help="freeze a checkpoint for integer inference")
    p.add_argument("ckpt_in")
    p.add_argument("ckpt_out")
    _add_packing_flag(p)

    p = sub.add_parser("report", help="deployment calculators, figures, and CSV export")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="report_out")
    p.add_argument("--metrics", help="metrics JSONL from a training run")
    p.add_argument("--bandwidth-gbs", type=float, default=500.0)
    p.add_argument("--mul-add-ratio", type=float, default=4.0)
    p.add_argument("--gpu-mem-gb", type=float, default=24.0)
    p.add_argument("--context-mem-gb", type=float, default=0.5)
    p.add_argument("--saturation-eps", type=float, default=1e-4)
    _add_packing_flag(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="optional config file; only the seed is used")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("pack", help="pack (or unpack) a raw int8 trit file")
    p.add_argument("file_in")
    p.add_argument("file_out")
    p.add_argument("--unpack", action="store_true", help="decode instead of encode")
    _add_packing_flag(p)

    return parser


# ---------------------------------------------------------------------------
# Command implementations.

def _cmd_train(args) -> int:
    model_cfg, train_cfg = parse_config_file(args.config)
    overrides = {}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.ckpt_interval is not None:
        overrides["checkpoint_interval"] = args.ckpt_interval
    if overrides:
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    if args.mode is not None:
        model_cfg = dataclasses.replace(model_cfg, mode=Mode.from_token(args.mode))

    model = Model(model_cfg, seed=train_cfg.seed)
    corpus = None
    if args.corpus is not None:
        corpus = Corpus.from_files(args.corpus, val_fraction=train_cfg.val_fraction)
    elif train_cfg.total_steps > 0:
        raise ConfigError("--corpus is required when total_steps > 0")

    trainer = Trainer(model, corpus, train_cfg,
                      metrics_path=args.metrics_out,
                      checkpoint_path=args.ckpt_out)
    records = trainer.run()
    if args.metrics_out is None:
        for record in records:
            print(record.to_json_line())
    print(f"wrote checkpoint {args.ckpt_out} after {train_cfg.total_steps} steps",
          file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    model, train_cfg, step = load_model_checkpoint(args.ckpt)
    corpus = Corpus.from_files(args.corpus, val_fraction=train_cfg.val_fraction)
    n_batches = args.n_batches if args.n_batches is not None else train_cfg.eval_batches
    batches = validation_batches(corpus.val_ids, model.config.ctx_len,
                                 train_cfg.micro_batch, n_batches)
    loss = evaluate(model, batches)
    print(json.dumps({
        "val_loss": loss,
        "n_batches": n_batches,
        "step": step,
        "mode": model.config.mode.value,
    }))
    return 0


def _cmd_export(args) -> int:
    packing = PackingMode.from_token(args.packing)
    ckpt = export_ternary(args.ckpt_in, args.ckpt_out, packing)
    packed = sum(1 for e in ckpt.entries if e.dtype.startswith("TRIT"))
    print(json.dumps({
        "ckpt_out": args.ckpt_out,
        "packing": packing.value,
        "packed_tensors": packed,
        "payload_bytes": len(ckpt.payload),
    }))
    return 0


def _load_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(MetricsRecord(
                step=d["step"], train_loss=d["train_loss"],
                reg_weight=d["reg_weight"], gate_mean=d["gate_mean"],
                val_loss=d.get("val_loss"),
            ))
    return records


def _cmd_report(args) -> int:
    from . import plotting

    model_cfg, train_cfg = parse_config_file(args.config)
    packing = PackingMode.from_token(args.packing)
    os.makedirs(args.out_dir, exist_ok=True)

    memory = {}
    reports = []
    for mode in Mode:
        try:
            cfg = dataclasses.replace(model_cfg, mode=mode)
        except ConfigError:
            continue
        rep = analysis.memory_report(cfg, packing)
        memory[mode.value] = rep.to_dict()
        reports.append(rep)

    records = _load_metrics(args.metrics) if args.metrics else None
    gate_mean = math.tanh(GATE_INIT)
    if records:
        gate_mean = records[-1].gate_mean

    params = analysis.total_params(model_cfg)
    own_report = analysis.memory_report(model_cfg, packing)
    bits_eff = None
    if model_cfg.mode in GATED_MODES:
        bits_eff = analysis.effective_bitwidth(gate_mean, model_cfg.lora_rank, model_cfg.d_model)

    doc = {
        "model_config": model_cfg.to_dict(),
        "packing": packing.value,
        "total_params": params,
        "memory": memory,
        "throughput_tokens_per_s": {
            "bandwidth_gb_s": args.bandwidth_gbs,
            "fp16": analysis.throughput_bound(args.bandwidth_gbs, params, 16.0),
            "int8": analysis.throughput_bound(args.bandwidth_gbs, params, 8.0),
            "ternary": analysis.throughput_bound(args.bandwidth_gbs, params, analysis.TERNARY_BITS),
        },
        "effective_bitwidth": {
            "gate_mean": gate_mean,
            "rank": model_cfg.lora_rank,
            "d_model": model_cfg.d_model,
            "bits": bits_eff,
        },
        "speedup": None,
        "batch_density": {
            "gpu_mem_gb": args.gpu_mem_gb,
            "model_mem_gb": own_report.total_bytes / 1e9,
            "context_mem_gb": args.context_mem_gb,
            "max_users": analysis.batch_density(
                args.gpu_mem_gb, own_report.total_bytes / 1e9, args.context_mem_gb
            ),
        },
        "figures": [],
        "csv": [],
    }
    if bits_eff is not None:
        doc["throughput_tokens_per_s"]["effective"] = analysis.throughput_bound(
            args.bandwidth_gbs, params, bits_eff
        )
    if model_cfg.mode in GATED_MODES:
        fraction = analysis.lora_compute_fraction(model_cfg)
        doc["speedup"] = {
            "mul_add_ratio": args.mul_add_ratio,
            "lora_fraction": fraction,
            "estimate": analysis.speedup_estimate(args.mul_add_ratio, fraction),
        }

    figures = [
        plotting.save_memory_breakdown(reports, os.path.join(args.out_dir, "memory_breakdown.png")),
        plotting.save_throughput_curve(params, args.bandwidth_gbs,
                                       os.path.join(args.out_dir, "throughput_vs_bits.png")),
    ]
    if records:
        csv_path = os.path.join(args.out_dir, "loss_curve.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "train_loss", "reg_weight", "gate_mean", "val_loss"])
            for r in records:
                writer.writerow([r.step, r.train_loss, r.reg_weight, r.gate_mean,
                                 "" if r.val_loss is None else r.val_loss])
        doc["csv"].append(csv_path)
        figures.append(plotting.save_loss_curve(
            records, os.path.join(args.out_dir, "loss_curve.png")))
        figures.append(plotting.save_gate_trajectory(
            records, train_cfg.reg_start, train_cfg.gate_freeze,
            os.path.join(args.out_dir, "gate_trajectory.png")))
        doc["training"] = {
            "final_train_loss": records[-1].train_loss,
            "final_gate_mean": records[-1].gate_mean,
            "saturation_step": _saturation_from_records(records, args.saturation_eps),
        }
    doc["figures"] = figures

    report_path = os.path.join(args.out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    print(json.dumps(doc, indent=2))
    return 0


def _saturation_from_records(records, eps):
    val = [(r.step, r.val_loss) for r in records if r.val_loss is not None]
    try:
        if len(val) >= 2:
            dt = val[1][0] - val[0][0]
            return analysis.saturation_time(analysis.LossCurve(val), eps, dt)
        curve = analysis.LossCurve.from_records(records)
        return analysis.saturation_time(curve, eps, 1)
    except ContractError:
        return None


def _cmd_gradcheck(args) -> int:
    seed = args.seed
    if args.config is not None:
        _, train_cfg = parse_config_file(args.config)
        seed = train_cfg.seed
    report = standard_gradcheck(tolerance=args.tolerance, h=args.step_size, seed=seed)
    print(report.to_json())
    return 0 if report.ok else 1


def _cmd_pack(args) -> int:
    packing = PackingMode.from_token(args.packing)
    if args.unpack:
        with open(args.file_in, "rb") as fh:
            blob = fh.read()
        if not blob.startswith(PACK_MAGIC):
            raise CodecError(f"{args.file_in} is not a packed trit file")
        mode_byte = blob[len(PACK_MAGIC)]
        mode = {v: k for k, v in _PACK_MODE_BYTE.items()}.get(mode_byte)
        if mode is None:
            raise CodecError(f"unknown packing mode byte {mode_byte}")
        (count,) = struct.unpack("<Q", blob[len(PACK_MAGIC) + 1: len(PACK_MAGIC) + 9])
        trits = unpack_trits(
            np.frombuffer(blob[len(PACK_MAGIC) + 9:], dtype=np.uint8), count, mode
        )
        with open(args.file_out, "wb") as fh:
            fh.write(trits.astype(np.int8).tobytes())
        print(json.dumps({"trits": int(count), "packing": mode.value, "unpacked": True}))
        return 0
    with open(args.file_in, "rb") as fh:
        trits = np.frombuffer(fh.read(), dtype=np.int8)
    packed = pack_trits(trits, packing)
    with open(args.file_out, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(bytes([_PACK_MODE_BYTE[packing]]))
        fh.write(struct.pack("<Q", trits.size))
        fh.write(packed.tobytes())
    print(json.dumps({"trits": int(trits.size), "packed_bytes": int(packed.size),
                      "packing": packing.value}))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "export-ternary": _cmd_export,
    "report": _cmd_report,
    "gradcheck": _cmd_gradcheck,
    "pack": _cmd_pack,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
