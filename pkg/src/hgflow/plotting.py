"""Figure rendering for the report path. All figures go straight to
files; the Agg backend keeps this usable on headless machines.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .analysis import MemoryReport, TERNARY_BITS, throughput_bound

_PHASE_COLORS = {"warmup": "#dbe9f6", "ramp": "#fdebd0", "frozen": "#dff0d8"}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_loss_curve(records, path):
    """Train loss per step with validation samples overlaid."""
    steps = [r.step for r in records]
    train = [r.train_loss for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, train, lw=1.0, label="train loss")
    val = [(r.step, r.val_loss) for r in records if r.val_loss is not None]
    if val:
        ax.plot(*zip(*val), "o-", ms=4, label="val loss")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.grid(alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def save_gate_trajectory(records, reg_start, gate_freeze, path):
    """Mean absolute gate value across the warmup / ramp / frozen phases."""
    steps = [r.step for r in records]
    gates = [r.gate_mean for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    if steps:
        last = steps[-1]
        ax.axvspan(steps[0], min(reg_start, last), color=_PHASE_COLORS["warmup"], label="warmup")
        if reg_start < last:
            ax.axvspan(reg_start, min(gate_freeze, last), color=_PHASE_COLORS["ramp"],
                       label="regularization")
        if gate_freeze < last:
            ax.axvspan(gate_freeze, last, color=_PHASE_COLORS["frozen"], label="frozen")
    ax.plot(steps, gates, lw=1.2, color="tab:blue", label="mean |gate|")
    ax.set_xlabel("step")
    ax.set_ylabel("mean |tanh(gate)|")
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def save_memory_breakdown(reports: list[MemoryReport], path):
    """Stacked per-component bars, one bar per architecture mode."""
    keys = ["embeddings_token", "embeddings_positional", "attention", "mlp",
            "lora", "gates", "layer_norms", "output_head"]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    xs = range(len(reports))
    bottoms = [0.0] * len(reports)
    for key in keys:
        vals = [r.components.get(key, 0) / 1e6 for r in reports]
        if not any(vals):
            continue
        ax.bar(xs, vals, bottom=bottoms, label=key.replace("_", " "))
        bottoms = [b + v for b, v in zip(bottoms, vals)]
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r.mode.value for r in reports])
    ax.set_ylabel("MB")
    ax.set_title("memory footprint by component")
    ax.legend(fontsize=7)
    return _finish(fig, path)


def save_throughput_curve(params: float, bandwidth_gb_s: float, path):
    """Bandwidth-bound tokens/s as a function of bits per parameter."""
    bits = [b / 10.0 for b in range(10, 170)]
    tput = [throughput_bound(bandwidth_gb_s, params, b) for b in bits]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(bits, tput, lw=1.2)
    for marker, label in ((16.0, "FP16"), (8.0, "INT8"), (TERNARY_BITS, "ternary")):
        ax.axvline(marker, color="gray", ls="--", lw=0.7)
        ax.annotate(label, (marker, max(tput) * 0.9), rotation=90, fontsize=7,
                    ha="right", va="top")
    ax.set_xlabel("bits per parameter")
    ax.set_ylabel("tokens / s (upper bound)")
    ax.set_title(f"bandwidth {bandwidth_gb_s:g} GB/s, {params / 1e6:.1f}M params")
    ax.grid(alpha=0.3)
    return _finish(fig, path)
