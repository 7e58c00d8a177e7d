"""Differential attention against a naive reference that materializes
both attention matrices explicitly, head by head, in float64.

The reference rebuilds every projection from the raw parameter arrays
(its own layernorm, its own quantizer, its own softmax); it shares no
forward code with the layer under test.
"""

import math

import numpy as np

from hgflow.config import Mode, ModelConfig
from hgflow.layers import DiffAttention, ParamStore, StandardAttention
from hgflow.tensor import Tensor


# ---------------------------------------------------------------------------
# Reference building blocks.

def ref_layernorm(x, gain, bias, eps=1e-5):
    mu = np.mean(x, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    return ((x - mu) * inv).astype(x.dtype) * gain + bias


def ref_fake_quant_linear(x, w, gain, bias):
    xn = ref_layernorm(x, gain, bias)
    amax = np.max(np.abs(xn), axis=-1)
    scales = np.maximum(amax, np.float32(1e-5))
    q = np.clip(np.rint((xn / scales[..., None]) * np.float32(127.0)), -127, 127)
    xq = q.astype(np.float32) * (scales[..., None] / np.float32(127.0))
    ws = max(float(np.mean(np.abs(w), dtype=np.float64)), 1e-5)
    ws = float(np.float32(ws))
    trits = np.clip(np.rint(w / np.float32(ws)), -1, 1)
    wq = trits.astype(np.float32) * np.float32(ws)
    return xq.astype(np.float64) @ wq.astype(np.float64).T


def ref_dense_linear(x, w):
    return x.astype(np.float64) @ w.astype(np.float64).T


def ref_silu_lora(x, down, up):
    h = x.astype(np.float64) @ down.astype(np.float64)
    return (h * (1.0 / (1.0 + np.exp(-h)))) @ up.astype(np.float64)


def ref_causal_softmax(scores):
    length = scores.shape[-1]
    masked = scores.copy()
    masked[np.triu_indices(length, k=1)] = -np.inf
    m = np.max(masked, axis=-1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=-1, keepdims=True)


def split_heads(t, n):
    b, length, width = t.shape
    return t.reshape(b, length, n, width // n).transpose(0, 2, 1, 3)


def ref_diff_attention(params, prefix, cfg, x):
    """Materialized two-softmax attention from raw parameter arrays."""
    d = cfg.d_model
    h = cfg.n_heads
    quantized = cfg.mode in (Mode.BITNET, Mode.HGF_FULL, Mode.HGF_QK_ONLY)
    gated_qk = cfg.mode in (Mode.HGF_FULL, Mode.HGF_QK_ONLY)
    gated_v = cfg.mode is Mode.HGF_FULL

    def proj(name):
        w = params[f"{prefix}.{name}.weight"].data
        if quantized:
            return ref_fake_quant_linear(
                x, w,
                params[f"{prefix}.{name}.norm.gain"].data,
                params[f"{prefix}.{name}.norm.bias"].data,
            )
        return ref_dense_linear(x, w)

    q = split_heads(proj("q"), 2 * h)
    k = split_heads(proj("k"), 2 * h)
    v = split_heads(proj("v"), h)

    if gated_qk:
        for name, heads in (("q", q), ("k", k)):
            lora = ref_silu_lora(
                x, params[f"{prefix}.{name}.lora_down"].data,
                params[f"{prefix}.{name}.lora_up"].data,
            )
            lora_heads = split_heads(lora, 2 * h)
            gate = np.tanh(params[f"{prefix}.gate_{name}"].data.astype(np.float64))
            for j in range(2 * h):
                heads[:, j] += gate[j // 2] * lora_heads[:, j]
    if gated_v:
        lora_heads = split_heads(
            ref_silu_lora(x, params[f"{prefix}.v.lora_down"].data,
                          params[f"{prefix}.v.lora_up"].data),
            h,
        )
        gate = np.tanh(params[f"{prefix}.gate_v"].data.astype(np.float64))
        for j in range(h):
            v[:, j] += gate[j] * lora_heads[:, j]

    lam = float(params[f"{prefix}.lam"].data)
    sub = d // (2 * h)
    b, _, length, dv = v.shape
    out = np.zeros((b, h, length, dv))
    for bi in range(b):
        for head in range(h):
            s1 = q[bi, head] @ k[bi, head].T / math.sqrt(sub)
            s2 = q[bi, h + head] @ k[bi, h + head].T / math.sqrt(sub)
            p1 = ref_causal_softmax(s1)
            p2 = ref_causal_softmax(s2)
            out[bi, head] = 0.5 * (p1 @ v[bi, head] - lam * (p2 @ v[bi, head]))
    merged = out.transpose(0, 2, 1, 3).reshape(b, length, d // 2)

    w_o = params[f"{prefix}.o.weight"].data
    if quantized:
        return ref_fake_quant_linear(
            merged.astype(np.float32), w_o,
            params[f"{prefix}.o.norm.gain"].data,
            params[f"{prefix}.o.norm.bias"].data,
        )
    return ref_dense_linear(merged.astype(np.float32), w_o)


def ref_standard_attention(params, prefix, cfg, x):
    h = cfg.n_heads
    dh = cfg.d_model // h
    q = split_heads(ref_dense_linear(x, params[f"{prefix}.q.weight"].data), h)
    k = split_heads(ref_dense_linear(x, params[f"{prefix}.k.weight"].data), h)
    v = split_heads(ref_dense_linear(x, params[f"{prefix}.v.weight"].data), h)
    b, _, length, _ = v.shape
    out = np.zeros_like(v)
    for bi in range(b):
        for head in range(h):
            p = ref_causal_softmax(q[bi, head] @ k[bi, head].T / math.sqrt(dh))
            out[bi, head] = p @ v[bi, head]
    merged = out.transpose(0, 2, 1, 3).reshape(b, length, cfg.d_model)
    return ref_dense_linear(merged.astype(np.float32), params[f"{prefix}.o.weight"].data)


def build_attention(cfg, seed):
    store = ParamStore(seed, dtype=np.float32)
    if cfg.mode is Mode.BASELINE_FP:
        attn = StandardAttention(store, "attn", cfg)
    else:
        attn = DiffAttention(store, "attn", cfg)
    return attn, store


DIFF_MODES = [Mode.BITNET, Mode.DIFF_ONLY, Mode.HGF_FULL, Mode.HGF_QK_ONLY]


def random_diff_config(rng):
    while True:
        heads = int(rng.integers(1, 5))
        d = int(rng.integers(1, 9)) * 2 * heads
        if d <= 16:
            break
    mode = DIFF_MODES[int(rng.integers(0, len(DIFF_MODES)))]
    rank = max(1, d // 4)
    return ModelConfig(d_model=d, n_layers=1, n_heads=heads, vocab_size=32,
                       ctx_len=8, lora_rank=rank, mode=mode)


def test_diff_attention_matches_naive_reference_50_configs():
    rng = np.random.default_rng(2024)
    for case in range(50):
        cfg = random_diff_config(rng)
        attn, store = build_attention(cfg, seed=int(rng.integers(0, 1 << 30)))
        length = int(rng.integers(1, 9))
        batch = int(rng.integers(1, 3))
        x = rng.normal(size=(batch, length, cfg.d_model)).astype(np.float32)
        got = attn(Tensor(x)).data
        ref = ref_diff_attention(store.params, "attn", cfg, x)
        np.testing.assert_allclose(
            got, ref, rtol=1e-5, atol=1e-6,
            err_msg=f"case {case}: mode={cfg.mode.value} d={cfg.d_model} "
                    f"heads={cfg.n_heads} L={length}",
        )


def test_standard_attention_matches_naive_reference():
    rng = np.random.default_rng(77)
    for case in range(10):
        heads = int(rng.integers(1, 5))
        d = int(rng.integers(1, 5)) * heads * 2
        cfg = ModelConfig(d_model=d, n_layers=1, n_heads=heads, vocab_size=32,
                          ctx_len=8, lora_rank=1, mode=Mode.BASELINE_FP)
        attn, store = build_attention(cfg, seed=case)
        x = rng.normal(size=(2, 5, d)).astype(np.float32)
        got = attn(Tensor(x)).data
        ref = ref_standard_attention(store.params, "attn", cfg, x)
        np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-6)


def test_lambda_zero_reduces_to_half_single_softmax():
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, vocab_size=32,
                      ctx_len=8, lora_rank=2, mode=Mode.DIFF_ONLY)
    attn, store = build_attention(cfg, seed=5)
    store.params["attn.lam"].data = np.asarray(0.0, dtype=np.float32)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 6, 8)).astype(np.float32)
    got = attn(Tensor(x)).data

    # independent half-attention reference using only the first head group
    params = store.params
    h = cfg.n_heads
    q = split_heads(ref_dense_linear(x, params["attn.q.weight"].data), 2 * h)
    k = split_heads(ref_dense_linear(x, params["attn.k.weight"].data), 2 * h)
    v = split_heads(ref_dense_linear(x, params["attn.v.weight"].data), h)
    sub = cfg.d_model // (2 * h)
    out = np.zeros_like(v)
    for head in range(h):
        p = ref_causal_softmax(q[0, head] @ k[0, head].T / math.sqrt(sub))
        out[0, head] = 0.5 * (p @ v[0, head])
    merged = out.transpose(0, 2, 1, 3).reshape(1, 6, cfg.d_model // 2)
    ref = ref_dense_linear(merged.astype(np.float32), params["attn.o.weight"].data)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-6)


def test_single_token_sequence():
    # Both softmaxes collapse to 1, so the block output is the output
    # projection of 0.5 * (1 - lam) * v.
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, vocab_size=32,
                      ctx_len=8, lora_rank=2, mode=Mode.DIFF_ONLY)
    attn, store = build_attention(cfg, seed=9)
    lam = float(store.params["attn.lam"].data)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 1, 8)).astype(np.float32)
    got = attn(Tensor(x)).data
    v = ref_dense_linear(x, store.params["attn.v.weight"].data)
    expected = ref_dense_linear(
        (0.5 * (1.0 - lam) * v).astype(np.float32),
        store.params["attn.o.weight"].data,
    )
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-6)
