"""Dense float tensors with reverse-mode autodiff over a fixed op set.

Values live in flat row-major numpy buffers (float32 by default, float64
for verification probes). The tape is deliberately small: every
differentiable operation is one of the enumerated rules registered by
name in a module-level table, so each backward rule can be audited in
isolation and external modules can add custom rules (the
straight-through quantizers do this).

Reductions (softmax / layernorm / cross-entropy / sum / mean) accumulate
in float64 internally regardless of the storage dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# Global tape switch. When False, op results carry no graph and cost only
# the forward numpy work.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense FP array plus an optional autodiff node.

    Leaf tensors built from user data are validated to be finite.
    Intermediate results produced by ops skip that check for speed; the
    training loop re-checks losses and gradients at step boundaries.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "name",
                 "retains_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        if arr.ndim == 0:
            arr = arr.astype(dtype)  # ascontiguousarray would promote to 1-d
        else:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = None
        self.parents = ()
        self.ctx = None
        self.name = name
        self.retains_grad = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def retain_grad(self):
        """Keep this node's gradient after backward (for measurement probes)."""
        self.retains_grad = True
        return self

    def detach(self) -> "Tensor":
        return _result(self.data, None, ())

    def __repr__(self):
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Arithmetic sugar; everything routes through the registered ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, op: str | None, parents: tuple, ctx=None) -> Tensor:
    """Build an op-result tensor without the leaf finiteness check."""
    t = object.__new__(Tensor)
    t.data = data
    t.name = None
    t.retains_grad = False
    needs = _grad_enabled and any(
        isinstance(p, Tensor) and p.requires_grad for p in parents
    )
    t.requires_grad = needs
    t.grad = None
    if needs:
        t.op = op
        t.parents = parents
        t.ctx = ctx
    else:
        t.op = None
        t.parents = ()
        t.ctx = None
    return t


# ---------------------------------------------------------------------------
# Backward rule registry.

_BACKWARD = {}


def register_op(tag: str, backward_fn):
    """Register a backward rule. Tags are unique; collisions are bugs."""
    if tag in _BACKWARD:
        raise ValueError(f"backward rule already registered for {tag!r}")
    _BACKWARD[tag] = backward_fn


def registered_ops():
    return sorted(_BACKWARD)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Visits each reachable node exactly once in reverse topological order
    and accumulates gradients additively across fan-out. Parameter
    `.grad` buffers accumulate across calls (gradient accumulation), so
    callers zero them between optimizer steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.retains_grad and node.op is not None:
            node.grad = g.astype(node.data.dtype, copy=True)
        if node.op is None:
            # Leaf: accumulate into the persistent buffer.
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        rule = _BACKWARD[node.op]
        parent_grads = rule(node, g)
        for p, pg in zip(node.parents, parent_grads):
            if not (isinstance(p, Tensor) and p.requires_grad) or pg is None:
                continue
            slot = grads.get(id(p))
            if slot is None:
                grads[id(p)] = pg.astype(p.data.dtype, copy=False)
            else:
                slot += pg.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# Elementwise / structural ops.

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _result(out, "add", (a, b))


def _add_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)


register_op("add", _add_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data - b.data, "sub", (a, b))


def _sub_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)


register_op("sub", _sub_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data * b.data, "mul", (a, b))


def _mul_backward(node, g):
    a, b = node.parents
    return (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )


register_op("mul", _mul_backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.data.dtype.type(c), "scale", (a,), {"c": c})


def _scale_backward(node, g):
    return (g * node.data.dtype.type(node.ctx["c"]),)


register_op("scale", _scale_backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:  # incompatible batch dims
        raise ShapeError(str(exc)) from None
    return _result(out, "matmul", (a, b))


def _matmul_backward(node, g):
    a, b = node.parents
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
    return ga, gb


register_op("matmul", _matmul_backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    return _result(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), {"axes": axes})


def _transpose_backward(node, g):
    inverse = np.argsort(node.ctx["axes"])
    return (np.ascontiguousarray(g.transpose(inverse)),)


register_op("transpose", _transpose_backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), "reshape", (a,))


def _reshape_backward(node, g):
    return (g.reshape(node.parents[0].data.shape),)


register_op("reshape", _reshape_backward)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(index)])
    return _result(out, "narrow", (a,), {"axis": axis, "start": start, "stop": stop})


def _narrow_backward(node, g):
    a = node.parents[0]
    ga = np.zeros_like(a.data)
    index = [slice(None)] * a.data.ndim
    index[node.ctx["axis"]] = slice(node.ctx["start"], node.ctx["stop"])
    ga[tuple(index)] = g
    return (ga,)


register_op("narrow", _narrow_backward)


# ---------------------------------------------------------------------------
# Nonlinearities.

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,))


def _tanh_backward(node, g):
    return (g * (1.0 - node.data * node.data),)


register_op("tanh", _tanh_backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow on large negative inputs.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(a.data * s, "silu", (a,), {"s": s})


def _silu_backward(node, g):
    x = node.parents[0].data
    s = node.ctx["s"]
    return (g * (s * (1.0 + x * (1.0 - s))),)


register_op("silu", _silu_backward)


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), "abs", (a,))


def _abs_backward(node, g):
    return (g * np.sign(node.parents[0].data),)


register_op("abs", _abs_backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (max subtraction is mandatory)."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    denom = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(x.dtype)
    return _result(out, "softmax", (a,), {"axis": axis})


def _softmax_backward(node, g):
    y = node.data
    axis = node.ctx["axis"]
    inner = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(y.dtype)
    return (y * (g - inner),)


register_op("softmax", _softmax_backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm affine parameters must match the last axis")
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = ((x.data - mu) * inv_std).astype(x.data.dtype)
    out = xhat * gain.data + bias.data
    return _result(out, "layer_norm", (x, gain, bias), {"xhat": xhat, "inv_std": inv_std})


def _layer_norm_backward(node, g):
    x, gain, _bias = node.parents
    xhat = node.ctx["xhat"]
    inv_std = node.ctx["inv_std"]
    lead = tuple(range(g.ndim - 1))
    dgain = np.sum(g * xhat, axis=lead, dtype=np.float64).astype(gain.data.dtype)
    dbias = np.sum(g, axis=lead, dtype=np.float64).astype(gain.data.dtype)
    dxhat = g * gain.data
    m1 = np.mean(dxhat, axis=-1, keepdims=True, dtype=np.float64)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True, dtype=np.float64)
    dx = (inv_std * (dxhat - m1 - xhat * m2)).astype(x.data.dtype)
    return dx, dgain, dbias


register_op("layer_norm", _layer_norm_backward)


# ---------------------------------------------------------------------------
# Lookup and loss ops.

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    out = np.ascontiguousarray(table.data[ids])
    return _result(out, "embedding", (table,), {"ids": ids})


def _embedding_backward(node, g):
    table = node.parents[0]
    ids = node.ctx["ids"]
    gt = np.zeros_like(table.data)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
    return (gt,)


register_op("embedding", _embedding_backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over all positions of integer targets."""
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.data.shape[:-1]}"
        )
    v = logits.data.shape[-1]
    if targets.size == 0:
        raise ContractError("cross_entropy requires at least one target")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target index out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    m = np.max(flat, axis=-1, keepdims=True)
    shifted = (flat - m).astype(np.float64)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    picked = shifted[np.arange(flat.shape[0]), tgt]
    loss = np.mean(lse - picked)
    out = np.asarray(loss, dtype=logits.data.dtype)
    probs = np.exp(shifted - lse[:, None]).astype(logits.data.dtype)
    return _result(out, "cross_entropy", (logits,), {"probs": probs, "tgt": tgt})


def _cross_entropy_backward(node, g):
    logits = node.parents[0]
    probs = node.ctx["probs"].copy()
    tgt = node.ctx["tgt"]
    n = probs.shape[0]
    probs[np.arange(n), tgt] -= 1.0
    gl = probs * (float(g) / n)
    return (gl.reshape(logits.data.shape),)


register_op("cross_entropy", _cross_entropy_backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)
    return _result(out, "sum_all", (a,))


def _sum_all_backward(node, g):
    a = node.parents[0]
    return (np.full_like(a.data, float(g)),)


register_op("sum_all", _sum_all_backward)


def mean_all(a: Tensor) -> Tensor:
    out = np.asarray(np.mean(a.data, dtype=np.float64), dtype=a.data.dtype)
    return _result(out, "mean_all", (a,))


def _mean_all_backward(node, g):
    a = node.parents[0]
    return (np.full_like(a.data, float(g) / a.data.size),)


register_op("mean_all", _mean_all_backward)
