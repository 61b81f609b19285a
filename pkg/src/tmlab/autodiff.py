"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a dense float array; every op records its parents and a
vector-Jacobian product on a tape implied by the parent links.
`backward` walks the graph once in reverse topological order. Training
runs in float32; float64 is used for finite-difference gradient checks.

Calling backward twice on the same scalar raises: grads from separate
losses do not silently accumulate here.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from tmlab.errors import DataError
from tmlab.fileio import atomic_write_bytes

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Operator sugar; the functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return tslice(self, key)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DataError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_shapes("add", a.data, b.data)
    out = a.data + b.data
    return _from_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_shapes("sub", a.data, b.data)
    out = a.data - b.data
    return _from_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_shapes("mul", a.data, b.data)
    out = a.data * b.data
    return _from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_shapes("div", a.data, b.data)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return _from_op(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _from_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype)
    return _from_op(s, (a,), lambda g: (g * s * (1 - s),))


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _from_op(out, (a,), lambda g: (g / a.data,))


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient is zero where the floor binds."""
    mask = a.data >= lo
    out = np.maximum(a.data, np.asarray(lo, dtype=a.data.dtype))
    return _from_op(out, (a,), lambda g: (g * mask,))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    out = np.broadcast_to(a.data, shape)
    return _from_op(out.copy(), (a,), lambda g: (_unbroadcast(g, old),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes."""
    return _from_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _from_op(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def tslice(a: Tensor, key) -> Tensor:
    out = a.data[key]
    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        return (buf,)
    return _from_op(out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True),)
    return _from_op(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Linear algebra, lookups, normalizations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DataError(f"matmul: operands must be >= 2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DataError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data
    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb
    return _from_op(out, (a, b), vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DataError(f"embedding_lookup: id out of range for table of {table.data.shape[0]} rows")
    out = table.data[ids]
    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return (buf,)
    return _from_op(out, (table,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    s = np.exp(x - x.max(axis=axis, keepdims=True))
    s = s / s.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)
    return _from_op(s, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)
    return _from_op(ls, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine map."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data
    def vjp(g):
        dy = g * gain.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * y).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx.astype(x.dtype), dgain, dbias
    return _from_op(out.astype(x.dtype), (a, gain, bias), vjp)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx)
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(a.data, expanded, axis=-1).squeeze(-1)
    def vjp(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, expanded, np.expand_dims(g, -1), axis=-1)
        return (buf,)
    return _from_op(out, (a,), vjp)


def index_select2(a: Tensor, idx0: np.ndarray, idx1: np.ndarray) -> Tensor:
    """out[...] = a[idx0[...], idx1[...], :] with scatter-add backward."""
    out = a.data[idx0, idx1]
    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (idx0, idx1), g)
        return (buf,)
    return _from_op(out, (a,), vjp)


def scatter_vocab(alpha: Tensor, token_ids: np.ndarray, vocab_size: int) -> Tensor:
    """Scatter-add attention mass onto vocabulary slots.

    alpha: (B, T, M) weights over memory slots; token_ids: (B, M) slot
    token ids. Returns (B, T, V) with out[b,t,v] = sum of alpha over
    slots holding token v.
    """
    B, T, M = alpha.data.shape
    bb = np.arange(B)[:, None, None]
    tt = np.arange(T)[None, :, None]
    ids3 = np.broadcast_to(token_ids[:, None, :], (B, T, M))
    out = np.zeros((B, T, vocab_size), dtype=alpha.data.dtype)
    np.add.at(out, (bb, tt, ids3), alpha.data)
    def vjp(g):
        return (np.take_along_axis(g, ids3, axis=2),)
    return _from_op(out, (alpha,), vjp)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Seeded inverted dropout; identity when not training or p == 0."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise DataError("dropout in training mode needs an rng")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask_bias: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask_bias) v over the trailing two axes.

    q: (..., Tq, d), k: (..., Tk, d), v: (..., Tk, dv). mask_bias is an
    additive constant (0 where allowed, large negative where masked).
    """
    d = q.data.shape[-1]
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    if mask_bias is not None:
        scores = add(scores, Tensor(mask_bias.astype(q.data.dtype)))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate .grad along the graph below `loss`.

    Parameters listed in `params` that were never touched receive a
    zero grad. A second backward through the same root raises.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise DataError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran on this graph; rebuild the loss to differentiate again")
    loss._done = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if not p.requires_grad or g is None:
                continue
            g = np.asarray(g, dtype=p.data.dtype)
            p.grad = g if p.grad is None else p.grad + g
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy_label_smoothed(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    pad_id: int = 0,
) -> Tensor:
    """Label-smoothed cross entropy averaged over non-pad targets.

    The smoothed target distribution is (1-eps) one-hot plus eps uniform
    over the whole vocabulary; smoothing 0 is plain NLL.
    """
    if not 0.0 <= smoothing < 1.0:
        raise DataError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    V = logits.data.shape[-1]
    if targets.size and targets.max() >= V:
        raise DataError(f"target id {int(targets.max())} out of range for vocab {V}")
    mask = (targets != pad_id)
    n = int(mask.sum())
    if n == 0:
        raise DataError("all targets are padding; nothing to average")
    lsm = log_softmax(logits, axis=-1)
    nll = neg(gather_last(lsm, targets))
    per_tok = nll if smoothing == 0.0 else add(
        mul(nll, 1.0 - smoothing), mul(neg(tmean(lsm, axis=-1)), smoothing)
    )
    masked = mul(per_tok, Tensor(mask.astype(logits.data.dtype)))
    return mul(tsum(masked), 1.0 / n)


def nll_from_probs(
    probs: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    pad_id: int = 0,
    floor: float = 1e-9,
) -> Tensor:
    """Same loss but for models that emit probabilities (mixtures).

    Probabilities are floored before the log so exact zeros from copy
    distributions cannot produce infinities.
    """
    targets = np.asarray(targets)
    mask = (targets != pad_id)
    n = int(mask.sum())
    if n == 0:
        raise DataError("all targets are padding; nothing to average")
    logp = tlog(clip_min(probs, floor))
    nll = neg(gather_last(logp, targets))
    per_tok = nll if smoothing == 0.0 else add(
        mul(nll, 1.0 - smoothing), mul(neg(tmean(logp, axis=-1)), smoothing)
    )
    masked = mul(per_tok, Tensor(mask.astype(probs.data.dtype)))
    return mul(tsum(masked), 1.0 / n)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moments plus hyperparameters; step count t starts at 0."""

    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], lr: float = 7e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> dict[str, Tensor]:
    """One bias-corrected update; mutates params in place and returns them."""
    state.t += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise DataError(f"adam_step: shape drift for '{name}'")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / np.sqrt(v / c2 + state.eps)
    return params


def lr_inverse_sqrt(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to base_lr, then inverse square-root decay."""
    step = max(step, 1)
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * math.sqrt(warmup / step)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# ---------------------------------------------------------------------------
# Checkpoint container: "TMLAB1" magic, JSON manifest, little-endian blob
# ---------------------------------------------------------------------------

_MAGIC = b"TMLAB1\n"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise DataError(f"save_arrays: unsupported dtype {arr.dtype} for '{name}'")
        raw = arr.astype(_DTYPES[arr.dtype.name]).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob.extend(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    payload = _MAGIC + f"{len(header)}\n".encode("ascii") + header + bytes(blob)
    atomic_write_bytes(path, payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise DataError(f"{path}: not a TMLAB1 checkpoint")
    rest = raw[len(_MAGIC):]
    nl = rest.index(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + hlen].decode("utf-8"))
    blob = rest[nl + 1 + hlen :]
    arrays = {}
    for e in header["tensors"]:
        buf = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"])
    return arrays, header["meta"]
