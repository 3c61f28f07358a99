"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine stores row-major numpy arrays and records, per produced tensor,
a closure that routes upstream gradients to its parents. `backward` on a
scalar loss walks the recorded graph in reverse topological order. Every
op validates shapes explicitly and rejects non-finite results (NaN/Inf is
an error state, never silently propagated).

Tensors are immutable once produced by an op. There is no shared global
tape, so independent graphs may be built and differentiated on distinct
threads; the grad-enabled switch used by `no_grad` is thread-local.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

LARGE_NEG = -1e9  # additive-mask value for disallowed attention positions

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """Non-finite value produced or consumed by an op."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside build no graph (forward values identical)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """N-dimensional float64 array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor data")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # own the buffer: g may be a view into another tensor's gradient
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, what: str) -> Tensor:
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


# -----------------------------------------------------------------------------
# Core ops
# -----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D (m,k)@(k,n) or stacked 3-D (B,m,k)@(B,k,n)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul batch dims {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul supports 2-D or stacked 3-D, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        else:
            if a.requires_grad:
                a._accumulate(g @ b.data.transpose(0, 2, 1))
            if b.requires_grad:
                b._accumulate(a.data.transpose(0, 2, 1) @ g)

    return _from_op(out_data, (a, b), backward, "matmul result")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the pre-broadcast operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; operands follow numpy broadcasting, `b` may be scalar."""
    a = _wrap(a)
    if isinstance(b, (int, float)):
        out_data = a.data + float(b)

        def backward_scalar(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g)

        return _from_op(out_data, (a,), backward_scalar, "add result")
    b = _wrap(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes {a.shape} + {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _from_op(out_data, (a, b), backward, "add result")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; operands follow numpy broadcasting, `b` may be scalar."""
    a = _wrap(a)
    if isinstance(b, (int, float)):
        s = float(b)
        out_data = a.data * s

        def backward_scalar(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g * s)

        return _from_op(out_data, (a,), backward_scalar, "mul result")
    b = _wrap(b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shapes {a.shape} * {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _from_op(out_data, (a, b), backward, "mul result")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; all other dims must agree."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty list")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat shapes {[t.shape for t in ts]} on axis {axis}")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _from_op(out_data, tuple(ts), backward, "concat result")


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along `axis`."""
    t = _wrap(t)
    n = t.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis size {n}")
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = t.data[idx].copy()

    def backward(g: np.ndarray) -> None:
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[idx] = g
            t._accumulate(full)

    return _from_op(out_data, (t,), backward, "slice result")


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = _wrap(t)
    out_data = t.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g.reshape(t.shape))

    return _from_op(out_data, (t,), backward, "reshape result")


def transpose(t: Tensor, axes: tuple[int, ...]) -> Tensor:
    t = _wrap(t)
    out_data = np.ascontiguousarray(t.data.transpose(axes))
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def backward(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g.transpose(inverse))

    return _from_op(out_data, (t,), backward, "transpose result")


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    t = _wrap(t)
    x = t.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def backward(g: np.ndarray) -> None:
        if t.requires_grad:
            sech2 = 1.0 - th * th
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            t._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

    return _from_op(out_data, (t,), backward, "gelu result")


def softmax_rows(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row-stabilized softmax over the last axis with an optional additive mask.

    Mask entries are 0 (allowed) or LARGE_NEG (disallowed); disallowed
    positions get weight exactly 0 under float64 underflow. A row with every
    position masked is an error.
    """
    x = _wrap(x)
    logits = x.data
    if additive_mask is not None:
        mask = np.asarray(additive_mask, dtype=np.float64)
        # row check runs on the pre-broadcast mask: cheap, and broadcasting
        # replicates rows so it covers the broadcast shape too
        if np.any(np.all(mask <= LARGE_NEG / 2, axis=-1)):
            raise ShapeError("softmax row with all positions masked")
        try:
            logits = logits + np.broadcast_to(mask, logits.shape)
        except ValueError as exc:
            raise ShapeError(f"mask shape {mask.shape} vs logits {logits.shape}") from exc
    shifted = logits - logits.max(axis=-1, keepdims=True)
    # exp only in the representable range: shifts below -700 (notably masked
    # positions at ~LARGE_NEG) get weight exactly 0 instead of a denormal,
    # which also avoids numpy's slow scalar-underflow path
    exps = np.zeros_like(shifted)
    np.exp(shifted, out=exps, where=shifted > -700.0)
    out_data = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return _from_op(out_data, (x,), backward, "softmax result")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector normalization over the last axis, then affine gain/bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs last-dim length >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} for d={d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gy - m1 - xhat * m2))

    return _from_op(out_data, (x, gain, bias), backward, "layer_norm result")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id; gradients scatter-add back."""
    table = _wrap(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")
    out_data = table.data[idx].copy()

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _from_op(out_data, (table,), backward, "embedding result")


def mse_loss(pred: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Mean squared error against a constant target; returns a scalar tensor."""
    pred = _wrap(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse shapes {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out_data = np.asarray((diff * diff).mean())

    def backward(g: np.ndarray) -> None:
        if pred.requires_grad:
            pred._accumulate((2.0 / diff.size) * diff * g)

    return _from_op(out_data, (pred,), backward, "mse result")


def mean_all(t: Tensor) -> Tensor:
    """Mean over all elements; returns a scalar tensor."""
    t = _wrap(t)
    out_data = np.asarray(t.data.mean())

    def backward(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(np.full_like(t.data, float(g) / t.size))

    return _from_op(out_data, (t,), backward, "mean result")


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with an additive token mask.

    q,k,v are (tokens, d) — or batched (B, tokens, d) — with d divisible by
    `heads`; mask is (tokens, tokens) of {0, LARGE_NEG}. Disallowed key
    positions receive weight exactly 0. Implemented as one fused tape node:
    the score/probability intermediates are short-lived and updated in place,
    which keeps this memory-bound op near the bandwidth floor.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.shape != k.shape or q.shape != v.shape or q.ndim not in (2, 3):
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    batched = q.ndim == 3
    b = q.shape[0] if batched else 1
    n, d = q.shape[-2], q.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} for {n} tokens")
    if np.any(np.all(mask <= LARGE_NEG / 2, axis=-1)):
        raise ShapeError("attention query row with all keys masked")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(arr: np.ndarray) -> np.ndarray:
        # (B, n, d) -> (B*heads, n, dh)
        return np.ascontiguousarray(
            arr.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        ).reshape(b * heads, n, dh)

    qh = split(q.data.reshape(b, n, d) * scale)
    kh = split(k.data.reshape(b, n, d))
    vh = split(v.data.reshape(b, n, d))

    probs = qh @ kh.transpose(0, 2, 1)
    np.subtract(probs, probs.max(axis=-1, keepdims=True), out=probs)
    np.add(probs, mask[None, :, :], out=probs)
    # exp(x) == 0 exactly below -746; clamping dodges the slow underflow path
    np.maximum(probs, -746.0, out=probs)
    np.exp(probs, out=probs)
    np.divide(probs, probs.sum(axis=-1, keepdims=True), out=probs)
    out_h = probs @ vh
    out_data = np.ascontiguousarray(
        out_h.reshape(b, heads, n, dh).transpose(0, 2, 1, 3)
    ).reshape(b, n, d)

    def backward(g: np.ndarray) -> None:
        gh = split(g.reshape(b, n, d))
        g_probs = gh @ vh.transpose(0, 2, 1)
        dot = (g_probs * probs).sum(axis=-1, keepdims=True)
        np.subtract(g_probs, dot, out=g_probs)
        np.multiply(g_probs, probs, out=g_probs)  # grad wrt raw scores
        def unsplit(arr: np.ndarray) -> np.ndarray:
            return np.ascontiguousarray(
                arr.reshape(b, heads, n, dh).transpose(0, 2, 1, 3)
            ).reshape(b, n, d)

        if q.requires_grad:
            gq = unsplit(g_probs @ kh) * scale
            q._accumulate(gq.reshape(q.shape))
        if k.requires_grad:
            gk = unsplit(g_probs.transpose(0, 2, 1) @ qh)
            k._accumulate(gk.reshape(k.shape))
        if v.requires_grad:
            gv = unsplit(probs.transpose(0, 2, 1) @ gh)
            v._accumulate(gv.reshape(v.shape))

    out = _from_op(out_data if batched else out_data.reshape(n, d), (q, k, v), backward, "attention result")
    return out


# -----------------------------------------------------------------------------
# Backward pass
# -----------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss, accumulating into `.grad`."""
    if loss.size != 1:
        raise ShapeError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def zero_grad(params) -> None:
    """Clear gradients on an iterable or dict of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# -----------------------------------------------------------------------------
# Optimizer
# -----------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second-moment accumulators keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> None:
    """One bias-corrected adaptive-moment update; frozen names are skipped."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if name in frozen or p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# -----------------------------------------------------------------------------
# Tensor container file (used for checkpoints and dataset samples)
# -----------------------------------------------------------------------------

_MAGIC = b"TNSR0001\n"


def write_tensors(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to a self-describing binary container.

    Layout: magic, u64-LE header length, JSON header [{name, shape}, ...]
    (sorted by name), then the raw little-endian float64 buffers in header
    order. Byte output is a pure function of the data, so round-trips are
    bit-exact and reruns produce identical files.
    """
    names = sorted(arrays)
    header = [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names]
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by `write_tensors`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in header:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return out
