"""Dense-tensor math with tape-based reverse-mode automatic differentiation.

Arrays are numpy ndarrays; the graph, gradient rules, and optimizer live
here. Training runs in float32; gradient checks build float64 tensors and
the ops preserve whatever dtype they are given.

A Tape is single-owner: one logical thread builds it and runs backward on
it. Ops executed without an active tape (or on inputs that do not require
gradients) are pure forward computations and safe to call concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Every op validates that its output is finite; flip this off only for
# throughput experiments.
FINITE_CHECKS = True


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class ContractError(RuntimeError):
    """An op precondition was violated (non-scalar loss, missing grads, ...)."""


class NumericsError(ArithmeticError):
    """A forward op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not FINITE_CHECKS or not np.issubdtype(arr.dtype, np.floating):
        return
    # One-pass probe: any NaN poisons the sum, +/-Inf survives or turns NaN.
    if not math.isfinite(float(arr.sum())):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericsError(f"{op}: {bad} non-finite value(s) in output of shape {arr.shape}")


class Tensor:
    """Dense n-dimensional array with optional gradient tracking.

    ``data`` is row-major; ``grad``, once populated by a backward pass, has
    the same shape. ``node_id`` is the handle assigned by the tape that most
    recently touched this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        if isinstance(data, np.ndarray):
            arr = data if dtype is None else data.astype(dtype)
        elif isinstance(data, np.generic):
            # numpy scalar (e.g. from arr.sum()): keep its dtype
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no graph connection."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Convenience arithmetic; scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class _TapeNode:
    __slots__ = ("op", "input_ids", "out_id", "backward")

    def __init__(self, op, input_ids, out_id, backward):
        self.op = op
        self.input_ids = input_ids
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered record of ops; inputs always precede consumers.

    Used as a context manager around a forward pass::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self._ids: dict[int, int] = {}
        self._tensors: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._next = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def _ensure_id(self, t: Tensor, produced: bool = False) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self._next
            self._next += 1
            self._ids[id(t)] = nid
            self._tensors[nid] = t
            t.node_id = nid
        if produced:
            self._produced.add(nid)
        return nid

    def backward(self, loss: Tensor) -> None:
        """Reverse-topological gradient accumulation from a scalar loss.

        Deposits gradients into ``.grad`` of every leaf tensor that requires
        one; leaves unreachable from the loss receive zeros.
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        loss_id = self._ids.get(id(loss))
        if loss_id is None or loss_id not in self._produced:
            raise ContractError("loss is not a node produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for iid, ig in zip(node.input_ids, node.backward(g)):
                if iid is None or ig is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = ig if acc is None else acc + ig

        for nid, t in self._tensors.items():
            if not t.requires_grad or nid in self._produced:
                continue
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g if t.grad is None else t.grad + g


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise ContractError("tape stack corrupted: exiting a tape that is not innermost")
    _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op: str, out: Tensor, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is None or not out.requires_grad:
        return out
    input_ids = tuple(
        tape._ensure_id(t) if t.requires_grad else None for t in inputs
    )
    out_id = tape._ensure_id(out, produced=True)
    tape.nodes.append(_TapeNode(op, input_ids, out_id, backward))
    return out


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _record("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    _check_finite(out.data, "scale")

    def bwd(g):
        return (g * s,)

    return _record("scale", out, (a,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    xd = x.data

    def bwd(g):
        return (g * (xd > 0),)

    return _record("relu", out, (x,), bwd)


def passthrough(x: Tensor, values: np.ndarray) -> Tensor:
    """Straight-through op: forward emits `values`, backward is identity on x.

    Used where a non-differentiable replacement (e.g. nearest-codeword
    snapping) should look like the identity to the gradient.
    """
    vals = np.asarray(values)
    if vals.shape != x.data.shape:
        raise DimensionError(
            f"passthrough values shape {vals.shape} != input shape {x.data.shape}")
    out = Tensor(vals.copy())
    _check_finite(out.data, "passthrough")

    def bwd(g):
        return (g,)

    return _record("passthrough", out, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))
    _check_finite(out.data, "gelu")

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    y = y.astype(xd.dtype, copy=False)
    out = Tensor(y)
    _check_finite(out.data, "sigmoid")

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", out, (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    _check_finite(out.data, "sum")
    xd_shape = x.data.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, xd_shape).copy(),)

    return _record("sum", out, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _record("transpose", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g, splits, axis=axis)

    return _record("concat", out, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(x.data[sl]))
    xshape = x.data.shape

    def bwd(g):
        full = np.zeros(xshape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _record("slice", out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands may carry identical leading batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)
    _check_finite(out.data, "matmul")

    def bwd(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record("matmul", out, (a, b), bwd)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather from an embedding table; indices are not differentiated."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = Tensor(table.data[idx])
    tshape = table.data.shape

    def bwd(g):
        dt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(dt, idx.ravel(), g.reshape(-1, tshape[-1]))
        return (dt,)

    return _record("embedding", out, (table,), bwd)


def gather_axis1(x: Tensor, indices: np.ndarray) -> Tensor:
    """Per-batch row gather: x[b, indices[b, k]] for x of shape (B, T, ...)."""
    idx = np.asarray(indices)
    xd = x.data
    if idx.ndim != 2 or idx.shape[0] != xd.shape[0]:
        raise DimensionError(f"gather_axis1: indices {idx.shape} vs data {xd.shape}")
    brow = np.arange(xd.shape[0])[:, None]
    out = Tensor(np.ascontiguousarray(xd[brow, idx]))
    xshape = xd.shape

    def bwd(g):
        dx = np.zeros(xshape, dtype=g.dtype)
        np.add.at(dx, (brow, idx), g)
        return (dx,)

    return _record("gather_axis1", out, (x,), bwd)


def fill_sequence(encoded: Tensor, visible_positions: np.ndarray, total: int) -> Tensor:
    """Scatter encoder output back onto the full token grid.

    ``encoded`` is (B, 1+V, D): row 0 is the encoded class token, rows 1..V
    correspond to ``visible_positions`` (B, V). Every position not listed is
    filled with the encoded class token, giving (B, total, D).
    """
    enc = encoded.data
    pos = np.asarray(visible_positions)
    if enc.ndim != 3 or pos.ndim != 2 or enc.shape[1] != pos.shape[1] + 1:
        raise ContractError(
            f"fill_sequence: encoded {enc.shape} inconsistent with positions {pos.shape}"
        )
    batch, _, dim = enc.shape
    brow = np.arange(batch)[:, None]
    full = np.broadcast_to(enc[:, 0:1, :], (batch, total, dim)).copy()
    full[brow, pos] = enc[:, 1:, :]
    out = Tensor(full)

    def bwd(g):
        de = np.empty_like(enc)
        de[:, 1:, :] = g[brow, pos]
        # class-token grad: every non-visible slot carried the class vector
        de[:, 0, :] = g.sum(axis=1) - de[:, 1:, :].sum(axis=1)
        return (de,)

    return _record("fill_sequence", out, (encoded,), bwd)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    if eps <= 0:
        raise ContractError("layernorm eps must be > 0")
    xd = x.data
    dim = xd.shape[-1]
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise DimensionError(
            f"layernorm affine params must be ({dim},), got {gamma.data.shape}/{beta.data.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    _check_finite(out.data, "layernorm")
    gd = gamma.data

    def bwd(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).reshape(-1, dim).sum(axis=0)
        dbeta = g.reshape(-1, dim).sum(axis=0)
        return dx, dgamma, dbeta

    return _record("layernorm", out, (x, gamma, beta), bwd)


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    _check_finite(out.data, "softmax")

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    ld = logits.data
    tgt = np.asarray(targets)
    if ld.ndim != 2 or tgt.shape != (ld.shape[0],):
        raise DimensionError(f"cross entropy: logits {ld.shape} vs targets {tgt.shape}")
    n_rows, n_classes = ld.shape
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_classes):
        raise IndexError(f"target out of range [0, {n_classes})")
    shifted = ld - ld.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logprob = shifted - np.log(z)
    out = Tensor(np.asarray(-logprob[np.arange(n_rows), tgt].mean(), dtype=ld.dtype))
    _check_finite(out.data, "softmax_cross_entropy")
    probs = e / z

    def bwd(g):
        d = probs.copy()
        d[np.arange(n_rows), tgt] -= 1.0
        return (d * (g / n_rows),)

    return _record("softmax_cross_entropy", out, (logits,), bwd)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale rows to unit L2 norm over the last axis; eps guards zero rows."""
    xd = x.data
    r = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = r + eps
    y = xd / denom
    out = Tensor(y)
    _check_finite(out.data, "l2_normalize")

    def bwd(g):
        s = (g * xd).sum(axis=-1, keepdims=True)
        return (g / denom - xd * (s / (np.maximum(r, 1e-30) * denom * denom)),)

    return _record("l2_normalize", out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise DimensionError(
            f"conv output dim not integral: size={size} kernel={k} stride={stride} pad={pad}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            out_h: int, out_w: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, out_h, out_w), (s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return win.reshape(b, c * kh * kw, out_h * out_w)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and kernel, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {xd.shape} kernel {wd.shape}")
    batch, cin, h, wdt = xd.shape
    cout, _, kh, kw = wd.shape
    out_h = _conv_out_dim(h, kh, stride, padding)
    out_w = _conv_out_dim(wdt, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, stride, out_h, out_w)
    w2 = wd.reshape(cout, cin * kh * kw)
    out = Tensor((w2 @ cols).reshape(batch, cout, out_h, out_w))
    _check_finite(out.data, "conv2d")
    xp_shape = xp.shape

    def bwd(g):
        g2 = g.reshape(batch, cout, out_h * out_w)
        dw = np.einsum("bop,bfp->of", g2, cols).reshape(wd.shape)
        dcols = (w2.T @ g2).reshape(batch, cin, kh, kw, out_h, out_w)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp
        return np.ascontiguousarray(dx), dw

    return _record("conv2d", out, (x, w), bwd)


def depthwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, padding 1; no channel mixing."""
    xd, wd = x.data, w.data
    if wd.ndim != 4 or wd.shape[1] != 1 or wd.shape[2:] != (3, 3):
        raise DimensionError(f"depthwise kernel must be (C,1,3,3), got {wd.shape}")
    if xd.ndim != 4 or xd.shape[1] != wd.shape[0]:
        raise DimensionError(f"depthwise channel mismatch: {xd.shape} vs {wd.shape}")
    batch, ch, h, wdt = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out_d = np.zeros_like(xd)
    # nine shifted accumulations; kernel tap (i,j) sees x shifted by (i-1, j-1)
    for i in range(3):
        for j in range(3):
            out_d += wd[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + h, j:j + wdt]
    out = Tensor(out_d)
    _check_finite(out.data, "depthwise_conv2d")

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for i in range(3):
            for j in range(3):
                # correlation backward: input grad uses the mirrored tap
                dx += wd[:, 0, i, j][None, :, None, None] * gp[:, :, 2 - i:2 - i + h, 2 - j:2 - j + wdt]
                dw[:, 0, i, j] = (g * xp[:, :, i:i + h, j:j + wdt]).sum(axis=(0, 2, 3))
        return dx, dw

    return _record("depthwise_conv2d", out, (x, w), bwd)


def zero_interleave(x: Tensor, stride: int) -> Tensor:
    """Insert stride-1 zeros between spatial elements (transposed-conv helper)."""
    xd = x.data
    batch, ch, h, w = xd.shape
    out_d = np.zeros((batch, ch, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=xd.dtype)
    out_d[:, :, ::stride, ::stride] = xd
    out = Tensor(out_d)

    def bwd(g):
        return (np.ascontiguousarray(g[:, :, ::stride, ::stride]),)

    return _record("zero_interleave", out, (x,), bwd)


def flip_hw(w: Tensor) -> Tensor:
    out = Tensor(np.ascontiguousarray(w.data[..., ::-1, ::-1]))

    def bwd(g):
        return (np.ascontiguousarray(g[..., ::-1, ::-1]),)

    return _record("flip_hw", out, (w,), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of (B,Cin,H,W) with kernel (Cin,Cout,kh,kw).

    Output spatial size is (H-1)*stride - 2*padding + k. Implemented as a
    zero-interleaved stride-1 cross-correlation with the flipped kernel, so
    gradients come for free from conv2d.
    """
    kh = w.data.shape[2]
    if stride > 1:
        x = zero_interleave(x, stride)
    wk = transpose(flip_hw(w), (1, 0, 2, 3))
    return conv2d(x, wk, stride=1, padding=kh - 1 - padding)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable parameters plus per-parameter Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self.params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        self._t[name] = 0
        return tensor

    def adopt(self, named: dict[str, Tensor]) -> None:
        for name, tensor in named.items():
            self.register(name, tensor)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def adam_step(self, lr: float = 3e-4, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Bias-corrected Adam over every registered parameter."""
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {name!r} has no gradient")
            if p.grad.shape != p.data.shape:
                raise ContractError(f"adam_step: grad shape mismatch for {name!r}")
            g = p.grad
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * (g * g)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
