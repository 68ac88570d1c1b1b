"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs in 64-bit so analytic gradients can be checked against
central finite differences at tight tolerances. Ops record themselves on
the active Graph (a flat tape); backward walks the tape in reverse append
order, which is always a valid topological order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "silu", "relu", "clamp",
    "matmul", "conv2d", "avg_pool2d", "upsample2d",
    "tsum", "tmean", "dot", "l2_norm", "softmax", "log_softmax",
    "reshape", "transpose",
    "elementwise", "contract",
    "finite_diff_check",
    "ELEMENTWISE_OPS", "CONTRACT_OPS",
]

_ACTIVE: "Graph | None" = None


class Tensor:
    """A contiguous float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _make(cls, arr, requires_grad):
        # Internal fast path: `arr` is already a float64 ndarray owned by an op.
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the tape."""
        return Tensor._make(self.data, False)

    def copy(self) -> "Tensor":
        return Tensor._make(self.data.copy(), False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic routes through the module-level ops.
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)


class Graph:
    """Append-only tape of recorded ops, used as a context manager.

    Ops executed while a Graph is active append (output, backward_fn,
    inputs) nodes. `backward` clears every gradient buffer the tape has
    touched, seeds the root with 1, and applies backward functions in
    strict reverse append order, so one tape supports several backward
    passes (one per scalar root).
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None
        return False

    def record(self, out, backward_fn, inputs):
        self.nodes.append((out, backward_fn, inputs))

    def zero_grads(self):
        for out, _fn, inputs in self.nodes:
            out.grad = None
            for t in inputs:
                t.grad = None

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(leaf) into .grad of every participating tensor."""
        if root.data.size != 1:
            raise ValueError("backward root must be scalar")
        self.zero_grads()
        root.grad = np.ones_like(root.data)
        for out, backward_fn, _inputs in reversed(self.nodes):
            if out.grad is not None:
                backward_fn(out.grad)


class no_grad:
    """Suspend tape recording inside an active Graph."""

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._prev
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g):
    # Non-inplace accumulation; first write may alias an upstream buffer,
    # which is safe because rebinding (not mutation) handles later adds.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing trailing-dimension broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _out(data, inputs, backward_fn):
    # Gradient tracking exists only while a Graph is recording.
    rg = _ACTIVE is not None and any(t.requires_grad for t in inputs)
    out = Tensor._make(data, rg)
    if rg:
        _ACTIVE.record(out, backward_fn, inputs)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))
    return _out(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))
    return _out(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(b.data * g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(a.data * g, b.data.shape))
    return _out(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by zero")
    inv = 1.0 / b.data
    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * inv, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * a.data * inv * inv, b.data.shape))
    return _out(a.data * inv, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    def backward(g):
        if a.requires_grad:
            _acc(a, -g)
    return _out(-a.data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    if not np.all(np.isfinite(e)):
        raise OverflowError("exp overflow")
    def backward(g):
        if a.requires_grad:
            _acc(a, g * e)
    return _out(e, (a,), backward)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log of non-positive value")
    def backward(g):
        if a.requires_grad:
            _acc(a, g / a.data)
    return _out(np.log(a.data), (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt of negative value")
    r = np.sqrt(a.data)
    def backward(g):
        if a.requires_grad:
            if np.any(r == 0.0):
                raise ZeroDivisionError("sqrt gradient at zero is unbounded")
            _acc(a, g * (0.5 / r))
    return _out(r, (a,), backward)


def _sigmoid(x):
    # exp(-|x|) <= 1 keeps both branches finite for any input.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    def backward(g):
        if a.requires_grad:
            _acc(a, g * (s * (1.0 + a.data * (1.0 - s))))
    return _out(a.data * s, (a,), backward)


def relu(a):
    a = as_tensor(a)
    def backward(g):
        # relu'(0) is defined as 0.
        if a.requires_grad:
            _acc(a, g * (a.data > 0.0))
    return _out(np.maximum(a.data, 0.0), (a,), backward)


def clamp(a, lo: float, hi: float):
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp bounds out of order: {lo} > {hi}")
    def backward(g):
        # Zero gradient outside [lo, hi], identity inside (bounds included).
        if a.requires_grad:
            _acc(a, g * ((a.data >= lo) & (a.data <= hi)))
    return _out(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# contraction / structural ops


def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires rank >= 2 operands")
    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
    return _out(a.data @ b.data, (a, b), backward)


def _pad_spatial(x, p):
    if p == 0:
        return x
    B, C, H, W = x.shape
    buf = np.zeros((B, C, H + 2 * p, W + 2 * p))
    buf[:, :, p:p + H, p:p + W] = x
    return buf


def _im2col(xp, k, H, W):
    B, C = xp.shape[0], xp.shape[1]
    sB, sC, sH, sW = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, H, W, C, k, k), strides=(sB, sH, sW, sC, sH, sW))
    return view.reshape(B, H * W, C * k * k)


def _conv_raw(x4, w4):
    """Correlation with zero padding that preserves resolution; no taping."""
    B, C, H, W = x4.shape
    F, _, k, _ = w4.shape
    cols = _im2col(_pad_spatial(x4, k // 2), k, H, W)
    if B == 1:
        out = w4.reshape(F, C * k * k) @ cols.reshape(H * W, C * k * k).T
        return out.reshape(1, F, H, W), cols
    out = cols @ w4.reshape(F, C * k * k).T           # (B, HW, F)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(B, F, H, W)
    return out, cols


def conv2d(x, w, bias=None):
    """2-D convolution, stride 1, odd kernel, zero padding keeps resolution.

    x: (B, C, H, W), w: (F, C, k, k), bias: (F,) optional.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x (B,C,H,W) and w (F,C,k,k)")
    B, C, H, W = x.data.shape
    F, Cw, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd-sized, got {k}x{k2}")
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (F,):
            raise ValueError("conv2d bias must have shape (F,)")

    out_data, cols = _conv_raw(x.data, w.data)
    if bias is not None:
        out_data += bias.data.reshape(1, F, 1, 1)

    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if w.requires_grad:
            gw = g.reshape(B, F, H * W).transpose(1, 0, 2).reshape(F, B * H * W) \
                if B > 1 else g.reshape(F, H * W)
            cols2 = cols.reshape(B * H * W, C * k * k)
            _acc(w, (gw @ cols2).reshape(F, C, k, k))
        if bias is not None and bias.requires_grad:
            _acc(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # Input gradient is a correlation with the flipped, transposed kernel.
            wt = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            _acc(x, _conv_raw(g, wt)[0])

    return _out(out_data, inputs, backward)


def avg_pool2d(x, k: int):
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("avg_pool2d expects (B,C,H,W)")
    B, C, H, W = x.data.shape
    if H % k or W % k:
        raise ValueError(f"pool size {k} does not divide spatial dims {H}x{W}")
    h, w = H // k, W // k
    out_data = x.data.reshape(B, C, h, k, w, k).mean(axis=(3, 5))
    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                g[:, :, :, None, :, None] / (k * k), (B, C, h, k, w, k))
            _acc(x, gx.reshape(B, C, H, W))
    return _out(out_data, (x,), backward)


def upsample2d(x, k: int):
    """Nearest-neighbour upsampling by an integer factor."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("upsample2d expects (B,C,H,W)")
    B, C, H, W = x.data.shape
    out_data = np.broadcast_to(
        x.data[:, :, :, None, :, None], (B, C, H, k, W, k)
    ).reshape(B, C, H * k, W * k)
    out_data = np.ascontiguousarray(out_data)
    def backward(g):
        if x.requires_grad:
            _acc(x, g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)))
    return _out(out_data, (x,), backward)


def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)
    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.data.shape))
    return _out(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)
    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g / n, a.data.shape))
    return _out(out_data, (a,), backward)


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError("dot expects equal-length 1-D tensors")
    def backward(g):
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)
    return _out(np.asarray(a.data @ b.data), (a, b), backward)


def l2_norm(a):
    """Euclidean norm over all elements, as a scalar tensor."""
    a = as_tensor(a)
    n = np.asarray(np.sqrt((a.data * a.data).sum()))
    def backward(g):
        if a.requires_grad:
            if n == 0.0:
                raise ZeroDivisionError("l2_norm gradient at zero is unbounded")
            _acc(a, (g / n) * a.data)
    return _out(n, (a,), backward)


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    def backward(g):
        if a.requires_grad:
            _acc(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))
    return _out(s, (a,), backward)


def log_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse
    def backward(g):
        if a.requires_grad:
            _acc(a, g - np.exp(out_data) * g.sum(axis=-1, keepdims=True))
    return _out(out_data, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    def backward(g):
        if a.requires_grad:
            _acc(a, g.reshape(old))
    return _out(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    def backward(g):
        if a.requires_grad:
            _acc(a, g.transpose(inv))
    return _out(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


# ---------------------------------------------------------------------------
# dispatch tables (stable names for generic iteration in tests and tooling)

ELEMENTWISE_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "sqrt": sqrt, "silu": silu, "relu": relu,
    "clamp": clamp,
}

CONTRACT_OPS = {
    "matmul": matmul, "conv2d": conv2d, "avg_pool2d": avg_pool2d,
    "upsample2d": upsample2d, "sum": tsum, "mean": tmean, "dot": dot,
    "l2_norm": l2_norm, "softmax": softmax, "log_softmax": log_softmax,
    "reshape": reshape, "transpose": transpose,
}


def elementwise(op_kind: str, a, b=None, **params):
    """Apply a named elementwise op; binary kinds require `b`."""
    try:
        fn = ELEMENTWISE_OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op_kind} is binary")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    return fn(a, **params)


def contract(op_kind: str, a, b=None, **params):
    """Apply a named contraction/structural op."""
    try:
        fn = CONTRACT_OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown contract op {op_kind!r}") from None
    if b is not None:
        return fn(a, b, **params)
    return fn(a, **params)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(loss_fn, x: Tensor, h: float = 1e-5, indices=None) -> float:
    """Compare analytic d(loss)/dx against central finite differences.

    Returns max over checked coordinates of
    |analytic - numeric| / max(1, |numeric|). `loss_fn` must map a Tensor
    to a scalar Tensor and be deterministic. `indices` optionally restricts
    the check to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Graph() as g:
        loss = loss_fn(probe)
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("loss_fn must return a scalar tensor")
        g.backward(loss)
    analytic = (np.zeros_like(probe.data) if probe.grad is None
                else np.asarray(probe.grad)).reshape(-1)

    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in indices:
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            f_hi = loss_fn(Tensor._make(bumped.reshape(x.data.shape), False)).item()
            bumped[i] = flat[i] - h
            f_lo = loss_fn(Tensor._make(bumped.reshape(x.data.shape), False)).item()
            numeric = (f_hi - f_lo) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
