"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. Gradients are obtained by recording every
primitive operation on an explicit :class:`Tape` and replaying the records
in reverse order. With no tape active, ops are plain forward computations.

Float64 is the default dtype and is what all tests and numeric oracles
use; float32 is supported for faster training. Tensors are treated as
immutable once recorded on a tape: optimizers replace ``.data`` wholesale
between steps instead of mutating buffers in place.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "tile_rows",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "pow_const",
    "clamp",
    "softmax",
    "sum_",
    "mean",
    "max_reduce",
    "topk",
    "conv2d",
    "zeros",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """Dense n-dimensional real array, optionally recorded on a tape.

    ``data`` is the value, ``grad`` the same-shape gradient buffer filled
    by :meth:`Tape.backward`, and ``op`` the name of the primitive that
    produced this tensor (``None`` for leaves).
    """

    __slots__ = ("data", "grad", "op")

    def __init__(self, data, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # Operator sugar; constants (floats, arrays) are accepted on either side.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops for reverse-mode replay.

    Records are appended in creation order, so parents always precede the
    ops that consume them and a single reversed pass distributes gradients
    to every recorded node. A tape is single-owner: enter it as a context
    manager around the forward pass, then call :meth:`backward`.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, parents, backward_fn):
        self._records.append((out, parents, backward_fn))

    def tensors(self):
        """All tensors recorded on this tape, in creation order."""
        for out, _, _ in self._records:
            yield out

    def backward(self, loss: Tensor):
        """Fill ``grad`` with d(loss)/d(node) for every node on the tape."""
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            raise ValueError("backward expects a scalar loss tensor")
        recorded = set()
        for out, parents, _ in self._records:
            recorded.add(id(out))
            out.grad = None
            for p in parents:
                p.grad = None
        if id(loss) not in recorded:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, _, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            backward_fn(out.grad)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _record(out, parents, backward_fn):
    tape = _active_tape()
    if tape is not None:
        tape.record(out, tuple(parents), backward_fn)


def _lift(x):
    """Split an operand into (value, Tensor-or-None).

    Python scalars stay scalars so they never upcast float32 operands.
    """
    if isinstance(x, Tensor):
        return x.data, x
    if isinstance(x, (bool, int, float)):
        return x, None
    return np.asarray(x), None


def _accumulate(t: Tensor, g):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a gradient back down to the pre-broadcast shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g.reshape(shape)


def _make(data, op, parents, backward_fn):
    out = Tensor(data)
    out.op = op
    live = [p for p in parents if p is not None]
    if live:
        _record(out, live, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules apply)

def add(a, b):
    ad, at = _lift(a)
    bd, bt = _lift(b)

    def backward_fn(g):
        if at is not None:
            _accumulate(at, _unbroadcast(g, ad.shape))
        if bt is not None:
            _accumulate(bt, _unbroadcast(g, bd.shape))

    return _make(ad + bd, "add", (at, bt), backward_fn)


def sub(a, b):
    ad, at = _lift(a)
    bd, bt = _lift(b)

    def backward_fn(g):
        if at is not None:
            _accumulate(at, _unbroadcast(g, ad.shape))
        if bt is not None:
            _accumulate(bt, _unbroadcast(-g, bd.shape))

    return _make(ad - bd, "sub", (at, bt), backward_fn)


def mul(a, b):
    ad, at = _lift(a)
    bd, bt = _lift(b)

    def backward_fn(g):
        if at is not None:
            _accumulate(at, _unbroadcast(g * bd, ad.shape))
        if bt is not None:
            _accumulate(bt, _unbroadcast(g * ad, bd.shape))

    return _make(ad * bd, "mul", (at, bt), backward_fn)


def div(a, b):
    ad, at = _lift(a)
    bd, bt = _lift(b)

    def backward_fn(g):
        if at is not None:
            _accumulate(at, _unbroadcast(g / bd, ad.shape))
        if bt is not None:
            _accumulate(bt, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(ad / bd, "div", (at, bt), backward_fn)


def neg(a):
    ad, at = _lift(a)

    def backward_fn(g):
        _accumulate(at, -g)

    return _make(-ad, "neg", (at,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b):
    ad, at = _lift(a)
    bd, bt = _lift(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul needs (m,k)x(k,n), got {ad.shape} x {bd.shape}")

    def backward_fn(g):
        if at is not None:
            _accumulate(at, g @ bd.T)
        if bt is not None:
            _accumulate(bt, ad.T @ g)

    return _make(ad @ bd, "matmul", (at, bt), backward_fn)


def transpose(a):
    ad, at = _lift(a)
    if ad.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {ad.shape}")

    def backward_fn(g):
        _accumulate(at, g.T)

    return _make(ad.T.copy(), "transpose", (at,), backward_fn)


def reshape(a, shape):
    ad, at = _lift(a)

    def backward_fn(g):
        _accumulate(at, g.reshape(ad.shape))

    return _make(ad.reshape(shape).copy(), "reshape", (at,), backward_fn)


def concat(parts, axis=0):
    lifted = [_lift(p) for p in parts]
    datas = [d for d, _ in lifted]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for piece, (_, t) in zip(np.split(g, splits, axis=axis), lifted):
            if t is not None:
                _accumulate(t, piece)

    return _make(np.concatenate(datas, axis=axis), "concat",
                 [t for _, t in lifted], backward_fn)


def slice_axis(a, axis, start, stop):
    ad, at = _lift(a)
    index = [slice(None)] * ad.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        gz = np.zeros_like(ad)
        gz[index] = g
        _accumulate(at, gz)

    return _make(ad[index].copy(), "slice", (at,), backward_fn)


def tile_rows(v, n):
    """Repeat a vector as the rows of an (n, d) matrix."""
    vd, vt = _lift(v)
    if vd.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got shape {vd.shape}")

    def backward_fn(g):
        _accumulate(vt, g.sum(axis=0))

    return _make(np.tile(vd, (n, 1)), "tile_rows", (vt,), backward_fn)


# ---------------------------------------------------------------------------
# pointwise nonlinearities

def exp(a):
    ad, at = _lift(a)
    out_data = np.exp(ad)

    def backward_fn(g):
        _accumulate(at, g * out_data)

    return _make(out_data, "exp", (at,), backward_fn)


def log(a):
    ad, at = _lift(a)

    def backward_fn(g):
        _accumulate(at, g / ad)

    return _make(np.log(ad), "log", (at,), backward_fn)


def sqrt(a):
    ad, at = _lift(a)
    out_data = np.sqrt(ad)

    def backward_fn(g):
        _accumulate(at, g * 0.5 / out_data)

    return _make(out_data, "sqrt", (at,), backward_fn)


def tanh(a):
    ad, at = _lift(a)
    out_data = np.tanh(ad)

    def backward_fn(g):
        _accumulate(at, g * (1.0 - out_data * out_data))

    return _make(out_data, "tanh", (at,), backward_fn)


def sigmoid(a):
    ad, at = _lift(a)
    out_data = 1.0 / (1.0 + np.exp(-ad))

    def backward_fn(g):
        _accumulate(at, g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (at,), backward_fn)


def relu(a):
    ad, at = _lift(a)

    def backward_fn(g):
        _accumulate(at, g * (ad > 0))

    return _make(np.maximum(ad, 0.0), "relu", (at,), backward_fn)


def pow_const(a, exponent):
    """Elementwise power with a constant exponent."""
    ad, at = _lift(a)
    e = float(exponent)

    def backward_fn(g):
        if e == 0.0:
            return
        if e == 1.0:
            _accumulate(at, g)
            return
        if e < 1.0:
            # subgradient 0 at x == 0 keeps fractional powers finite
            safe = np.where(ad == 0.0, 1.0, ad)
            d = np.where(ad == 0.0, 0.0, e * safe ** (e - 1.0))
        else:
            d = e * ad ** (e - 1.0)
        _accumulate(at, g * d)

    return _make(ad ** e, "pow", (at,), backward_fn)


def clamp(a, lo, hi):
    ad, at = _lift(a)

    def backward_fn(g):
        _accumulate(at, g * ((ad >= lo) & (ad <= hi)))

    return _make(np.clip(ad, lo, hi), "clamp", (at,), backward_fn)


# ---------------------------------------------------------------------------
# softmax and reductions

def softmax(a, axis):
    """Numerically stable softmax: each slice along ``axis`` sums to 1."""
    ad, at = _lift(a)
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(at, out_data * (g - inner))

    return _make(out_data, "softmax", (at,), backward_fn)


def sum_(a, axis=None):
    ad, at = _lift(a)

    def backward_fn(g):
        if axis is None:
            _accumulate(at, np.broadcast_to(g, ad.shape).copy())
        else:
            _accumulate(at, np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy())

    return _make(ad.sum(axis=axis), "sum", (at,), backward_fn)


def mean(a, axis=None):
    ad, at = _lift(a)
    n = ad.size if axis is None else ad.shape[axis]

    def backward_fn(g):
        if axis is None:
            _accumulate(at, np.broadcast_to(g / n, ad.shape).copy())
        else:
            _accumulate(at, np.broadcast_to(np.expand_dims(g, axis) / n, ad.shape).copy())

    return _make(ad.mean(axis=axis), "mean", (at,), backward_fn)


def max_reduce(a, axis):
    """Max along an axis; gradient routes to the first argmax on ties."""
    ad, at = _lift(a)
    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out_data = np.take_along_axis(ad, idx, axis=axis).squeeze(axis=axis)

    def backward_fn(g):
        gz = np.zeros_like(ad)
        np.put_along_axis(gz, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(at, gz)

    return _make(out_data, "max", (at,), backward_fn)


def topk(a, k, axis=-1):
    """Largest k entries along an axis, ties broken by ascending index.

    Returns (values, indices); gradients flow to the selected entries
    only, never through the indices themselves.
    """
    ad, at = _lift(a)
    order = np.argsort(-ad, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    out_data = np.take_along_axis(ad, idx, axis=axis)

    def backward_fn(g):
        gz = np.zeros_like(ad)
        np.put_along_axis(gz, idx, g, axis=axis)
        _accumulate(at, gz)

    return _make(out_data, "topk", (at,), backward_fn), idx


# ---------------------------------------------------------------------------
# convolution

def conv2d(image, kernel, bias, kernel_size=3, stride=2, padding=1):
    """2-D convolution over an (H, W, Cin) image.

    ``kernel`` is flattened to (kernel_size**2 * Cin, Cout) with rows in
    (dy, dx, channel) order; output is (Hout, Wout, Cout).
    """
    xd, xt = _lift(image)
    kd, kt = _lift(kernel)
    bd, bt = _lift(bias)
    if xd.ndim != 3:
        raise DimensionError(f"conv2d expects an (H, W, C) image, got shape {xd.shape}")
    ks = kernel_size
    h, w, cin = xd.shape
    if kd.shape[0] != ks * ks * cin:
        raise DimensionError(
            f"kernel has {kd.shape[0]} rows, expected {ks * ks * cin}")
    cout = kd.shape[1]
    hout = (h + 2 * padding - ks) // stride + 1
    wout = (w + 2 * padding - ks) // stride + 1
    if hout < 1 or wout < 1:
        raise DimensionError(f"image {xd.shape} too small for kernel {ks}")

    xp = np.pad(xd, ((padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (ks, ks, cin))
    windows = windows[::stride, ::stride, 0]
    cols = windows.reshape(hout * wout, ks * ks * cin)
    out_data = (cols @ kd + bd).reshape(hout, wout, cout)

    def backward_fn(g):
        gf = g.reshape(hout * wout, cout)
        if bt is not None:
            _accumulate(bt, gf.sum(axis=0))
        if kt is not None:
            _accumulate(kt, cols.T @ gf)
        if xt is not None:
            gcols = (gf @ kd.T).reshape(hout, wout, ks, ks, cin)
            gpad = np.zeros_like(xp)
            for dy in range(ks):
                for dx in range(ks):
                    gpad[dy:dy + stride * hout:stride,
                         dx:dx + stride * wout:stride] += gcols[:, :, dy, dx, :]
            if padding:
                gpad = gpad[padding:padding + h, padding:padding + w]
            _accumulate(xt, gpad.copy())

    return _make(out_data, "conv2d", (xt, kt, bt), backward_fn)


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype))
