"""Dense tensors with reverse-mode automatic differentiation.

Everything else in the package is built on this module. Design points:

* numpy arrays are the storage and arithmetic substrate; the graph recording,
  backward rules, and gradient bookkeeping live here.
* Tensors are immutable once produced by an operation. Gradients accumulate
  by summation across multiple uses (required by skip connections).
* Training runs in float32; gradient oracles run the same graph in float64.
  Binary operations refuse mixed dtypes so precision never degrades silently.
* Broadcasting is limited to numpy's trailing-dimension rules, and gradients
  of broadcast operands are summed back down to the operand shape.
* backward() clears the recorded graph, so a graph can be differentiated once.

Some reductions accept order_canonical=True: the summands are sorted before
being added, which makes the result a function of the multiset of values
rather than their order. The group transformer uses this so that reordering
images in a group changes outputs by exactly zero, not merely by float noise.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ComputeError, ShapeError, UsageError

Shape = tuple[int, ...]

_EPS_DENOM = 1e-8  # relative-error guard in finite_diff_check


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    Scalars are represented with shape (1,); shapes are never empty.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) else np.float32
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # ---- factories ------------------------------------------------------

    @staticmethod
    def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad)

    @staticmethod
    def full(shape: Sequence[int], value: float, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.full(tuple(shape), value, dtype=dtype), requires_grad)

    @staticmethod
    def uniform(
        shape: Sequence[int],
        lo: float,
        hi: float,
        seed: int | np.random.Generator,
        dtype=np.float32,
        requires_grad: bool = False,
    ) -> "Tensor":
        """Seeded uniform fill; identical (seed, shape) gives identical bits."""
        _check_shape(shape)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        data = rng.uniform(lo, hi, size=tuple(shape)).astype(dtype)
        return Tensor(data, requires_grad)

    @staticmethod
    def from_data(data, shape: Sequence[int] | None = None, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        arr = np.asarray(data, dtype=dtype)
        if shape is not None:
            _check_shape(shape)
            if arr.size != int(np.prod(shape)):
                raise ShapeError(f"explicit data has {arr.size} values, shape {tuple(shape)} needs {int(np.prod(shape))}")
            arr = arr.reshape(tuple(shape))
        return Tensor(arr, requires_grad)

    # ---- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias another node's buffer (reshape/transpose views)
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            np.add(self.grad, g, out=self.grad)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op}, grad={self.requires_grad})"

    # ---- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce(self, "sum", axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce(self, "mean", axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _check_shape(shape: Sequence[int]) -> None:
    shape = tuple(shape)
    if len(shape) == 0:
        raise ShapeError("shape must be non-empty")
    for n in shape:
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {shape}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}; cast explicitly")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc
    return a, b


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


# ---- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if np.any(b.data == 0):
        raise ComputeError("division by zero")
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _node(data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable in both tails
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _node(out, (x,), backward, "sigmoid")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return _node(data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ComputeError("log of non-positive value; clamp first")
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _node(data, (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ComputeError("sqrt of negative value")
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return _node(data, (x,), backward, "sqrt")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise UsageError(f"clamp bounds inverted: {lo} > {hi}")
    data = np.clip(x.data, lo, hi)

    def backward(g):
        # zero subgradient outside the open interval
        x._accumulate(g * ((x.data > lo) & (x.data < hi)))

    return _node(data, (x,), backward, "clamp")


# ---- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor, order_canonical: bool = False) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise UsageError("matmul needs Tensor operands")
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}")
    if a.data.ndim == b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    elif a.data.ndim == b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"batched matmul shapes differ: {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul supports rank-2 or equal-batch rank-3, got {a.shape} x {b.shape}")

    if order_canonical:
        # sum over the contraction axis in sorted order so the result depends
        # only on the multiset of products, not on token order
        prod = a.data[..., :, :, None] * b.data[..., None, :, :]
        data = np.sort(prod, axis=-2).sum(axis=-2)
    else:
        data = a.data @ b.data

    def backward(g):
        if a.data.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        else:
            if a.requires_grad:
                a._accumulate(g @ b.data.transpose(0, 2, 1))
            if b.requires_grad:
                b._accumulate(a.data.transpose(0, 2, 1) @ g)

    return _node(data, (a, b), backward, "matmul")


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (really cross-correlation, the deep-learning convention).

    x: [C_in, H, W]; w: [C_out, C_in, kH, kW]; bias: [C_out].
    Output spatial size: floor((H + 2*pad - kH)/stride) + 1.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(f"conv2d ranks: x{x.shape} w{w.shape} bias{bias.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if bias.shape[0] != cout:
        raise ShapeError(f"bias length {bias.shape[0]} != C_out {cout}")
    if stride < 1:
        raise UsageError("stride must be >= 1")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    cols = windows.reshape(cin * kh * kw, ho * wo)  # copies out of the view
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (w2 @ cols + bias.data[:, None]).reshape(cout, ho, wo)

    def backward(g):
        g2 = g.reshape(cout, ho * wo)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, kh, kw, ho, wo)
            dxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            x._accumulate(dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp)

    return _node(out, (x, w, bias), backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    grouped = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = grouped.argmax(axis=3)
    out = np.take_along_axis(grouped, idx[..., None], axis=3)[..., 0]

    def backward(g):
        dg = np.zeros_like(grouped)
        np.put_along_axis(dg, idx[..., None], g[..., None], axis=3)
        x._accumulate(dg.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))

    return _node(out, (x,), backward, "maxpool2")


_RESIZE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for bilinear resize, align-corners=false.

    Output center i samples source coordinate (i + 0.5)/scale - 0.5, clamped
    at the borders; each row holds the two interpolation weights.
    """
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    scale = n_out / n_in
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) / scale - 0.5
        i0 = math.floor(src)
        frac = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m = m.astype(dtype)
    _RESIZE_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample [C,H,W] to [C, H*factor, W*factor] by bilinear interpolation."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects [C,H,W], got {x.shape}")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise UsageError(f"factor must be a positive integer, got {factor!r}")
    c, h, w = x.shape
    rows = _resize_matrix(h, h * factor, x.data.dtype)
    cols = _resize_matrix(w, w * factor, x.data.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        x._accumulate(np.matmul(np.matmul(rows.T, g), cols))

    return _node(out, (x,), backward, "bilinear_upsample")


def pool_or_resize(x: Tensor, mode: str, factor: int | None = None) -> Tensor:
    """Spec-shaped dispatcher over maxpool2 / bilinear_upsample(factor)."""
    if mode == "maxpool2":
        return maxpool2(x)
    if mode == "bilinear_upsample":
        if factor is None:
            raise UsageError("bilinear_upsample needs a factor")
        return bilinear_upsample(x, factor)
    raise UsageError(f"unknown pool_or_resize mode {mode!r}")


# ---- normalization and reductions ------------------------------------------


def softmax(x: Tensor, axis: int = -1, order_canonical: bool = False) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if order_canonical:
        den = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    else:
        den = e.sum(axis=axis, keepdims=True)
    out = e / den

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (g - inner))

    return _node(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis: (x - mu)/sqrt(var + eps) * gain + bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be [{d}], got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx_mean = gx.mean(axis=-1, keepdims=True)
            gxxhat_mean = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - gx_mean - xhat * gxxhat_mean))

    return _node(out, (x, gain, bias), backward, "layer_norm")


def reduce(x: Tensor, mode: str, axis: int | None = None, order_canonical: bool = False) -> Tensor:
    if mode not in ("sum", "mean"):
        raise UsageError(f"reduce mode must be sum|mean, got {mode!r}")
    nd = x.data.ndim
    if axis is not None and not -nd <= axis < nd:
        raise ShapeError(f"reduce axis {axis} invalid for shape {x.shape}")

    if axis is None:
        count = x.data.size
        flat = np.sort(x.data, axis=None) if order_canonical else x.data
        total = flat.sum(dtype=x.data.dtype)
        data = np.asarray([total], dtype=x.data.dtype)
    else:
        count = x.shape[axis]
        src = np.sort(x.data, axis=axis) if order_canonical else x.data
        data = src.sum(axis=axis, dtype=x.data.dtype)
        if data.ndim == 0:
            data = data.reshape(1)
    if mode == "mean":
        data = data / np.asarray(count, dtype=x.data.dtype)

    def backward(g):
        if mode == "mean":
            g = g * np.asarray(1.0 / count, dtype=x.data.dtype)
        if axis is None or nd == 1:
            x._accumulate(np.full_like(x.data, g.reshape(-1)[0]))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis % nd), x.shape))

    return _node(data, (x,), backward, "reduce_" + mode)


# ---- structure ops ----------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise UsageError("concat of zero tensors")
    dtype = ts[0].data.dtype
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts:
        if t.data.dtype != dtype:
            raise UsageError("concat with mixed dtypes")
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ShapeError(f"concat shapes incompatible along axis {axis}: {[t.shape for t in ts]}")
    data = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(start, stop)
                t._accumulate(g[tuple(sl)])

    return _node(data, tuple(ts), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    nd = x.data.ndim
    ax = axis % nd
    if start < 0 or length < 1 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {ax} of {x.shape}")
    sl = [slice(None)] * nd
    sl[ax] = slice(start, start + length)
    data = x.data[tuple(sl)].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[tuple(sl)] = g
        x._accumulate(dx)

    return _node(data, (x,), backward, "narrow")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _check_shape(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.data.ndim}")
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return _node(data, (x,), backward, "transpose")


# ---- backward driver ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; frees the tape afterwards."""
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any requires_grad tensor")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # the tape is single use: clear it so memory is released and a second
    # backward over the same graph is impossible
    for node in topo:
        node._parents = ()
        node._backward = None


# ---- gradient oracle ----------------------------------------------------------


class GradCheckReport:
    """Outcome of finite_diff_check: worst relative error and pass flag."""

    __slots__ = ("max_rel_err", "passed", "worst_index", "analytic", "numeric")

    def __init__(self, max_rel_err: float, passed: bool, worst_index: tuple, analytic: float, numeric: float):
        self.max_rel_err = max_rel_err
        self.passed = passed
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self) -> str:  # pragma: no cover
        return (
            f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, passed={self.passed}, "
            f"worst_index={self.worst_index}, analytic={self.analytic:.6e}, numeric={self.numeric:.6e})"
        )


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward()'s gradient of f at x against central differences.

    f must be deterministic and scalar-valued. x must be float64: the oracle
    is only trustworthy in wide precision.
    """
    if h <= 0:
        raise UsageError("h must be positive")
    if x.data.dtype != np.float64:
        raise UsageError("finite_diff_check requires a float64 input tensor")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    y = f(probe)
    if y.data.size != 1:
        raise UsageError("finite_diff_check needs a scalar-valued f")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    max_rel = 0.0
    worst = (0,)
    worst_a = float(analytic.reshape(-1)[0]) if analytic.size else 0.0
    worst_n = worst_a
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        base = flat[i]
        plus = x.data.copy().reshape(-1)
        plus[i] = base + h
        minus = x.data.copy().reshape(-1)
        minus[i] = base - h
        fp = f(Tensor(plus.reshape(x.shape), dtype=np.float64)).item()
        fm = f(Tensor(minus.reshape(x.shape), dtype=np.float64)).item()
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), _EPS_DENOM)
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(i, x.shape)
            worst_a, worst_n = a, numeric
    return GradCheckReport(max_rel, max_rel <= tol, worst, worst_a, worst_n)
