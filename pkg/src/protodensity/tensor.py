"""Dense float64 tensor kernel with reverse-mode autodiff.

Every differentiable operation records its inputs and a backward closure on
the output node; calling ``backward()`` on a scalar result replays the tape
in reverse topological order. The op set is exactly what the counting model
and its losses need: elementwise arithmetic, sigmoid/relu/log, 2-D matmul,
reductions, indexing, row normalization, 1x1 and 3x3 convolutions, 2x2 max
pooling, and prototype distance maps. A central finite-difference oracle
(`finite_diff_grad`) verifies every analytic gradient.

Shapes are strict: elementwise ops require equal shapes, the only implicit
broadcasting is scalar-vs-tensor. All compute is float64.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "no_grad",
    "add", "sub", "mul", "relu", "log", "sigmoid", "matmul",
    "reshape", "transpose", "getitem",
    "tsum", "tmean", "tmax", "tmin", "argmax", "argmin",
    "l2_normalize_rows", "conv1x1", "conv3x3", "maxpool2x2", "distance_map",
    "finite_diff_grad", "gradcheck_rel_error",
    "save_tensor", "load_tensor",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording; forward passes inside
    it allocate no backward closures."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 n-d array plus the autodiff bookkeeping for one tape node.

    ``data`` is the value, ``grad`` accumulates d(loss)/d(this) after
    ``backward()``. Leaf tensors default to ``requires_grad=False``; ops
    propagate the flag and only record backward closures when some input
    requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad)

    # -- basic protocol -------------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar node. The tape is
        consumed: graph edges are dropped afterwards so the closures (which
        hold activation buffers and form reference cycles) free immediately."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        for node in topo:
            node._parents = ()
            node._backward = None

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not part of the op set; "
                             "divide by a scalar instead")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """A learnable tensor. ``trainable=False`` freezes it: no gradient is
    recorded and no optimizer step ever touches it."""

    __slots__ = ("trainable", "name")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = bool(trainable)
        self.name = name

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


# -- op plumbing --------------------------------------------------------------


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise TypeError(f"cannot treat {type(x).__name__} as a tensor operand")


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[[], None]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ "
                     "(only scalar-tensor broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a broadcasted gradient back onto a scalar operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "add")
    out_data = a.data + b.data

    def backward():
        _accum(a, _reduce_to(out.grad, a.shape))
        _accum(b, _reduce_to(out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "sub")
    out_data = a.data - b.data

    def backward():
        _accum(a, _reduce_to(out.grad, a.shape))
        _accum(b, _reduce_to(-out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "mul")
    out_data = a.data * b.data

    def backward():
        _accum(a, _reduce_to(out.grad * b.data, a.shape))
        _accum(b, _reduce_to(out.grad * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward():
        _accum(a, out.grad * mask)

    out = _make(out_data, (a,), backward)
    return out


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out_data = np.log(a.data)

    def backward():
        _accum(a, out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    """Elementwise 1/(1+exp(-x)), computed branch-wise so neither tail overflows."""
    a = _coerce(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward():
        _accum(a, out.grad * out_data * (1.0 - out_data))

    out = _make(out_data, (a,), backward)
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def backward():
        _accum(a, out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward():
        _accum(a, out.grad.transpose(inv))

    out = _make(out_data, (a,), backward)
    return out


def _normalize_index(idx):
    # unwrap Tensor/list indices to plain arrays; report whether indexing is "advanced"
    if not isinstance(idx, tuple):
        idx = (idx,)
    norm = []
    advanced = False
    for i in idx:
        if isinstance(i, Tensor):
            i = i.data.astype(np.int64)
        if isinstance(i, list):
            i = np.asarray(i)
        if isinstance(i, np.ndarray) and i.ndim > 0:
            advanced = True
        norm.append(i)
    return tuple(norm), advanced


def getitem(a, idx) -> Tensor:
    a = _coerce(a)
    norm, advanced = _normalize_index(idx)
    out_data = a.data[norm]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)

    def backward():
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if advanced:
            np.add.at(a.grad, norm, out.grad)
        else:
            a.grad[norm] += out.grad

    out = _make(out_data, (a,), backward)
    return out


# -- reductions ---------------------------------------------------------------


def _expand_axis_grad(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    g_exp = g
    for ax in sorted(axes):
        g_exp = np.expand_dims(g_exp, ax)
    return np.broadcast_to(g_exp, shape).copy()


def tsum(a, axis=None) -> Tensor:
    a = _coerce(a)
    out_data = np.asarray(a.data.sum(axis=axis))

    def backward():
        _accum(a, _expand_axis_grad(out.grad, a.shape, axis))

    out = _make(out_data, (a,), backward)
    return out


def tmean(a, axis=None) -> Tensor:
    a = _coerce(a)
    out_data = np.asarray(a.data.mean(axis=axis))
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))

    def backward():
        _accum(a, _expand_axis_grad(out.grad, a.shape, axis) / count)

    out = _make(out_data, (a,), backward)
    return out


def argmax(a, axis=None):
    """First (row-major) index of the maximum; no gradient."""
    a = _coerce(a)
    if axis is None:
        return np.unravel_index(int(np.argmax(a.data)), a.shape)
    return np.argmax(a.data, axis=axis)


def argmin(a, axis=None):
    """First (row-major) index of the minimum; no gradient."""
    a = _coerce(a)
    if axis is None:
        return np.unravel_index(int(np.argmin(a.data)), a.shape)
    return np.argmin(a.data, axis=axis)


def _extreme(a, axis, mode: str):
    a = _coerce(a)
    npfun = np.max if mode == "max" else np.min
    argfun = argmax if mode == "max" else argmin
    idx = argfun(a, axis=axis)
    if axis is None:
        out_data = np.asarray(npfun(a.data))

        def backward():
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += out.grad

    else:
        out_data = npfun(a.data, axis=axis)

        def backward():
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            expanded = np.expand_dims(idx, axis)
            np.put_along_axis(
                a.grad, expanded,
                np.take_along_axis(a.grad, expanded, axis) + np.expand_dims(out.grad, axis),
                axis)

    out = _make(out_data, (a,), backward)
    return out, idx


def tmax(a, axis=None):
    """Maximum plus its index; gradient flows only to the selected element
    (first in row-major order on ties)."""
    return _extreme(a, axis, "max")


def tmin(a, axis=None):
    """Minimum plus its index; same tie-break and gradient rule as `tmax`."""
    return _extreme(a, axis, "min")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out = _make(out_data, (a, b), backward)
    return out


def l2_normalize_rows(a) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm. Errors on a zero row."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expects a 2-D tensor, got shape {a.shape}")
    norms = np.sqrt((a.data ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        bad = int(np.nonzero(norms == 0.0)[0][0])
        raise ValueError(f"l2_normalize_rows: row {bad} has zero norm")
    out_data = a.data / norms[:, None]

    def backward():
        g = out.grad
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(a, (g - dot * out_data) / norms[:, None])

    out = _make(out_data, (a,), backward)
    return out


# -- convolution / pooling / distances ---------------------------------------
#
# Spatial ops accept either C x H x W or B x C x H x W input; a 3-D input is
# treated as a single-element batch and the batch axis is stripped again on
# output.


def _as_batched(x: Tensor, opname: str):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{opname}: expects CxHxW or BxCxHxW input, got shape {x.shape}")


def conv1x1(x, weight, bias=None) -> Tensor:
    """Pointwise convolution: out[o,h,w] = sum_c weight[o,c] * x[c,h,w] (+ bias[o])."""
    x, weight = _coerce(x), _coerce(weight)
    bias = _coerce(bias) if bias is not None else None
    xd, squeeze = _as_batched(x, "conv1x1")
    if weight.ndim != 2:
        raise ShapeError(f"conv1x1: weight must be C_out x C_in, got shape {weight.shape}")
    b_, c, h, w = xd.shape
    c_out, c_in = weight.shape
    if c_in != c:
        raise ShapeError(f"conv1x1: input has {c} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1x1: bias shape {bias.shape} != ({c_out},)")

    xc = np.ascontiguousarray(xd.transpose(1, 0, 2, 3)).reshape(c, b_ * h * w)
    oc = weight.data @ xc
    if bias is not None:
        oc = oc + bias.data[:, None]
    out_data = oc.reshape(c_out, b_, h, w).transpose(1, 0, 2, 3)
    if squeeze:
        out_data = out_data[0]

    def backward():
        g = out.grad if not squeeze else out.grad[None]
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, b_ * h * w)
        if x.requires_grad:
            gx = (weight.data.T @ gc).reshape(c, b_, h, w).transpose(1, 0, 2, 3)
            _accum(x, gx[0] if squeeze else gx)
        if weight.requires_grad:
            _accum(weight, gc @ xc.T)
        if bias is not None and bias.requires_grad:
            _accum(bias, gc.sum(axis=1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, backward)
    return out


def conv3x3(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial dims preserved)."""
    x, weight = _coerce(x), _coerce(weight)
    bias = _coerce(bias) if bias is not None else None
    xd, squeeze = _as_batched(x, "conv3x3")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: weight must be C_out x C_in x 3 x 3, got shape {weight.shape}")
    b_, c, h, w = xd.shape
    c_out, c_in = weight.shape[:2]
    if c_in != c:
        raise ShapeError(f"conv3x3: input has {c} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3x3: bias shape {bias.shape} != ({c_out},)")

    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # (B,C,H,W,3,3) -> (C,3,3,B,H,W) -> (C*9, B*H*W)
    col = np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(c * 9, b_ * h * w)
    w2 = weight.data.reshape(c_out, c * 9)
    oc = w2 @ col
    if bias is not None:
        oc = oc + bias.data[:, None]
    out_data = oc.reshape(c_out, b_, h, w).transpose(1, 0, 2, 3)
    if squeeze:
        out_data = out_data[0]

    def backward():
        g = out.grad if not squeeze else out.grad[None]
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, b_ * h * w)
        if weight.requires_grad:
            _accum(weight, (gc @ col.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gc.sum(axis=1))
        if x.requires_grad:
            gcol = (w2.T @ gc).reshape(c, 3, 3, b_, h, w)
            gpad = np.zeros_like(padded)
            for i in range(3):
                for j in range(3):
                    gpad[:, :, i:i + h, j:j + w] += gcol[:, i, j].transpose(1, 0, 2, 3)
            gx = gpad[:, :, 1:-1, 1:-1]
            _accum(x, gx[0] if squeeze else gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, backward)
    return out


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2. Gradient flows to the selected element
    only; ties select the first element in row-major window order."""
    x = _coerce(x)
    xd, squeeze = _as_batched(x, "maxpool2x2")
    b_, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    win = xd.reshape(b_, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(b_, c, h // 2, w // 2, 4)
    sel = np.argmax(win, axis=-1)
    out_data = np.take_along_axis(win, sel[..., None], axis=-1)[..., 0]
    if squeeze:
        out_data = out_data[0]

    def backward():
        if not x.requires_grad:
            return
        g = out.grad if not squeeze else out.grad[None]
        gwin = np.zeros((b_, c, h // 2, w // 2, 4))
        np.put_along_axis(gwin, sel[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b_, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = gx.reshape(b_, c, h, w)
        _accum(x, gx[0] if squeeze else gx)

    out = _make(out_data, (x,), backward)
    return out


def distance_map(features, prototypes) -> Tensor:
    """Squared L2 distance between every spatial feature vector and every
    prototype: out[i,h,w] = sum_c (features[c,h,w] - prototypes[i,c])^2.

    Accepts d x H x W or B x d x H x W features; prototypes are K x d.
    """
    features, prototypes = _coerce(features), _coerce(prototypes)
    fd, squeeze = _as_batched(features, "distance_map")
    if prototypes.ndim != 2:
        raise ShapeError(f"distance_map: prototypes must be K x d, got shape {prototypes.shape}")
    b_, d, h, w = fd.shape
    k, d_p = prototypes.shape
    if d_p != d:
        raise ShapeError(f"distance_map: features have {d} channels but prototypes have {d_p}")

    diff = fd[:, None] - prototypes.data[None, :, :, None, None]  # (B,K,d,H,W)
    out_data = np.einsum("bkdhw,bkdhw->bkhw", diff, diff)
    if squeeze:
        out_data = out_data[0]

    def backward():
        g = out.grad if not squeeze else out.grad[None]
        if features.requires_grad:
            gf = 2.0 * np.einsum("bkhw,bkdhw->bdhw", g, diff, optimize=True)
            _accum(features, gf[0] if squeeze else gf)
        if prototypes.requires_grad:
            gp = -2.0 * np.einsum("bkhw,bkdhw->kd", g, diff, optimize=True)
            _accum(prototypes, gp)

    out = _make(out_data, (features, prototypes), backward)
    return out


# -- finite differences -------------------------------------------------------


def finite_diff_grad(scalar_fn, at, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``at``.

    ``scalar_fn`` receives a float64 ndarray and must return a finite scalar.
    """
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    if h <= 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(scalar_fn(x))
        flat[i] = orig - h
        fm = float(scalar_fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_grad: non-finite evaluation at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck_rel_error(scalar_fn, at, analytic, h: float = 1e-6) -> float:
    """Max-norm relative error between an analytic gradient and the
    finite-difference oracle, with the denominator floored at 1 so that
    near-zero gradients are compared absolutely."""
    numeric = finite_diff_grad(scalar_fn, at, h)
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1.0)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


# -- PDTF tensor file format --------------------------------------------------
#
# Layout: magic "PDTF", u8 dtype code (0 = float32, 1 = float64), u8 ndim,
# ndim x u32 little-endian dims, then the row-major payload in little-endian
# IEEE-754.

PDTF_MAGIC = b"PDTF"
_PDTF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_PDTF_CODES = {"float32": 0, "float64": 1}
_PDTF_MAX_NDIM = 32


def save_tensor(path, array, dtype: str = "float64") -> None:
    """Write an array to ``path`` in the PDTF format."""
    if dtype not in _PDTF_CODES:
        raise ValueError(f"save_tensor: unsupported dtype {dtype!r}")
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    code = _PDTF_CODES[dtype]
    arr = np.ascontiguousarray(arr, dtype=_PDTF_DTYPES[code])
    if arr.ndim > _PDTF_MAX_NDIM:
        raise ValueError(f"save_tensor: ndim {arr.ndim} exceeds format limit")
    header = PDTF_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a PDTF file. Returns an array of the stored dtype; rejects bad
    magic, unknown dtype codes, non-positive dims, and truncated payloads."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 6 or blob[:4] != PDTF_MAGIC:
        raise ValueError(f"{path}: not a PDTF tensor file (bad magic)")
    code, ndim = struct.unpack("<BB", blob[4:6])
    if code not in _PDTF_DTYPES:
        raise ValueError(f"{path}: unknown PDTF dtype code {code}")
    if ndim > _PDTF_MAX_NDIM:
        raise ValueError(f"{path}: PDTF ndim {ndim} exceeds format limit")
    offset = 6 + 4 * ndim
    if len(blob) < offset:
        raise ValueError(f"{path}: truncated PDTF header")
    dims = struct.unpack(f"<{ndim}I", blob[6:offset]) if ndim else ()
    if any(d == 0 for d in dims):
        raise ValueError(f"{path}: PDTF dims must be positive, got {dims}")
    dt = _PDTF_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if dims else dt.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ValueError(f"{path}: PDTF payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    return arr
