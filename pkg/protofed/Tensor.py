"""Dense arrays with a reverse-mode gradient tape.

Every differentiable primitive records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in a
fixed topological order (parents in insertion order) so accumulated gradients
are bitwise reproducible.
"""
import contextlib
import logging
import threading
from typing import Callable, Mapping, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import protofed.protofed_types as internal
from .protofed_aux import (ConfigurationError, GradCheckReport, NumericError,
                           ParameterCheck)
from .protofed_types import Precision

logger = logging.getLogger(__name__)

_default_dtype = np.float64
_grad_state = threading.local()


def set_precision(precision: Union[Precision, str]) -> None:
    """Sets the element type for newly created tensors.

    Double precision is the default and the only mode supported by
    ``grad_check``.
    """
    global _default_dtype
    if isinstance(precision, str):
        precision = internal.__StrPrecision__[precision]
    _default_dtype = internal.__PrecisionDtype__[precision]


def get_dtype():
    return _default_dtype


def _recording() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def inference_mode():
    """Disables graph recording in the current thread."""
    previous = _recording()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _exact() -> bool:
    return getattr(_grad_state, "exact", False)


@contextlib.contextmanager
def exact_reductions():
    """Makes conv2d and linear accumulate products one at a time, in input
    channel then kernel row then kernel column order, starting from zero.

    Results then agree bit for bit with a plain nested-loop evaluation. The
    default path hands the contraction to BLAS, whose summation order is not
    fixed. Applies to the current thread.
    """
    previous = _exact()
    _grad_state.exact = True
    try:
        yield
    finally:
        _grad_state.exact = previous


class Tensor(object):
    """A value array, its accumulated gradient and a ``trainable`` flag.

    Leaf tensors created with ``trainable=True`` are the gradient records the
    optimizers consume; tensors produced by operations carry graph links but
    never keep a gradient of their own.
    """
    __slots__ = ("data", "grad", "trainable", "name", "_parents",
                 "_backward", "_requires_grad")

    def __init__(self, data, trainable: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if any(extent <= 0 for extent in arr.shape):
            raise ConfigurationError(
                f"tensor extents must be strictly positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.trainable = trainable
        self.name = name
        self._parents = ()
        self._backward = None
        self._requires_grad = trainable

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.trainable = False
        out.name = None
        out._requires_grad = _recording() and any(
            p._requires_grad for p in parents)
        if out._requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(
                f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data, trainable=self.trainable, name=self.name,
                      dtype=self.data.dtype)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulates d(self)/d(leaf) into every trainable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError(
                    "backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not self._requires_grad:
            return
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # Python Magic Methods

    def __repr__(self):
        return "Tensor(shape={}, trainable={}{})".format(
            self.shape, self.trainable,
            "" if self.name is None else f", name={self.name!r}")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return linear(self, other)


def _topological_order(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent._requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor(value)
    arr = np.asarray(value)
    return Tensor(arr, dtype=arr.dtype if arr.dtype.kind == "f" else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise and reduction helpers


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,),
                           lambda g: (g.reshape(x.shape),))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis), 1.0 / count)


def square_sum(x: Tensor) -> Tensor:
    return Tensor._from_op(np.asarray(np.sum(x.data * x.data)), (x,),
                           lambda g: (2.0 * g * x.data,))


def abs_sum(x: Tensor) -> Tensor:
    """Sum of absolute values; the subgradient at 0 is 0."""
    return Tensor._from_op(np.asarray(np.sum(np.abs(x.data))), (x,),
                           lambda g: (g * np.sign(x.data),))


def clamp_max(x: Tensor, limit: float) -> Tensor:
    return Tensor._from_op(np.minimum(x.data, limit), (x,),
                           lambda g: (g * (x.data < limit),))


def amin(x: Tensor, axis: Union[int, tuple], mask: Optional[np.ndarray] = None
         ) -> Tensor:
    """Minimum over ``axis``; the gradient goes to the first minimizer in
    row-major order. Entries where ``mask`` is False are excluded."""
    axes = tuple(np.atleast_1d(axis) % x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    values = x.data if mask is None else np.where(mask, x.data, np.inf)
    moved = np.transpose(values, keep + list(axes))
    kept_shape = moved.shape[:len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = flat.argmin(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], -1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], -1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over axis 1 with max subtraction."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - logsum

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Selects ``x[n, index[n]]`` for every row n."""
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return Tensor._from_op(x.data[rows, index], (x,), backward)


# Primitive network operations


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a batch×channels×height×width input."""
    x, k = _as_tensor(input), _as_tensor(kernel)
    if x.ndim != 4 or k.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    if k.shape[1] != x.shape[1]:
        raise ConfigurationError(
            f"conv2d kernel in-channels {k.shape[1]} do not match input "
            f"channels {x.shape[1]} (input {x.shape}, kernel {k.shape})")
    if stride < 1 or padding < 0:
        raise ConfigurationError(
            f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (k.shape[0],):
            raise ConfigurationError(
                f"conv2d bias extents {bias.shape} do not match "
                f"{k.shape[0]} output channels")
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding),
                         (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride][:, :, :ho, :wo]
    if _exact():
        out = np.zeros((n, o, ho, wo), dtype=np.result_type(xp, k.data))
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    out += (windows[:, None, ci, :, :, i, j]
                            * k.data[None, :, ci, i, j, None, None])
    else:
        out = np.einsum("nchwij,ocij->nohw", windows, k.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gk = gb = None
        if k._requires_grad:
            gk = np.einsum("nohw,nchwij->ocij", g, windows, optimize=True)
        if bias is not None and bias._requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x._requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += np.einsum(
                            "nohw,oc->nchw", g, k.data[:, :, i, j],
                            optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, k) if bias is None else (x, k, bias)
    return Tensor._from_op(out, parents, backward)


def relu(input: Tensor) -> Tensor:
    x = _as_tensor(input)
    active = x.data > 0
    return Tensor._from_op(np.where(active, x.data, 0.0).astype(x.dtype),
                           (x,), lambda g: (g * active,))


def maxpool2d(input: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum; ties route the gradient to the first element in
    row-major scan order."""
    x = _as_tensor(input)
    if window < 1 or stride < 1:
        raise ConfigurationError(
            f"maxpool2d needs window, stride >= 1, got {window}, {stride}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ConfigurationError(
            f"maxpool2d window {window} larger than spatial extents {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[
        :, :, ::stride, ::stride][:, :, :ho, :wo].reshape(
            n, c, ho, wo, window * window)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], -1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        rows = np.arange(ho)[:, None] * stride + idx // window
        cols = np.arange(wo)[None, :] * stride + idx % window
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def linear(input: Tensor, weights: Tensor) -> Tensor:
    """batch×m times m×C without bias."""
    x, w = _as_tensor(input), _as_tensor(weights)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigurationError(
            f"linear inner extents do not match: {x.shape} @ {w.shape}")

    def backward(g):
        return g @ w.data.T, x.data.T @ g

    if _exact():
        out = np.zeros((x.shape[0], w.shape[1]),
                       dtype=np.result_type(x.data, w.data))
        for i in range(x.shape[1]):
            out += x.data[:, i, None] * w.data[None, i, :]
    else:
        out = x.data @ w.data
    return Tensor._from_op(out, (x, w), backward)


def sliding_sq_l2(feature: Tensor, template: Tensor) -> Tensor:
    """Squared l2 distance between every h×w window of ``feature`` and the
    template(s).

    ``template`` is D×h×w (result batch×H'×W') or m×D×h×w (result
    batch×m×H'×W'). The difference form is used so that an exact match gives
    an exact zero.
    """
    f, t = _as_tensor(feature), _as_tensor(template)
    single = t.ndim == 3
    tdata = t.data[None] if single else t.data
    if f.ndim != 4 or tdata.ndim != 4:
        raise ConfigurationError(
            f"sliding_sq_l2 expects 4-d feature and 3/4-d template, got "
            f"{f.shape} and {t.shape}")
    n, d, h, w = f.shape
    m, td, th, tw = tdata.shape
    if td != d:
        raise ConfigurationError(
            f"sliding_sq_l2 depth mismatch: feature {d}, template {td}")
    if th > h or tw > w:
        raise ConfigurationError(
            f"sliding_sq_l2 template {th}x{tw} larger than feature {h}x{w}")
    hh, ww = h - th + 1, w - tw + 1
    windows = sliding_window_view(f.data, (th, tw), axis=(2, 3))
    diff = windows[:, None] - tdata[None, :, :, None, None, :, :]
    out = np.sum(diff * diff, axis=(2, 5, 6))

    def backward(g):
        if single:
            g = g[:, None]
        gd = 2.0 * diff * g[:, :, None, :, :, None, None]
        gf = gt = None
        if t._requires_grad:
            gt = -gd.sum(axis=(0, 3, 4))
            if single:
                gt = gt[0]
        if f._requires_grad:
            gwin = gd.sum(axis=1)
            gf = np.zeros_like(f.data)
            for i in range(th):
                for j in range(tw):
                    gf[:, :, i:i + hh, j:j + ww] += gwin[..., i, j]
        return gf, gt

    return Tensor._from_op(out[:, 0] if single else out, (f, t), backward)


# Finite-difference gradient checking


def _evaluate(fn: Callable, params: Mapping[str, Tensor], name: str) -> float:
    with inference_mode():
        value = np.asarray(_as_tensor(fn(params)).data, dtype=np.float64)
    if value.size != 1 or not np.isfinite(value).all():
        raise NumericError(
            f"grad_check: non-finite or non-scalar evaluation while perturbing "
            f"'{name}'")
    return float(value.reshape(-1)[0])


def grad_check(fn: Callable[[Mapping[str, Tensor]], Tensor],
               point: Mapping[str, Tensor], step: float = 1e-6,
               tolerance: float = 1e-5, atol: float = 0.0) -> GradCheckReport:
    """Compares reverse-mode gradients with central finite differences.

    The relative error per coordinate is |a-n| / max(1e-8, |a|+|n|). A
    parameter passes when every coordinate's relative error is within
    ``tolerance`` or its absolute error is within ``atol``.
    """
    if step <= 0:
        raise ConfigurationError(f"grad_check step must be > 0, got {step}")
    for name, p in point.items():
        if p.dtype != np.float64:
            raise ConfigurationError(
                f"grad_check needs double precision, '{name}' is {p.dtype}")
        p.trainable = True
        p._requires_grad = True
        p.zero_grad()
    _evaluate(fn, point, "<unperturbed>")
    _as_tensor(fn(point)).backward()

    checks = []
    for name, p in point.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            original = p.data[idx]
            p.data[idx] = original + step
            plus = _evaluate(fn, point, name)
            p.data[idx] = original - step
            minus = _evaluate(fn, point, name)
            p.data[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * step)
        abs_err = np.abs(analytic - numeric)
        rel_err = abs_err / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        rel_err = np.where(abs_err <= atol, 0.0, rel_err)
        worst = np.unravel_index(int(np.argmax(rel_err)), rel_err.shape)
        worst_err = float(rel_err[worst])
        checks.append(ParameterCheck(
            name=name,
            max_relative_error=worst_err,
            worst_index=tuple(int(i) for i in worst),
            analytic=float(analytic[worst]),
            numeric=float(numeric[worst]),
            passed=worst_err <= tolerance))
        logger.debug("grad_check %s: max rel. error %.3e at %s", name,
                     worst_err, worst)
    return GradCheckReport(tuple(checks), tolerance)

