"""Minimal reverse-mode autodiff over dense numpy arrays.

Every op records a closure that pushes the upstream gradient into its
inputs. Tensors carry a monotonically increasing ``node_id`` so that
``backward`` can replay the recorded operations in reverse creation order,
which is always a valid reverse topological order.

Only the operations needed by the convolutional backbone and the
hierarchical head are provided. Broadcasting is limited to adding a bias
row vector to every row of a matrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
    ):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def _wrap(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tracked tensor reachable from ``root``.

    Leaf gradients accumulate across calls; intermediate gradients are reset.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor that requires grad")

    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.node_id, reverse=True)

    for t in nodes:
        if not t.is_leaf:
            t.grad = None
    root.grad = np.ones_like(root.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ----------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _wrap(a.data + b.data, (a, b), _bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _wrap(a.data - b.data, (a, b), _bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _wrap(a.data * b.data, (a, b), _bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def _bw(g):
        _accumulate(a, g * c)

    return _wrap(a.data * c, (a,), _bw, "scale")


def square(a: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(a, 2.0 * g * a.data)

    return _wrap(a.data * a.data, (a,), _bw, "square")


def sum_all(a: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _wrap(np.asarray(a.data.sum(), dtype=a.dtype), (a,), _bw, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def _bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _wrap(np.asarray(a.data.mean(), dtype=a.dtype), (a,), _bw, "mean")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def _bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _wrap(a.data.reshape(shape), (a,), _bw, "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        _accumulate(x, g * mask)

    return _wrap(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), _bw, "relu")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _wrap(a.data @ b.data, (a, b), _bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")

    def _bw(g):
        _accumulate(a, g.T)

    return _wrap(a.data.T, (a,), _bw, "transpose")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an m x n matrix."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")

    def _bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0))

    return _wrap(x.data + b.data, (x, b), _bw, "add_bias")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = matmul(x, transpose(w))
    return add_bias(out, b) if b is not None else out


# ----------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an FCKK kernel bank."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel {kernel.shape} expects {kc}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def _bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        if kernel.requires_grad:
            _accumulate(kernel, (gmat.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, dxp)

    return _wrap(np.ascontiguousarray(out), (x, kernel), _bw, "conv2d")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_channel_bias: bias {b.shape} does not fit {x.shape}")

    def _bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _wrap(x.data + b.data[None, :, None, None], (x, b), _bw, "add_channel_bias")


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; ties route the gradient to the first index in scan order."""
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"max_pool2d: window {window} exceeds input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * (arg == idx)
        _accumulate(x, dx)

    return _wrap(out, (x,), _bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: NCHW -> NC."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_avg_pool: empty spatial extent {h}x{w}")

    def _bw(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _wrap(x.data.mean(axis=(2, 3)), (x,), _bw, "global_avg_pool")


# ----------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization for NCHW input.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used as constants.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    if training:
        if n < 2:
            raise ValueError("batch_norm: training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = n * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _bw(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = inv[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv[None, :, None, None]
        _accumulate(x, dx)

    return _wrap(out, (x, gamma, beta), _bw, "batch_norm")


# ----------------------------------------------------------------------------
# softmax family


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of an m x n matrix."""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects a matrix, got {x.shape}")
    y = _softmax_rows(x.data)

    def _bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _wrap(y, (x,), _bw, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``, max-shifted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects m x n logits, got {logits.shape}")
    m, n = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {m} rows")
    if m and (labels.min() < 0 or labels.max() >= n):
        bad = labels[(labels < 0) | (labels >= n)][0]
        raise ValueError(f"softmax_cross_entropy: label {bad} outside [0, {n})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = (lse - z[rows, labels]).mean()

    def _bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        _accumulate(logits, p * (g / m))

    return _wrap(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "softmax_cross_entropy")


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_error <= tolerance


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    max_checks: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    The error for one parameter is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max magnitudes (never below ``floor``).
    When ``max_checks`` is set, only that many randomly chosen entries per
    parameter are perturbed.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.dtype}")

    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    out = fn()
    backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx: Iterable[int] = range(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        idx = list(idx)
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            num[k] = (fp - fm) / (2 * eps)
        ana = analytic[name].reshape(-1)[idx]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        report.errors[name] = float(np.abs(ana - num).max(initial=0.0) / denom)
    for p in params.values():
        p.zero_grad()
    return report
