"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic computation graph is rebuilt on every call: each operation
returns a new Tensor holding its value, its parents, and a closure that
scatters the incoming adjoint to those parents. ``Tensor.backward`` walks
the graph once in reverse topological order, so differentiation is linear
in graph size (``backward_visits`` counts the walk for assertions).

Conventions: values are row-major float64 throughout; conv2d uses
cross-correlation (no kernel flip); every op validates that its output is
finite and raises NumericalError otherwise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible with the operation."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf."""


class LabelOutOfRange(ValueError):
    """A class label falls outside [0, num_classes)."""


class NonScalarRoot(ValueError):
    """backward() was called on a non-scalar tensor."""


def _ensure_finite(data: np.ndarray, op: str) -> None:
    # Fast path: a finite sum implies finite entries except for the
    # astronomically unlikely overflow of finite values, which the full
    # scan below rules out.
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total):
        if not np.isfinite(data).all():
            raise NumericalError(f"non-finite values produced by {op}")


class Tensor:
    """Graph node: cached value, parent references, adjoint rule."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "backward_visits")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
        check: bool = True,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        if check:
            _ensure_finite(self.data, op)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.backward_visits = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray, fresh: bool = False) -> None:
        """Add an adjoint contribution. ``fresh`` marks arrays allocated by
        the caller for this call only, which may be adopted without the
        defensive copy (aliased or view gradients must not set it)."""
        if self.grad is None:
            if fresh:
                self.grad = grad
            else:
                self.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar into every
        reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise NonScalarRoot(f"backward root must be scalar, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            node.backward_visits += 1
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # Operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.backward_fn is not None for t in tensors)


def _make(
    data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn, check: bool = True
) -> Tensor:
    if _needs_graph(*parents):
        return Tensor(
            data, requires_grad=False, parents=parents, backward_fn=backward_fn, op=op, check=check
        )
    return Tensor(data, op=op, check=check)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from None

    def backward(dout):
        a._accumulate(_unbroadcast(dout, a.data.shape))
        b._accumulate(_unbroadcast(dout, b.data.shape))

    return _make(out, "add", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(dout):
        a._accumulate(-dout, fresh=True)

    return _make(-a.data, "neg", (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from None

    def backward(dout):
        a._accumulate(_unbroadcast(dout * b.data, a.data.shape), fresh=True)
        b._accumulate(_unbroadcast(dout * a.data, b.data.shape), fresh=True)

    return _make(out, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}") from None

    def backward(dout):
        a._accumulate(_unbroadcast(dout / b.data, a.data.shape), fresh=True)
        b._accumulate(_unbroadcast(-dout * a.data / (b.data * b.data), b.data.shape), fresh=True)

    return _make(out, "div", (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent

    def backward(dout):
        a._accumulate(dout * exponent * a.data ** (exponent - 1.0), fresh=True)

    return _make(out, f"pow{exponent}", (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(dout):
        a._accumulate(dout / a.data, fresh=True)

    return _make(out, "log", (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(dout):
        a._accumulate(dout * out, fresh=True)

    return _make(out, "exp", (a,), backward)


def softplus_values(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x), stable at both tails (x > 30 returns x: the log1p
    correction is below one ulp there)."""
    x = np.asarray(x, dtype=np.float64)
    big = x > 30.0
    if big.any():
        safe = np.where(big, 0.0, x)
        return np.where(big, x, np.log1p(np.exp(safe)))
    return np.log1p(np.exp(x))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x) with a sigmoid adjoint."""
    out = softplus_values(a.data)

    def backward(dout):
        a._accumulate(dout * _sigmoid(a.data), fresh=True)

    return _make(out, "softplus", (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    out = _kernels.relu_forward(a.data)

    def backward(dout):
        a._accumulate(_kernels.relu_backward(a.data, dout), fresh=True)

    return _make(out, "relu", (a,), backward, check=False)


def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward(dout):
        a._accumulate(np.broadcast_to(dout, a.data.shape))

    return _make(out, "sum", (a,), backward)


def tmean(a: Tensor) -> Tensor:
    out = a.data.mean()
    n = a.data.size

    def backward(dout):
        a._accumulate(np.broadcast_to(dout / n, a.data.shape))

    return _make(out, "mean", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(dout):
        a._accumulate(dout.reshape(a.data.shape))

    return _make(out, "reshape", (a,), backward, check=False)


def flatten(a: Tensor) -> Tensor:
    """(N, ...) -> (N, features)."""
    return reshape(a, (a.data.shape[0], -1))


# ---------------------------------------------------------------------------
# Linear algebra and network layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(dout):
        a._accumulate(dout @ b.data.T, fresh=True)
        b._accumulate(a.data.T @ dout, fresh=True)

    return _make(out, "matmul", (a, b), backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation.

    x: (N, C, H, W), kernel: (F, C, kh, kw) -> (N, F, H', W') with
    H' = (H + 2p - kh)//stride + 1 and likewise for W'.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: x {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.data.shape
    f, kc, kh, kw = kernel.data.shape
    if kc != c:
        raise ShapeMismatch(f"conv2d: {c} input channels vs kernel expecting {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input")
    if stride < 1 or padding < 0:
        raise ShapeMismatch(f"conv2d: bad stride {stride} or padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    # im2col: one contiguous (N*H'*W', C*kh*kw) matrix feeds BLAS for the
    # forward product and is reused for the kernel gradient.
    cols = _kernels.im2col(xp, kh, kw, stride, h_out, w_out)
    k_mat = kernel.data.reshape(f, c * kh * kw)
    out = _kernels.mat_to_nchw(cols @ k_mat.T, n, f, h_out, w_out)

    def backward(dout):
        dout_mat = _kernels.nchw_to_mat(dout)
        if kernel.requires_grad or kernel.backward_fn is not None:
            kernel._accumulate((dout_mat.T @ cols).reshape(f, c, kh, kw), fresh=True)
        if x.requires_grad or x.backward_fn is not None:
            dcols = (dout_mat @ k_mat).reshape(n, h_out, w_out, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :,
                        :,
                        i : i + stride * (h_out - 1) + 1 : stride,
                        j : j + stride * (w_out - 1) + 1 : stride,
                    ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
            x._accumulate(dxp, fresh=True)

    return _make(out, "conv2d", (x, kernel), backward)


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over size x size patches; gradient flows to the first
    maximum of each patch on ties. Trailing rows/columns that do not fill a
    patch are dropped."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"max_pool2d: expected 4-D input, got {x.shape}")
    stride = size if stride is None else stride
    n, c, h, w = x.data.shape
    if size > h or size > w:
        raise ShapeMismatch(f"max_pool2d: window {size} larger than input {h}x{w}")

    out, arg = _kernels.pool_forward(x.data, size, stride)

    def backward(dout):
        x._accumulate(_kernels.pool_backward(dout, arg, size, stride, h, w), fresh=True)

    return _make(out, "max_pool2d", (x,), backward, check=False)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(dout):
        inner = (dout * out).sum(axis=-1, keepdims=True)
        a._accumulate(out * (dout - inner), fresh=True)

    return _make(out, "softmax", (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis (stable shift + logsumexp)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(dout):
        a._accumulate(dout - np.exp(out) * dout.sum(axis=-1, keepdims=True), fresh=True)

    return _make(out, "log_softmax", (a,), backward)


def cross_entropy(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under per-row
    log-probabilities of shape (n, C)."""
    if log_probs.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy: expected (n, C), got {log_probs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = log_probs.data.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: {n} rows vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    rows = np.arange(n)
    out = -log_probs.data[rows, labels].mean()

    def backward(dout):
        dlp = np.zeros_like(log_probs.data)
        dlp[rows, labels] = -dout / n
        log_probs._accumulate(dlp, fresh=True)

    return _make(out, "cross_entropy", (log_probs,), backward)


# ---------------------------------------------------------------------------
# Convenience
# ---------------------------------------------------------------------------

def parameter(data, rng: np.random.Generator | None = None, shape=None) -> Tensor:
    """Leaf tensor that collects gradients."""
    if data is None:
        data = rng.uniform(-0.1, 0.1, size=shape)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Run backward and return gradients for ``wrt``; leaves with no path
    to the root get zeros."""
    root.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None
