"""Dense float64 tensors with reverse-mode differentiation.

Every operation records a closure mapping the output gradient to the input
gradients. ``backward`` walks the graph once in reverse topological order,
so gradients are deterministic for a fixed graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: BackwardFn | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op or 'leaf'!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), _bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), _bw, "gelu")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), _bw, "getitem")


def roll(a: Tensor, shift, axis) -> Tensor:
    return _result(np.roll(a.data, shift, axis), (a,), lambda g: (np.roll(g, np.negative(shift), axis),), "roll")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(out, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[1],))


# ---------------------------------------------------------------- softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), _bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), _bw, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, K)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, K) logits and (B,) labels, got {logits.shape} and {labels.shape}")
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(labels.shape[0])
    picked = getitem(logp, (rows, labels))
    return neg(mean(picked))


# ---------------------------------------------------------------- normalization


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def _bw(g):
        gw = unbroadcast(g * xhat, weight.shape)
        gb = unbroadcast(g, bias.shape)
        gx_hat = g * weight.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _result(out, (x, weight, bias), _bw, "layer_norm")


class ModulationState:
    """Per-channel affine parameters plus running statistics for batch norm."""

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "ModulationState":
        new = ModulationState(self.channels, self.momentum, self.epsilon)
        new.gamma = parameter(self.gamma.data.copy())
        new.beta = parameter(self.beta.data.copy())
        new.running_mean = self.running_mean.copy()
        new.running_var = self.running_var.copy()
        return new


def batch_norm2d(x: Tensor, state: ModulationState, training: bool) -> Tensor:
    """Per-channel standardization of a (B, C, H, W) tensor.

    In training mode batch statistics over (B, H, W) are used and the running
    estimates are updated in place with ``state.momentum`` (unbiased variance,
    as the common frameworks do). Inference uses the running estimates.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects (B, C, H, W), got {x.shape}")
    if x.shape[1] != state.channels:
        raise DimensionError(f"batch_norm2d channel mismatch: input {x.shape}, state has {state.channels} channels")
    gamma = state.gamma.data.reshape(1, -1, 1, 1)
    beta = state.beta.data.reshape(1, -1, 1, 1)
    eps = state.epsilon
    axes = (0, 2, 3)

    if not training:
        inv = 1.0 / np.sqrt(state.running_var.reshape(1, -1, 1, 1) + eps)
        xhat = (x.data - state.running_mean.reshape(1, -1, 1, 1)) * inv
        out = xhat * gamma + beta

        def _bw_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _result(out, (x, state.gamma, state.beta), _bw_eval, "batch_norm2d")

    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ConfigurationError("batch_norm2d in training mode needs B*H*W >= 2")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
    state.running_var = (1 - m) * state.running_var + m * var.reshape(-1) * count / (count - 1)

    def _bw(g):
        gx_hat = g * gamma
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axes, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, state.gamma, state.beta), _bw, "batch_norm2d")


# ---------------------------------------------------------------- convolution


def depthwise_conv2d(x: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """Depthwise 2D cross-correlation with zero "same" padding.

    ``kernels`` is either (C, k, k), shared across the batch, or (B, C, k, k)
    with one kernel per sample and channel.
    """
    if padding != "same":
        raise ConfigurationError(f"unsupported padding mode {padding!r}; only 'same' zero padding")
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects (B, C, H, W) input, got {x.shape}")
    k = kernels.shape[-1]
    if kernels.shape[-2] != k or k % 2 == 0:
        raise ConfigurationError(f"kernel must be square with odd size, got {kernels.shape[-2:]}")
    B, C, H, W = x.shape
    per_sample = kernels.ndim == 4
    if kernels.ndim == 3:
        if kernels.shape[0] != C:
            raise DimensionError(f"depthwise_conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    elif per_sample:
        if kernels.shape[:2] != (B, C):
            raise DimensionError(f"depthwise_conv2d batch/channel mismatch: input {x.shape}, kernels {kernels.shape}")
    else:
        raise DimensionError(f"kernels must be (C, k, k) or (B, C, k, k), got {kernels.shape}")

    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    kd = kernels.data
    if per_sample:
        out = np.einsum("bchwij,bcij->bchw", win, kd, optimize=True)
    else:
        out = np.einsum("bchwij,cij->bchw", win, kd, optimize=True)

    def _bw(g):
        if per_sample:
            gk = np.einsum("bchwij,bchw->bcij", win, g, optimize=True)
        else:
            gk = np.einsum("bchwij,bchw->cij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                if per_sample:
                    w = kd[:, :, i, j][:, :, None, None]
                else:
                    w = kd[:, i, j][None, :, None, None]
                gxp[:, :, i : i + H, j : j + W] += g * w
        return gxp[:, :, p : p + H, p : p + W], gk

    return _result(out, (x, kernels), _bw, "depthwise_conv2d")


# ---------------------------------------------------------------- autodiff driver


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping from each leaf tensor that requires grad to its gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves
