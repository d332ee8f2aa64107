"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations needed by the LeNet pipeline are provided. Images use
row-major ``H x W x C`` layout, optionally with a leading batch axis.

Calling :func:`backward` twice on the same graph without resetting gradients
accumulates: leaf ``.grad`` arrays are added to, never overwritten.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import DimensionError, DomainError, NumericalError, ParameterError, StateError

LOG_EPS = 1e-12

_DTYPE = np.float64


def set_precision(name: str) -> None:
    """Switch the default float type ("float64" or "float32") for new tensors."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ParameterError(f"unsupported precision {name!r}")
    _DTYPE = np.dtype(name).type


def get_precision() -> str:
    return np.dtype(_DTYPE).name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _result(data, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Flatten all but a leading batch axis; a 3-D image becomes a vector."""
    if a.ndim == 3:
        return reshape(a, (a.size,))
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ------------------------------------------------------------------- layers

def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{op} expects H x W x C or B x H x W x C input, got shape {x.shape}")


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation with ``kernels`` shaped ``kh x kw x Cin x Cout``."""
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding not in ("valid", "same"):
        raise ParameterError(f"padding must be 'valid' or 'same', got {padding!r}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be kh x kw x Cin x Cout, got {kernels.shape}")
    xb, squeeze = _batched(x, "conv2d")
    kh, kw, cin, cout = kernels.shape
    B, H, W, C = xb.shape
    if C != cin:
        raise DimensionError(f"input has {C} channels but kernels expect {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} filters")

    if padding == "same":
        pt, pb = _same_padding(H, kh, stride)
        pl, pr = _same_padding(W, kw, stride)
        xp = np.pad(xb.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        if H < kh or W < kw:
            raise DimensionError(f"input {H}x{W} smaller than kernel {kh}x{kw} with valid padding")
        pt = pl = 0
        xp = xb.data
    Hp, Wp = xp.shape[1:3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.ascontiguousarray(xp)
    cols = K.im2col(xp, kh, kw, stride, Ho, Wo).reshape(B * Ho * Wo, kh * kw * cin)
    kmat = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(B, Ho, Wo, cout)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if xb.requires_grad:
            dcols = (g2 @ kmat.T).reshape(B, Ho, Wo, kh, kw, cin)
            gx = K.col2im(dcols, Hp, Wp, stride)[:, pt:pt + H, pl:pl + W, :]
        return gx, gk, gb

    res = _result(out, (xb, kernels, bias), bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling with valid padding; ties resolve to the first row-major index."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ParameterError(f"pool size and stride must be >= 1, got k={k}, stride={stride}")
    xb, squeeze = _batched(x, "maxpool2d")
    B, H, W, C = xb.shape
    if k > H or k > W:
        raise DimensionError(f"pool size {k} exceeds input {H}x{W}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    out, arg = K.maxpool_forward(np.ascontiguousarray(xb.data), k, stride, Ho, Wo)

    def bw(g):
        return (K.maxpool_backward(np.ascontiguousarray(g), arg, k, stride, H, W),)

    res = _result(out, (xb,), bw, "maxpool2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.outer(x.data, g) if x.ndim == 1 else x.data.T @ g
        gb = (g if g.ndim == 1 else g.sum(axis=0)) if bias.requires_grad else None
        return gx, gw, gb

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), bw, "dense")


# -------------------------------------------------------------------- losses

def softmax_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_t(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis."""
    logits = _as_tensor(logits)
    p = softmax_np(logits.data, tau)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / tau,)

    return _result(p, (logits,), bw, "softmax_t")


def _check_prob(arr: np.ndarray, what: str) -> None:
    if np.any(arr < 0):
        raise DomainError(f"{what} has negative entries")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-6):
        raise DomainError(f"{what} rows do not sum to 1")


def _reduce(values: np.ndarray, reduction: str):
    if reduction == "mean":
        return np.asarray(values.mean()), 1.0 / values.size
    if reduction == "sum":
        return np.asarray(values.sum()), 1.0
    raise ParameterError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def cross_entropy(target, predicted: Tensor, reduction: str = "mean") -> Tensor:
    """``-sum(target * log(predicted + eps))`` per row, reduced over rows."""
    target, predicted = _as_tensor(target), _as_tensor(predicted)
    if target.shape != predicted.shape:
        raise DimensionError(f"target {target.shape} and predicted {predicted.shape} differ")
    _check_prob(target.data, "target")
    _check_prob(predicted.data, "predicted")
    logp = np.log(predicted.data + LOG_EPS)
    rows = -(target.data * logp).sum(axis=-1)
    value, scale = _reduce(np.atleast_1d(rows), reduction)

    def bw(g):
        gt = -logp * (g * scale) if target.requires_grad else None
        gp = -target.data / (predicted.data + LOG_EPS) * (g * scale) if predicted.requires_grad else None
        return gt, gp

    return _result(value, (target, predicted), bw, "cross_entropy")


def mse(a: Tensor, b: Tensor, reduction: str = "mean") -> Tensor:
    """Squared error summed over the last axis, reduced over rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    rows = (diff ** 2).sum(axis=-1)
    value, scale = _reduce(np.atleast_1d(rows), reduction)

    def bw(g):
        return 2 * diff * g * scale, -2 * diff * g * scale

    return _result(value, (a, b), bw, "mse")


# ------------------------------------------------------------------ backward

def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` set."""
    if loss._backward is None:
        raise StateError("tensor has no recorded graph (leaf or created without requires_grad inputs)")
    if grad is None:
        if loss.size != 1:
            raise StateError("backward on a non-scalar tensor requires an explicit gradient")
        grad = np.ones(loss.shape, dtype=loss.data.dtype)
    grad = np.asarray(grad, dtype=loss.data.dtype)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update applied to ``param`` in place."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(f"adam: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


@dataclass
class Adam:
    """Adam over a fixed list of parameter tensors."""

    params: list
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not self.states:
            self.states = [AdamState.like(p.data, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
                           for p in self.params]

    def step(self) -> None:
        for p, st in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, st, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
