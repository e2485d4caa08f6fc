"""N-dimensional float64 tensors with reverse-mode differentiation.

Implements exactly the operations the spectrogram model needs: batched
matmul, broadcasting add/mul, relu/softplus/dropout, last-axis softmax,
layer normalization, reshape/transpose, and sum/mean reductions. The graph
is built dynamically during the forward pass; nodes record a construction
sequence number, and `backward` replays them in reverse construction order
(a valid topological order, since inputs always exist before their
consumers) and then frees the graph.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import RngState

_SEQ = itertools.count()


class Tensor:
    """A real-valued array plus the bookkeeping for reverse-mode gradients.

    Leaves created with requires_grad=True carry an eagerly allocated
    `.grad` buffer (zeros), so an unused leaf reports a zero gradient and
    optimizers can always read `.grad` after `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_SEQ)

    # -- introspection -------------------------------------------------

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
        if self.data.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`.

        `self` must be scalar (a single element). The graph is freed
        afterwards; a second backward through the same nodes is not
        supported (build a fresh forward pass instead).
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tensor] = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out._seq = next(_SEQ)
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.asarray(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and linear algebra ----------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(grad):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def power(x, exponent) -> Tensor:
    x = _lift(x)
    p = float(exponent)
    data = x.data ** p

    def backward(grad):
        _accumulate(x, grad * p * x.data ** (p - 1.0))

    return _node(data, (x,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading extents must agree or broadcast from 1.

    Gradients follow dA = dC . B^T and dB = A^T . dC, summed over broadcast
    batch axes.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch extents disagree for {a.shape} x {b.shape}") from exc

    if b.data.ndim == 2 and a.data.ndim > 2:
        # (..., m, k) @ (k, n): one flattened GEMM instead of a GEMM per slice.
        lead = a.data.shape[:-1]
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.data.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.data.shape[-1],))

        def backward(grad):
            g2 = np.ascontiguousarray(grad).reshape(-1, grad.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                _accumulate(b, a2.T @ g2)

        return _node(data, (a, b), backward)

    data = a.data @ b.data

    def backward(grad):
        if a.requires_grad:
            ga = grad @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ grad
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


# -- activations -------------------------------------------------------------


def relu(x) -> Tensor:
    x = _lift(x)
    data = np.maximum(x.data, 0.0)

    def backward(grad):
        _accumulate(x, grad * (x.data > 0.0))

    return _node(data, (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign to avoid exp overflow on either tail.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x) -> Tensor:
    """ln(1 + e^x), computed as logaddexp(0, x) so large x stays linear."""
    x = _lift(x)
    data = np.logaddexp(0.0, x.data)

    def backward(grad):
        _accumulate(x, grad * _sigmoid(x.data))

    return _node(data, (x,), backward)


def dropout(x, p: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    In eval mode (training=False) the input is returned unchanged.
    """
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = _lift(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode requires an RngState")
    keep = rng.gen.random(x.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale

    def backward(grad):
        _accumulate(x, grad * keep * scale)

    return _node(data, (x,), backward)


# -- normalization -----------------------------------------------------------


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis, with max-subtraction for stability."""
    x = _lift(x)
    if x.ndim < 1 or x.data.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim needs a non-empty last axis, got {x.shape}")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(grad):
        gx = grad - (grad * y).sum(axis=-1, keepdims=True)
        gx *= y
        _accumulate(x, gx)

    return _node(y, (x,), backward)


def layer_norm(x, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply an
    optional affine (gamma, beta). Pass gamma=beta=None for the plain,
    parameterless normalization."""
    if eps <= 0.0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    if (gamma is None) != (beta is None):
        raise ContractError("layer_norm: gamma and beta must be given together")
    x = _lift(x)
    d = x.data.shape[-1]
    if d < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    affine = gamma is not None
    if affine:
        gamma, beta = _lift(gamma), _lift(beta)
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(
                f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last axis {d}"
            )

    xhat = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.mean(xhat * xhat, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    if affine:
        data = xhat * gamma.data
        data += beta.data
    else:
        data = xhat

    def backward(grad):
        if affine:
            dxhat = grad * gamma.data
            _accumulate(gamma, (grad * xhat).reshape(-1, d).sum(axis=0))
            _accumulate(beta, grad.reshape(-1, d).sum(axis=0))
        else:
            dxhat = grad
        # Standard layer-norm input gradient:
        # dx = inv/d * (d*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        gx = dxhat if affine else dxhat.copy()  # affine path owns dxhat
        gx -= (s1 + xhat * s2) * (1.0 / d)
        gx *= inv
        _accumulate(x, gx)

    parents = (x, gamma, beta) if affine else (x,)
    return _node(data, parents, backward)


# -- shape manipulation -------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(grad):
        _accumulate(x, grad.reshape(old))

    return _node(data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(int(a) for a in np.argsort(axes))
    # Materialize: downstream matmuls on strided views fall off the fast path.
    data = np.ascontiguousarray(np.transpose(x.data, axes))

    def backward(grad):
        _accumulate(x, np.ascontiguousarray(np.transpose(grad, inverse)))

    return _node(data, (x,), backward)


# -- reductions ---------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(grad):
        g = grad
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(data, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)
