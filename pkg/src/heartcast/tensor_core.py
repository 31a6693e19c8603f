"""Dense float64 tensors with eager reverse-mode automatic differentiation.

A graph is recorded only while some operand requires a gradient.  Each
forward pass builds a fresh graph; ``backward`` walks it once in reverse
topological order and the graph is discarded afterwards.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

#: Name of the pinned bit generator, stored in checkpoints and run metadata.
RNG_ALGORITHM = "numpy.random.Philox (counter-based 4x64)"

LAYER_NORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op=""):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor from external data, rejecting NaN/Inf and empty extents."""
    arr = np.array(data, dtype=np.float64)
    if any(n == 0 for n in arr.shape):
        raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor data contains NaN or Inf")
    return Tensor(arr, requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def custom_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str = "custom") -> Tensor:
    """Wrap an externally computed result as a graph node.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per parent, each shaped like that parent.
    """
    if type(parents) is not tuple:
        parents = tuple(parents)
    for p in parents:
        if p.requires_grad:
            return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data)


_node = custom_op


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _bw(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), _bw, "mul")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


_TANH_BOUND = np.nextafter(1.0, 0.0)


def tanh_elem(x: Tensor) -> Tensor:
    """Elementwise tanh, clipped to the open interval (-1, 1)."""
    out = np.clip(np.tanh(x.data), -_TANH_BOUND, _TANH_BOUND)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu_elem(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _node(out, (x,), lambda g: (g * (out > 0),), "relu")


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = a.data.transpose(axes)

    def _bw(g):
        inv = [0] * len(axes)
        for i, ax in enumerate(axes):
            inv[ax] = i
        return (g.transpose(inv),)

    return _node(out, (a,), _bw, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), _bw, "matmul")


def linear(x, weights, bias) -> Tensor:
    """``x @ swap(weights) + bias`` as a single node.

    ``weights`` is ``[..., out, in]``; leading axes of all three operands
    broadcast as in :func:`matmul` and :func:`add`.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim < 2 or weights.ndim < 2:
        raise DimensionError("linear operands must have at least 2 dimensions")
    if x.shape[-1] != weights.shape[-1]:
        raise DimensionError(f"linear: input {x.shape} does not match weights {weights.shape}")
    wt = np.swapaxes(weights.data, -1, -2)
    out = np.matmul(x.data, wt) + bias.data

    def _bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = unbroadcast(np.matmul(g, weights.data), x.shape)
        if weights.requires_grad:
            gw = unbroadcast(np.matmul(np.swapaxes(g, -1, -2), x.data), weights.shape)
        if bias.requires_grad:
            gb = unbroadcast(g, bias.shape)
        return gx, gw, gb

    return _node(out, (x, weights, bias), _bw, "linear")


def dense_stack(x, weights, biases) -> Tensor:
    """Chain of :func:`linear` layers with ReLU between them, as one node.

    Same arithmetic as composing :func:`linear` and :func:`relu_elem`; the
    fusion only removes per-node overhead from the hot attention path.
    """
    x = as_tensor(x)
    weights = [as_tensor(w) for w in weights]
    biases = [as_tensor(b) for b in biases]
    if len(weights) != len(biases) or not weights:
        raise DimensionError("a stack needs matching, non-empty weight and bias lists")
    inputs = []  # input of every layer, after the ReLU
    pre = []     # output of every layer but the last, before the ReLU
    h = x.data
    for i, (w, b) in enumerate(zip(weights, biases)):
        if h.shape[-1] != w.shape[-1]:
            raise DimensionError(f"stack layer {i}: weight {w.shape} does not accept input {h.shape}")
        if i:
            pre.append(h)
            h = np.maximum(h, 0.0)
        inputs.append(h)
        h = np.matmul(h, np.swapaxes(w.data, -1, -2)) + b.data

    def _bw(g):
        gws, gbs = [None] * len(weights), [None] * len(biases)
        for i in range(len(weights) - 1, -1, -1):
            w, b = weights[i], biases[i]
            if w.requires_grad:
                gws[i] = unbroadcast(np.matmul(np.swapaxes(g, -1, -2), inputs[i]), w.shape)
            if b.requires_grad:
                gbs[i] = unbroadcast(g, b.shape)
            if i == 0 and not x.requires_grad:
                break
            g = np.matmul(g, w.data)
            if i:
                g = g * (pre[i - 1] > 0)
        gx = unbroadcast(g, x.shape) if x.requires_grad else None
        return (gx, *gws, *gbs)

    return _node(h, (x, *weights, *biases), _bw, "dense_stack")


def dense_apply(x, weights, bias) -> Tensor:
    """Affine map ``weights @ x + bias`` over the last axis of ``x``.

    ``x`` may be a vector ``[n]`` or carry leading batch axes ``[..., n]``.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or bias.ndim != 1:
        raise DimensionError("weights must be a matrix and bias a vector")
    m, n = weights.shape
    if x.shape[-1] != n or bias.shape[0] != m:
        raise DimensionError(f"dense_apply: x{x.shape}, weights{weights.shape}, bias{bias.shape}")
    if x.ndim == 1:
        y = matmul(reshape(x, (1, n)), transpose(weights))
        return add(reshape(y, (m,)), bias)
    return add(matmul(x, transpose(weights)), bias)


# -- normalisation ----------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax needs at least one element along the axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), _bw, "softmax")


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis with the biased (1/n) variance.

    ``gamma`` and ``beta`` broadcast against the last axis.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    n = x.shape[-1]
    # sum / n rounds exactly like ndarray.mean, without its Python overhead
    mu = x.data.sum(axis=-1, keepdims=True) / n
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) / n
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        if gamma.requires_grad:
            ggamma = unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbeta = unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), _bw, "layer_norm")


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))
    return mul(x, Tensor(keep))


# -- reverse pass -----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    Returns a map from leaf tensor to its gradient.  Intermediate gradients
    are freed as soon as they have been propagated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.array(g, dtype=np.float64)
            node.grad = g if node.grad is None else node.grad + g
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


# -- randomness -------------------------------------------------------------

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """A Philox generator keyed by ``seed`` and optional stream indices.

    Distinct ``stream`` tuples give statistically independent generators,
    which is how per-cell and per-purpose streams are split from one seed.
    """
    if seed < 0 or seed >= 2**64:
        raise ConfigurationError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))
