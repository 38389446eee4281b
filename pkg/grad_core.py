"""
Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every op executed with grad enabled appends a node to the
graph of its output. backward() collects the nodes reachable from the loss,
orders them by creation id (always topological) and walks them once in
reverse. Also holds the losses, optimizers, gradient checking and the NTCK
parameter checkpoint format used by the world model and the policy.
"""

import hashlib
import itertools
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

GELU_C = 0.7978845608  # sqrt(2 / pi)
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"NTCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class GraphError(ValueError):
    pass


class FullyMaskedRowError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class GradCheckError(ValueError):
    pass


class MissingGradError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


_state = threading.local()
_node_ids = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them (inference on a parameter snapshot)"""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    """One recorded op: inputs, output and the vector-Jacobian product"""

    __slots__ = ("id", "op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array that can take part in a differentiation graph"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------

def _strip_leading_ones(shape: Tuple[int, ...]) -> Tuple[int, ...]:
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return tuple(shape[i:])


def _is_suffix(core: Tuple[int, ...], shape: Tuple[int, ...]) -> bool:
    if not core:
        return True
    return len(core) <= len(shape) and tuple(shape[len(shape) - len(core):]) == core


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Equal shapes, or one shape (minus leading 1s) is a suffix of the other"""
    a, b = tuple(a), tuple(b)
    if a == b:
        return a
    if _is_suffix(_strip_leading_ones(a), b) or _is_suffix(_strip_leading_ones(b), a):
        return tuple(np.broadcast_shapes(a, b))
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", out, (a, b), backward)


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: TensorLike) -> Tensor:
    """tanh approximation"""
    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record("gelu", out, (a,), backward)


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: TensorLike, low: float, high: float) -> Tensor:
    """Gradient passes only strictly inside (low, high)"""
    a = as_tensor(a)
    inside = (a.data > low) & (a.data < high)
    return _record("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise min; ties send the gradient to b"""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    take_a = a.data < b.data
    out = np.where(take_a, a.data, b.data)
    return _record("minimum", out, (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


_UNARY = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: TensorLike, b: Optional[TensorLike] = None, factor: float = 1.0) -> Tensor:
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"elementwise {op} needs two operands")
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, factor)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, backward)


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", a.data[index], (a,), backward)


def gather_last(a: TensorLike, indices: np.ndarray) -> Tensor:
    """out[...] = a[..., indices[...]]"""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _record("gather", out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and attention
# ---------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), backward)


def linear(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax_masked(x: TensorLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; mask True = allowed, blocked entries are exactly 0"""
    x = as_tensor(x)
    if mask is None:
        allowed = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        broadcast_shape(mask.shape, x.shape)
        allowed = np.broadcast_to(mask, x.shape)
    if not np.all(allowed.any(axis=-1)):
        raise FullyMaskedRowError(f"softmax row with every position masked (shape {x.shape})")
    shifted = np.where(allowed, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (x,), backward)


def log_softmax(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (x,), backward)


def attention(q: TensorLike, k: TensorLike, v: TensorLike, mask: Optional[np.ndarray]) -> Tensor:
    """softmax_masked(q kᵀ / sqrt(d_k)) v"""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes disagree: q={q.shape} k={k.shape} v={v.shape}")
    scores = scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax_masked(scores, mask), v)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        g_xhat = g * gain.data
        gx = inv * (g_xhat - g_xhat.mean(axis=-1, keepdims=True)
                    - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record("layer_norm", out, (x, gain, bias), backward)


def unfold1d(x: TensorLike, kernel: int, stride: int, padding: int) -> Tensor:
    """(B, C, L) -> (B, L_out, C*kernel) sliding windows, channel-major"""
    x = as_tensor(x)
    batch, channels, length = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    l_out = (length + 2 * padding - kernel) // stride + 1
    starts = np.arange(l_out) * stride
    idx = starts[:, None] + np.arange(kernel)[None, :]
    cols = padded[:, :, idx]  # (B, C, L_out, K)
    out = cols.transpose(0, 2, 1, 3).reshape(batch, l_out, channels * kernel)

    def backward(g):
        g_cols = g.reshape(batch, l_out, channels, kernel).transpose(0, 2, 1, 3)
        g_padded = np.zeros(padded.shape)
        for k in range(kernel):
            g_padded[:, :, starts + k] += g_cols[..., k]
        return (g_padded[:, :, padding:padding + length],)

    return _record("unfold1d", out, (x,), backward)


def conv1d(x: TensorLike, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x (B, C_in, L), weight (C_out, C_in, K) -> (B, C_out, L_out)"""
    c_out, c_in, kernel = weight.shape
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d input {x.shape} does not match weight {weight.shape}")
    cols = unfold1d(x, kernel, stride, padding)
    flat_w = reshape(weight, (c_out, c_in * kernel))
    out = add(matmul(cols, swap_last(flat_w)), bias)
    return transpose(out, (0, 2, 1))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(pred: TensorLike, target: TensorLike) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def masked_mse(pred: TensorLike, target: TensorLike, weight: np.ndarray) -> Tensor:
    """Mean squared error over entries with non-zero weight"""
    pred = as_tensor(pred)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape != pred.shape:
        raise ShapeError(f"masked_mse weight {weight.shape} does not match prediction {pred.shape}")
    total = weight.sum()
    if total <= 0:
        raise EmptyMaskError("masked_mse got an all-zero mask")
    diff = sub(pred, target)
    return scale(tsum(mul(mul(diff, diff), weight)), 1.0 / total)


def categorical_logprob(logits: TensorLike, actions: np.ndarray) -> Tensor:
    """Per-row log-probability of the chosen action"""
    return gather_last(log_softmax(logits), actions)


def categorical_entropy(logits: TensorLike) -> Tensor:
    """Per-row entropy"""
    logp = log_softmax(logits)
    return scale(tsum(mul(exp(logp), logp), axis=-1), -1.0)


def loss(kind: str, *args) -> Tensor:
    """Scalar loss by name: mse, masked_mse, categorical_logprob (mean), entropy (mean)"""
    if kind == "mse":
        return mse(*args)
    if kind == "masked_mse":
        return masked_mse(*args)
    if kind == "categorical_logprob":
        return mean(categorical_logprob(*args))
    if kind == "entropy":
        return mean(categorical_entropy(*args))
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class Graph:
    """Nodes reachable from one output, in creation (topological) order"""

    def __init__(self, nodes: List[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        seen = {}
        stack = [output.node] if output.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for inp in node.inputs:
                if inp.node is not None and inp.node.id not in seen:
                    stack.append(inp.node)
        return cls([seen[i] for i in sorted(seen)])

    def __len__(self):
        return len(self.nodes)


def backward(loss_tensor: Tensor):
    """Populate .grad of every requires_grad leaf reachable from a scalar loss"""
    if loss_tensor.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss_tensor.shape}")
    if not loss_tensor.requires_grad:
        raise GraphError("loss is not attached to a graph (no input requires grad)")
    if loss_tensor.is_leaf:
        loss_tensor.grad = np.ones(loss_tensor.shape) if loss_tensor.grad is None else loss_tensor.grad + 1.0
        return

    graph = Graph.from_output(loss_tensor)
    pending: Dict[int, np.ndarray] = {id(loss_tensor): np.ones(loss_tensor.shape)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward_fn(g)):
            if g_in is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = g_in.copy() if inp.grad is None else inp.grad + g_in
            else:
                key = id(inp)
                pending[key] = g_in if key not in pending else pending[key] + g_in


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _scalar(value: Tensor) -> float:
    result = float(value.data.reshape(-1)[0])
    if not np.isfinite(result):
        raise GradCheckError(f"function returned a non-finite value: {result}")
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: TensorLike, step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences"""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    _scalar(out)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            shifted = x0.copy().reshape(-1)
            shifted[i] += step
            plus = _scalar(f(Tensor(shifted.reshape(x0.shape))))
            shifted[i] -= 2 * step
            minus = _scalar(f(Tensor(shifted.reshape(x0.shape))))
            flat[i] = (plus - minus) / (2 * step)
    return _relative_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5,
                      coords_per_param: Optional[int] = None, seed: int = 0) -> float:
    """grad_check over model parameters, perturbing them in place.

    coords_per_param limits the number of checked coordinates per tensor
    (chosen with a seeded RNG) so whole models stay affordable.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    _scalar(out)
    backward(out)

    worst = 0.0
    with no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros(p.shape)
            flat_data = p.data.reshape(-1)
            if coords_per_param is None or coords_per_param >= p.size:
                coords = np.arange(p.size)
            else:
                coords = rng.choice(p.size, size=coords_per_param, replace=False)
            numeric = np.zeros(len(coords))
            for j, i in enumerate(coords):
                original = flat_data[i]
                flat_data[i] = original + step
                plus = _scalar(loss_fn())
                flat_data[i] = original - step
                minus = _scalar(loss_fn())
                flat_data[i] = original
                numeric[j] = (plus - minus) / (2 * step)
            worst = max(worst, _relative_error(analytic.reshape(-1)[coords], numeric))
    return worst


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, kind: str, params: Mapping[str, Tensor], lr: float, **hyper) -> "OptimizerState":
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        state = cls(kind=kind, lr=lr, **hyper)
        if kind == "adam":
            state.first_moment = {name: np.zeros(p.shape) for name, p in params.items()}
            state.second_moment = {name: np.zeros(p.shape) for name, p in params.items()}
        return state


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor]):
    """In-place update; grads are left for the caller to zero"""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = p.grad
        if state.kind == "sgd":
            p.data -= state.lr * g
            continue
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grad(params: Mapping[str, Tensor]):
    for p in params.values():
        p.zero_grad()


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale grads so their global L2 norm is at most max_norm; returns the pre-clip norm"""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


# ---------------------------------------------------------------------------
# initialization, checksums, checkpoints
# ---------------------------------------------------------------------------

def init_weight(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, name: str) -> Tensor:
    """Seeded normal init scaled by 1/sqrt(fan_in)"""
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True, name=name)


def init_zeros(shape: Tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_ones(shape: Tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with orthonormal columns (rows >= cols) or rows"""
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def parameter_checksum(params: Mapping[str, Union[Tensor, np.ndarray]]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return digest.hexdigest()


def save_checkpoint(path, params: Mapping[str, Union[Tensor, np.ndarray]]):
    """Write parameters in the NTCK format (little-endian, float64 payload)"""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, value in params.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(data, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an NTCK checkpoint (magic {blob[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        offset = 12
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if offset + 8 * n > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims).astype(np.float64)
            offset += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})")
    return params


def load_into(params: Mapping[str, Tensor], path) -> None:
    """Copy a checkpoint into existing parameters, checking names and shapes"""
    stored = load_checkpoint(path)
    missing = sorted(set(params) - set(stored))
    unexpected = sorted(set(stored) - set(params))
    if missing or unexpected:
        raise CheckpointError(f"{path}: parameter names differ (missing={missing}, unexpected={unexpected})")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name!r} has shape {stored[name].shape}, expected {p.shape}")
        p.data[...] = stored[name]
