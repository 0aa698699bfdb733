"""Minimal reverse-mode differentiation over 64-bit numpy arrays.

Operations executed while a GradientTape is active are recorded in order;
`GradientTape.backward` replays that record in reverse and accumulates
gradients into the `grad` buffer of every leaf tensor created with
`requires_grad=True`. Intermediate results carry no buffer of their own.
"""
import logging
import threading

import numpy as np
from scipy.special import expit

from clefbench.errors import ContractError, ShapeError

logger = logging.getLogger("DIFF")

DTYPE = np.float64
ACTIVATIONS = ("identity", "relu", "sigmoid")
# log(1 - p) is clamped here, as BCE implementations usually do
LOG_FLOOR = -100.0

# one tape stack per thread; a tape is never shared between threads
_local = threading.local()


def _tapes():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tensor:
    def __init__(self, values, requires_grad=False, name=None):
        self.data = np.array(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        # produced by a recorded op, or a leaf that wants gradients
        self._tracked = requires_grad

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def values(self):
        return self.data.ravel()

    def __repr__(self):
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}dims={self.dims}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad.fill(0.0)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor with dims {self.dims}")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradientTape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tracked tensors inside the block
    are appended to `nodes` in execution order, which is a topological order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(self, loss)


def _record(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    tapes = _tapes()
    if tapes and any(t._tracked for t in inputs):
        out._tracked = True
        tapes[-1].nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.
    Grads add to whatever the buffers already hold until zeroed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if loss.requires_grad:
        loss.grad += np.ones_like(loss.data)
        return
    pending = {id(loss): np.ones_like(loss.data)}
    reached = False
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        reached = True
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp._tracked:
                continue
            if inp.requires_grad:
                inp.grad += gi
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi
    if not reached:
        raise ContractError("loss was not produced by an operation on this tape")


def stop_gradient(x):
    """Same values, never tracked: gradients do not flow back through it"""
    return Tensor(as_tensor(x).data)


# --- primitives ---


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} do not broadcast")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), a.data + b.data, grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record("sub", (a, b), a.data - b.data, grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record("mul", (a, b), a.data * b.data, grad_fn)


def neg(x):
    x = as_tensor(x)
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def linear(x, weight, bias):
    """x @ weight.T + bias for x of dims (in,) or (batch, in)"""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim not in (1, 2) or x.dims[-1] != weight.dims[1]:
        raise ShapeError(
            f"linear: input dims {x.dims} do not match weight dims {weight.dims}"
        )
    out = x.data @ weight.data.T + bias.data

    def grad_fn(g):
        g2 = np.atleast_2d(g)
        x2 = np.atleast_2d(x.data)
        gx = (g2 @ weight.data).reshape(x.data.shape)
        return gx, g2.T @ x2, g2.sum(axis=0)

    return _record("linear", (x, weight, bias), out, grad_fn)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    s = expit(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x):
    """log(1/(1+exp(-x))) evaluated as -softplus(-x)"""
    x = as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    # d/dx log sigma(x) = sigma(-x)
    return _record("log_sigmoid", (x,), out, lambda g: (g * expit(-x.data),))


def log1mexp(x):
    """log(1 - exp(x)) for x <= 0, floored at LOG_FLOOR"""
    x = as_tensor(x)
    # largest x whose result stays above the floor
    limit = np.log1p(-np.exp(LOG_FLOOR))
    clipped = np.minimum(x.data, limit)
    # both branches are evaluated, only the stable one is kept
    with np.errstate(divide="ignore"):
        out = np.where(
            clipped > -np.log(2.0),
            np.log(-np.expm1(clipped)),
            np.log1p(-np.exp(clipped)),
        )
    live = x.data <= limit

    def grad_fn(g):
        return (np.where(live, g * (-1.0 / np.expm1(-clipped)), 0.0),)

    return _record("log1mexp", (x,), out, grad_fn)


def softmax_logprobs(x, axis=-1):
    """Log-probabilities over `axis` by max-shifted log-sum-exp"""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _record("softmax_logprobs", (x,), out, grad_fn)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def sum(x, axis=None):
    x = as_tensor(x)
    shape = x.data.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), np.sum(x.data, axis=axis), grad_fn)


def mean(x, axis=None):
    x = as_tensor(x)
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", (x,), np.mean(x.data, axis=axis), grad_fn)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, grad_fn)


def activate(x, activation):
    if activation == "identity":
        return x
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"Unknown activation {activation}")


# --- layers ---


class DenseLayer:
    def __init__(self, weight, bias, activation="identity", name="dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation {activation}")
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self.name = name
        if weight.data.ndim != 2 or bias.dims != (weight.dims[0],):
            raise ShapeError(
                f"{name}: weight dims {weight.dims} inconsistent with bias {bias.dims}"
            )

    @classmethod
    def create(cls, in_width, out_width, activation="identity", rng=None,
               zero=False, name="dense"):
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias"""
        if zero:
            w = np.zeros((out_width, in_width))
        else:
            bound = 1.0 / np.sqrt(in_width)
            w = rng.uniform(-bound, bound, size=(out_width, in_width))
        return cls(
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(out_width), requires_grad=True, name=f"{name}.bias"),
            activation,
            name,
        )

    @property
    def in_width(self):
        return self.weight.dims[1]

    @property
    def out_width(self):
        return self.weight.dims[0]

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return dense_forward(self, x)


def dense_forward(layer, x):
    return activate(linear(x, layer.weight, layer.bias), layer.activation)


# --- gradient checking ---


def finite_diff_grad(f, theta, h=1e-5):
    """Central-difference gradient of the scalar function f at theta.

    f is called with no arguments and must read theta; theta's values are
    perturbed in place one coordinate at a time and restored exactly.
    """
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    flat = theta.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = float(f())
        flat[i] = original - h
        lower = float(f())
        flat[i] = original
        grad[i] = (upper - lower) / (2.0 * h)
    return Tensor(grad.reshape(theta.data.shape))


def relative_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))
