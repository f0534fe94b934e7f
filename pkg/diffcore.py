"""
Diffcore - reverse-mode autodiff for small dense tensors
Tape-recorded numpy ops, MLP layers, Adam and the JSON checkpoint format.

A fresh Tape is built for every forward pass. Nodes are appended in
creation order, so walking the tape backwards is a valid reverse
topological order and every node is visited exactly once.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import CheckpointError, ContractError, DimensionError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "sspg-ckpt-1"


def _unbroadcast(grad, shape):
    """Sum an adjoint back down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Records every node created during one forward pass."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def record(self, values, parents=(), backward_fn=None, op="const", name=None):
        node = TapeNode(self, np.asarray(values, dtype=np.float64), parents, backward_fn, op, name)
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, values):
        return self.record(np.array(values, dtype=np.float64))

    def variable(self, name, values):
        """A named leaf whose gradient backward() reports."""
        if name in self.leaves:
            raise ContractError(f"Leaf {name!r} is already on this tape")
        node = self.record(np.array(values, dtype=np.float64), op="leaf", name=name)
        self.leaves[name] = node
        return node

    def param(self, store, key, trainable=True):
        """Parameter `key` of `store`; one shared leaf per tape, or a plain constant."""
        if not trainable:
            return self.constant(store.params[key])
        name = f"{store.name}/{key}"
        node = self.leaves.get(name)
        if node is None:
            node = self.variable(name, store.params[key])
        return node


class TapeNode:
    # Let numpy defer to our reflected operators (ndarray * node -> node.__rmul__)
    __array_ufunc__ = None

    def __init__(self, tape, values, parents, backward_fn, op, name):
        self.tape = tape
        self.values = values
        self.adjoints = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"TapeNode(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        if isinstance(other, TapeNode):
            return add(self, neg(other))
        return add(self, -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)


def _lift(*operands):
    tape = next((x.tape for x in operands if isinstance(x, TapeNode)), None)
    if tape is None:
        raise ContractError("At least one operand must be a TapeNode")
    return [x if isinstance(x, TapeNode) else tape.constant(x) for x in operands]


def _unary(x, values, local_grad, op):
    """Elementwise op whose derivative is `local_grad(out)`."""
    (x,) = _lift(x)
    out = None

    def backward_fn():
        x.adjoints += out.adjoints * local_grad(out)

    out = x.tape.record(values(x.values), (x,), backward_fn, op)
    return out


def add(a, b):
    a, b = _lift(a, b)
    out = None

    def backward_fn():
        a.adjoints += _unbroadcast(out.adjoints, a.shape)
        b.adjoints += _unbroadcast(out.adjoints, b.shape)

    out = a.tape.record(a.values + b.values, (a, b), backward_fn, "add")
    return out


def mul(a, b):
    a, b = _lift(a, b)
    out = None

    def backward_fn():
        a.adjoints += _unbroadcast(out.adjoints * b.values, a.shape)
        b.adjoints += _unbroadcast(out.adjoints * a.values, b.shape)

    out = a.tape.record(a.values * b.values, (a, b), backward_fn, "mul")
    return out


def div(a, b):
    a, b = _lift(a, b)
    out = None

    def backward_fn():
        a.adjoints += _unbroadcast(out.adjoints / b.values, a.shape)
        b.adjoints += _unbroadcast(-out.adjoints * a.values / b.values**2, b.shape)

    out = a.tape.record(a.values / b.values, (a, b), backward_fn, "div")
    return out


def neg(x):
    return _unary(x, np.negative, lambda out: -1.0, "neg")


def power(x, exponent):
    (x,) = _lift(x)
    out = None

    def backward_fn():
        x.adjoints += out.adjoints * exponent * x.values ** (exponent - 1)

    out = x.tape.record(x.values**exponent, (x,), backward_fn, f"pow{exponent}")
    return out


def square(x):
    return power(x, 2)


def matmul(a, b):
    a, b = _lift(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot matmul {a.shape} by {b.shape}")
    out = None

    def backward_fn():
        a.adjoints += out.adjoints @ b.values.T
        b.adjoints += a.values.T @ out.adjoints

    out = a.tape.record(a.values @ b.values, (a, b), backward_fn, "matmul")
    return out


def relu(x):
    # subgradient at 0 is 0
    (x,) = _lift(x)
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda out: (out.parents[0].values > 0.0), "relu")


def tanh(x):
    return _unary(x, np.tanh, lambda out: 1.0 - out.values**2, "tanh")


def exp(x):
    return _unary(x, np.exp, lambda out: out.values, "exp")


def log(x):
    return _unary(x, np.log, lambda out: 1.0 / out.parents[0].values, "log")


def softplus(x):
    return _unary(
        x,
        lambda v: np.logaddexp(0.0, v),
        lambda out: np.exp(-np.logaddexp(0.0, -out.parents[0].values)),
        "softplus",
    )


def clip(x, low=-np.inf, high=np.inf):
    """Clamp; gradient is zero wherever the clamp is active."""
    return _unary(
        x,
        lambda v: np.clip(v, low, high),
        lambda out: (out.parents[0].values > low) & (out.parents[0].values < high),
        "clip",
    )


def stop_gradient(x):
    (x,) = _lift(x)
    return x.tape.constant(x.values)


def sum_(x, axis=None, keepdims=False):
    (x,) = _lift(x)
    out = None

    def backward_fn():
        grad = out.adjoints
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        x.adjoints += np.broadcast_to(grad, x.shape)

    out = x.tape.record(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), backward_fn, "sum")
    return out


def mean(x, axis=None, keepdims=False):
    (x,) = _lift(x)
    count = x.values.size if axis is None else x.shape[axis]
    return sum_(x, axis, keepdims) * (1.0 / count)


def logsumexp(x, axis=-1):
    (x,) = _lift(x)
    peak = np.max(x.values, axis=axis, keepdims=True)
    values = peak + np.log(np.sum(np.exp(x.values - peak), axis=axis, keepdims=True))
    out = None

    def backward_fn():
        x.adjoints += out.adjoints * np.exp(x.values - out.values)

    out = x.tape.record(values, (x,), backward_fn, "logsumexp")
    return out


def concat(nodes, axis=-1):
    nodes = _lift(*nodes)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])
    out = None

    def backward_fn():
        for node, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            index = [slice(None)] * out.values.ndim
            index[axis] = slice(lo, hi)
            node.adjoints += out.adjoints[tuple(index)]

    out = nodes[0].tape.record(np.concatenate([n.values for n in nodes], axis=axis), nodes, backward_fn, "concat")
    return out


def take_cols(x, start, stop):
    (x,) = _lift(x)
    out = None

    def backward_fn():
        x.adjoints[:, start:stop] += out.adjoints

    out = x.tape.record(x.values[:, start:stop], (x,), backward_fn, "take_cols")
    return out


def backward(root):
    """Populate adjoints for everything upstream of a scalar root.

    Returns {leaf name: gradient} for every named leaf recorded before the
    root; leaves the root does not depend on come back as zeros.
    """
    if root.values.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    nodes = root.tape.nodes[: root.index + 1]
    for node in nodes:
        node.adjoints = np.zeros_like(node.values)
    root.adjoints = np.ones_like(root.values)
    for node in reversed(nodes):
        if node.backward_fn is not None:
            node.backward_fn()
    return {name: leaf.adjoints.copy() for name, leaf in root.tape.leaves.items() if leaf.index <= root.index}


# =============================================================================
# Networks
# =============================================================================

@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden_widths: tuple = ()
    output_width: int = 1
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        widths = self.layer_widths
        if any(w <= 0 for w in widths):
            raise DimensionError(f"All MLP widths must be positive, got {widths}")
        if self.nonlinearity != "relu":
            raise ContractError(f"Unsupported nonlinearity: {self.nonlinearity}")

    @property
    def layer_widths(self):
        return [self.input_width, *self.hidden_widths, self.output_width]


@dataclass
class ParamStore:
    """Named parameter arrays plus their Adam moments."""
    name: str
    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, key, values):
        self.params[key] = np.array(values, dtype=np.float64)
        self.m[key] = np.zeros_like(self.params[key])
        self.v[key] = np.zeros_like(self.params[key])

    def gradients(self, grad_map):
        """Pick this store's entries out of a backward() result."""
        prefix = f"{self.name}/"
        return {
            name[len(prefix):]: grad
            for name, grad in grad_map.items()
            if name.startswith(prefix) and name[len(prefix):] in self.params
        }

    def copy(self, name=None):
        return ParamStore(
            name=name or self.name,
            params={k: v.copy() for k, v in self.params.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step,
        )

    def to_dict(self):
        pack = lambda arrays: {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in arrays.items()}
        return {"step": self.step, "params": pack(self.params), "adam_m": pack(self.m), "adam_v": pack(self.v)}

    @classmethod
    def from_dict(cls, name, data):
        unpack = lambda arrays: {
            k: np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for k, a in arrays.items()
        }
        try:
            return cls(name, unpack(data["params"]), unpack(data["adam_m"]), unpack(data["adam_v"]), int(data["step"]))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Malformed parameter store {name!r}: {e}") from e


def init_mlp(spec, store, rng):
    """Uniform(+-1/sqrt(fan_in)) weights and biases, layer by layer."""
    widths = spec.layer_widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"w{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"b{i}", rng.uniform(-bound, bound, size=(fan_out,)))
    return store


def mlp_forward(spec, params, x, trainable=True):
    """Affine/ReLU stack; `x` is a matrix or a node already on a tape."""
    node = x if isinstance(x, TapeNode) else Tape().constant(x)
    if node.values.ndim != 2 or node.shape[1] != spec.input_width:
        raise DimensionError(f"MLP expects (batch, {spec.input_width}) input, got {node.shape}")
    widths = spec.layer_widths
    n_layers = len(widths) - 1
    h = node
    for i in range(n_layers):
        if params.params[f"w{i}"].shape != (widths[i], widths[i + 1]):
            raise DimensionError(
                f"{params.name}/w{i} has shape {params.params[f'w{i}'].shape}, "
                f"expected {(widths[i], widths[i + 1])}"
            )
        w = node.tape.param(params, f"w{i}", trainable)
        b = node.tape.param(params, f"b{i}", trainable)
        h = h @ w + b
        if i < n_layers - 1:
            h = relu(h)
    return h


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place; returns the store."""
    missing = [key for key in params.params if key not in grads]
    if missing:
        raise ContractError(f"No gradient for {params.name} parameters: {missing}")
    params.step += 1
    bc1 = 1.0 - beta1**params.step
    bc2 = 1.0 - beta2**params.step
    for key, value in params.params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != value.shape:
            raise DimensionError(f"Gradient for {params.name}/{key} has shape {g.shape}, expected {value.shape}")
        m, v = params.m[key], params.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def finite_difference_gradient(fn, values, h=1e-5):
    """Central differences of scalar fn() w.r.t. every entry of `values` (perturbed in place)."""
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


# =============================================================================
# Checkpoints
# =============================================================================

def save_checkpoint(path, stores, extra=None):
    document = {
        "version": CHECKPOINT_VERSION,
        "stores": {store.name: store.to_dict() for store in stores},
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(document, f)
    logger.info(f"Saved checkpoint to {path} ({len(stores)} parameter stores)")


def load_checkpoint(path):
    """Returns ({store name: ParamStore}, extra dict)."""
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    version = document.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint {path} has version {version!r}, expected {CHECKPOINT_VERSION!r}")
    stores = {name: ParamStore.from_dict(name, data) for name, data in document.get("stores", {}).items()}
    return stores, document.get("extra", {})
