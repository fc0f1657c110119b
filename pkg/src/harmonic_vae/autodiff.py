"""Reverse-mode automatic differentiation for dense feed-forward networks.

The engine works at array granularity: every recorded node holds a numpy
array and a list of (parent, vector-Jacobian product) pairs.  Nodes are
appended in evaluation order, which is already a topological order, so the
backward sweep is a single reversed pass over the tape.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    """A network changed between the recorded forward pass and backward."""


class Node:
    __slots__ = ("tape", "index", "value", "parents")

    def __init__(self, tape: "GradientTape", value: np.ndarray, parents=()):
        self.tape = tape
        self.value = value
        self.parents: tuple[tuple[Node, Callable], ...] = tuple(parents)
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self.tape.lift(other)))

    def __rsub__(self, other):
        return add(self.tape.lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class GradientTape:
    """Records one forward evaluation; ``backward`` replays it in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._versions: dict[int, tuple["DenseNetwork", int]] = {}
        self.param_nodes: dict[tuple[int, int], Node] = {}
        self.input_node: Node | None = None
        self.output_node: Node | None = None

    def variable(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=float))

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=float))

    def lift(self, value) -> Node:
        return value if isinstance(value, Node) else self.constant(value)

    def watch(self, net: "DenseNetwork"):
        """Leaf nodes for the parameters of ``net`` (one per weight and bias)."""
        key = id(net)
        if key not in self._versions:
            self._versions[key] = (net, net.version)
            for i, p in enumerate(net.params()):
                self.param_nodes[(key, i)] = self.variable(p)
        return [self.param_nodes[(key, i)] for i in range(2 * len(net.layers))]

    def check_fresh(self):
        for net, version in self._versions.values():
            if net.version != version:
                raise StaleTapeError("network parameters changed after the forward pass")

    def gradients(self, output: Node, seed=None) -> list[np.ndarray | None]:
        """Adjoint of every node with respect to ``output`` seeded by ``seed``."""
        self.check_fresh()
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if seed is None:
            if output.value.size != 1:
                raise ValueError("a seed gradient is required for non-scalar outputs")
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=float)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")
        grads[output.index] = seed
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if grads[parent.index] is None:
                    grads[parent.index] = contrib
                else:
                    grads[parent.index] = grads[parent.index] + contrib
        return grads

    def grad_of(self, grads, node: Node) -> np.ndarray:
        g = grads[node.index]
        return np.zeros_like(node.value) if g is None else g

    def network_gradients(self, grads, net: "DenseNetwork") -> list[np.ndarray]:
        return [self.grad_of(grads, n) for n in self.watch(net)]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    return Node(tape, a.value + b.value,
                ((a, lambda g, s=a.shape: _unbroadcast(g, s)),
                 (b, lambda g, s=b.shape: _unbroadcast(g, s))))


def neg(a: Node) -> Node:
    return Node(a.tape, -a.value, ((a, lambda g: -g),))


def mul(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return Node(tape, av * bv,
                ((a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape))))


def square(a: Node) -> Node:
    v = a.value
    return Node(a.tape, v * v, ((a, lambda g: 2.0 * g * v),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(a.tape, out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    v = a.value
    return Node(a.tape, np.log(v), ((a, lambda g: g / v),))


def clip(a: Node, lo: float, hi: float) -> Node:
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return Node(a.tape, np.clip(v, lo, hi), ((a, lambda g: g * inside),))


def sum_(a: Node, axis=None) -> Node:
    shape = a.shape
    if axis is None:
        return Node(a.tape, np.asarray(a.value.sum()),
                    ((a, lambda g: np.broadcast_to(g, shape).copy()),))
    return Node(a.tape, a.value.sum(axis=axis),
                ((a, lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy()),))


def mean(a: Node) -> Node:
    return mul(sum_(a), 1.0 / a.value.size)


def affine(x: Node, W: Node, b: Node) -> Node:
    """x @ W^T + b for a batch x of shape (B, in)."""
    xv, Wv = x.value, W.value
    return Node(x.tape, xv @ Wv.T + b.value,
                ((x, lambda g: g @ Wv),
                 (W, lambda g: g.T @ xv),
                 (b, lambda g: g.sum(axis=0))))


def _sigmoid(u):
    # logistic via tanh: overflow-free for any finite u
    out = np.tanh(0.5 * u)
    out *= 0.5
    out += 0.5
    return out


def activate(a: Node, name: str) -> Node:
    v = a.value
    if name == "identity":
        return a
    if name == "sigmoid":
        out = _sigmoid(v)
        return Node(a.tape, out, ((a, lambda g: g * out * (1.0 - out)),))
    if name == "tanh":
        out = np.tanh(v)
        return Node(a.tape, out, ((a, lambda g: g * (1.0 - out * out)),))
    if name == "relu":
        mask = v > 0
        return Node(a.tape, v * mask, ((a, lambda g: g * mask),))
    raise ValueError(f"unknown activation {name!r}")


ACTIVATION_LIPSCHITZ = {"sigmoid": 0.25, "tanh": 1.0, "relu": 1.0, "identity": 1.0}


def apply_activation(u: np.ndarray, name: str) -> np.ndarray:
    if name == "identity":
        return u
    if name == "sigmoid":
        return _sigmoid(u)
    if name == "tanh":
        return np.tanh(u)
    if name == "relu":
        return np.maximum(u, 0.0)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be (out, in) with bias (out,)")
        if self.activation not in ACTIVATION_LIPSCHITZ:
            raise ValueError(f"unknown activation {self.activation!r}")


class DenseNetwork:
    """A chain of affine layers, each followed by an elementwise activation."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("adjacent layer dimensions do not chain")
        self.layers = list(layers)
        self.version = 0

    @classmethod
    def init(cls, sizes: Sequence[int], activations, rng: np.random.Generator) -> "DenseNetwork":
        """Glorot-uniform weights, zero biases.

        ``activations`` is one name per layer, or a single name used for the
        hidden layers with an identity output layer.
        """
        n_layers = len(sizes) - 1
        if n_layers < 1:
            raise ValueError("need at least input and output sizes")
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ValueError(f"{len(activations)} activations for {n_layers} layers")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(W, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [l.weight.shape[0] for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend((l.weight, l.bias))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter list length mismatch")
        for l, W, b in zip(self.layers, params[::2], params[1::2]):
            if W.shape != l.weight.shape or b.shape != l.bias.shape:
                raise ValueError("parameter shape mismatch")
            l.weight, l.bias = np.asarray(W, dtype=float), np.asarray(b, dtype=float)
        self.version += 1

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        out, i = [], 0
        for p in self.params():
            out.append(np.asarray(flat[i:i + p.size], dtype=float).reshape(p.shape))
            i += p.size
        self.set_params(out)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __call__(self, x) -> np.ndarray:
        """Plain evaluation without recording; accepts (in,) or (B, in)."""
        h = np.asarray(x, dtype=float)
        single = h.ndim == 1
        h = np.atleast_2d(h)
        for l in self.layers:
            h = apply_activation(h @ l.weight.T + l.bias, l.activation)
        return h[0] if single else h

    def apply(self, tape: GradientTape, x: Node) -> Node:
        """Record this network applied to ``x`` on ``tape``."""
        if x.value.shape[-1] != self.in_dim:
            raise ValueError(f"input dimension {x.value.shape[-1]} != network input {self.in_dim}")
        params = tape.watch(self)
        h = x
        for i, l in enumerate(self.layers):
            h = activate(affine(h, params[2 * i], params[2 * i + 1]), l.activation)
        return h

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "in": l.weight.shape[1],
                    "out": l.weight.shape[0],
                    "activation": l.activation,
                    "weight": _encode(l.weight),
                    "bias": _encode(l.bias),
                }
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetwork":
        layers = []
        for spec in d["layers"]:
            W = _decode(spec["weight"]).reshape(spec["out"], spec["in"])
            layers.append(Layer(W, _decode(spec["bias"]), spec["activation"]))
        return cls(layers)

    def __eq__(self, other):
        if not isinstance(other, DenseNetwork) or len(self.layers) != len(other.layers):
            return NotImplemented if not isinstance(other, DenseNetwork) else False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )


def _encode(a: np.ndarray) -> str:
    return " ".join("%.17g" % v for v in np.ravel(a))


def _decode(s: str) -> np.ndarray:
    return np.array([float(v) for v in s.split()], dtype=float)


@dataclass
class NetworkGradients:
    params: list[np.ndarray]
    input: np.ndarray


def forward(net: DenseNetwork, x) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != network input {net.in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    tape = GradientTape()
    tape.input_node = tape.variable(np.atleast_2d(x))
    tape.output_node = net.apply(tape, tape.input_node)
    out = tape.output_node.value
    return (out[0] if x.ndim == 1 else out), tape


def backward(tape: GradientTape, seed_gradient, net: DenseNetwork | None = None) -> NetworkGradients:
    """Gradients of <seed, output> w.r.t. the parameters and the input."""
    if tape.output_node is None or tape.input_node is None:
        raise ValueError("tape was not produced by forward()")
    seed = np.asarray(seed_gradient, dtype=float)
    single = seed.ndim == 1 and tape.input_node.value.shape[0] == 1
    grads = tape.gradients(tape.output_node, np.atleast_2d(seed) if single else seed)
    if net is None:
        (net, _), = tape._versions.values()
    g_in = tape.grad_of(grads, tape.input_node)
    return NetworkGradients(tape.network_gradients(grads, net), g_in[0] if single else g_in)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns (new_params, state).

    Non-finite gradients skip the step and leave both params and state unchanged.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("parameter/gradient shape mismatch")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        logger.warning("non-finite gradient at Adam step %d; step skipped", state.t + 1)
        return list(params), state
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    step = state.lr / bc1
    new = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        new.append(p - step * m / denom)
    return new, state


def save_network(net: DenseNetwork, path) -> None:
    with open(path, "w") as fh:
        json.dump({"version": CHECKPOINT_VERSION, "network": net.to_dict()}, fh, indent=1)


def load_network(path) -> DenseNetwork:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    return DenseNetwork.from_dict(doc["network"])
