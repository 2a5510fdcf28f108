"""A minimal reverse-mode autodiff tape over float64 arrays.

The primitive set is deliberately small (what a conditional VAE needs):
add, sub, mul, matmul, tanh, silu, exp, log, sum, mean, abs, square.
Elementwise ops require identical shapes; there is no broadcasting.
"""

from dataclasses import dataclass

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_FORWARD = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "matmul": lambda a, b: a @ b,
    "tanh": np.tanh,
    "silu": lambda x: x * _sigmoid(x),
    "exp": np.exp,
    "log": np.log,
    "sum": lambda x: np.asarray(x.sum()),
    "mean": lambda x: np.asarray(x.mean()),
    "abs": np.abs,
    "square": lambda x: x * x,
}

_ELEMENTWISE_BINARY = {"add", "sub", "mul"}


def _vjp(op, g, inputs, out):
    """Vector-Jacobian products of ``op`` for each input."""
    if op == "add":
        return g, g
    if op == "sub":
        return g, -g
    if op == "mul":
        a, b = inputs
        return g * b, g * a
    if op == "matmul":
        a, b = inputs
        return g @ b.T, a.T @ g
    (x,) = inputs
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "silu":
        s = _sigmoid(x)
        return (g * s * (1.0 + x * (1.0 - s)),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / x,)
    if op == "sum":
        return (np.full(x.shape, float(g)),)
    if op == "mean":
        return (np.full(x.shape, float(g) / x.size),)
    if op == "abs":
        return (g * np.sign(x),)
    if op == "square":
        return (2.0 * g * x,)
    raise KeyError(op)


@dataclass
class _Node:
    op: str  # "leaf" for constants and parameters
    inputs: tuple
    value: np.ndarray


class Var:
    __slots__ = ("tape", "id")

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes = []
        self.parameters = set()

    def _push(self, op, inputs, value):
        self.nodes.append(_Node(op, tuple(inputs), value))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value):
        return self._push("leaf", (), np.array(value, dtype=np.float64))

    def parameter(self, value):
        v = self.constant(value)
        self.parameters.add(v.id)
        return v

    def _lift(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("variable belongs to another tape")
            return x
        return self.constant(x)

    def apply(self, op, *args):
        args = [self._lift(a) for a in args]
        vals = [a.value for a in args]
        if op in _ELEMENTWISE_BINARY and vals[0].shape != vals[1].shape:
            raise ValueError(f"{op}: shape mismatch {vals[0].shape} vs {vals[1].shape}")
        if op == "matmul" and (vals[0].ndim != 2 or vals[1].ndim != 2 or vals[0].shape[1] != vals[1].shape[0]):
            raise ValueError(f"matmul: incompatible shapes {vals[0].shape} @ {vals[1].shape}")
        return self._push(op, [a.id for a in args], _FORWARD[op](*vals))

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def tanh(self, x):
        return self.apply("tanh", x)

    def silu(self, x):
        return self.apply("silu", x)

    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x):
        return self.apply("log", x)

    def sum(self, x):
        return self.apply("sum", x)

    def mean(self, x):
        return self.apply("mean", x)

    def abs(self, x):
        return self.apply("abs", x)

    def square(self, x):
        return self.apply("square", x)

    def replay(self, leaf_values=None):
        """Recompute every node from the leaves (optionally overriding some leaves)."""
        leaf_values = leaf_values or {}
        vals = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                vals.append(np.asarray(leaf_values.get(i, node.value), dtype=np.float64))
            else:
                vals.append(_FORWARD[node.op](*(vals[j] for j in node.inputs)))
        return vals


def backward(tape, output):
    """Gradients of the scalar node ``output`` w.r.t. every trainable leaf."""
    out_id = output.id if isinstance(output, Var) else int(output)
    if tape.nodes[out_id].value.shape not in ((), (1,)):
        raise ValueError("backward: output must be a scalar node")
    grads = {out_id: np.ones_like(tape.nodes[out_id].value)}
    for i in range(out_id, -1, -1):
        g = grads.pop(i, None) if i not in tape.parameters else grads.get(i)
        node = tape.nodes[i]
        if g is None or node.op == "leaf":
            continue
        ins = [tape.nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, _vjp(node.op, g, ins, node.value)):
            grads[j] = grads[j] + gj if j in grads else gj
    return {p: grads.get(p, np.zeros_like(tape.nodes[p].value)) for p in tape.parameters}
