"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

A :class:`Graph` is declared once (inputs, parameters, ops) and then run
repeatedly: :meth:`Graph.forward` evaluates every node in declaration order,
which is a topological order by construction, and :meth:`Graph.backward`
sweeps it in reverse. Parameter gradients accumulate across backward calls
until the optimizer zeroes them, so several losses can be combined with
their own coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

PROB_EPS = 1e-7

OP_KINDS = (
    "input",
    "matmul",
    "add-bias",
    "relu",
    "softmax-xent",
    "sigmoid-bce",
    "grad-scale",
    "sum",
    "scale",
)


class GraphError(ValueError):
    """Raised for malformed feeds, shapes, or out-of-order calls."""


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    lr_mult: float = 1.0
    name: str = ""
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, ndmin=2)
        if self.value.ndim != 2:
            raise GraphError(f"parameter {self.name!r} must be 2-D")
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


class Node:
    __slots__ = ("id", "op", "inputs", "name", "value", "grad", "attrs")

    def __init__(self, id, op, inputs, name="", attrs=None):
        self.id = id
        self.op = op
        self.inputs = tuple(inputs)
        self.name = name
        self.value = None
        self.grad = None
        self.attrs = attrs or {}

    def __repr__(self):
        return f"Node({self.id}, {self.op!r}, name={self.name!r})"

    @property
    def factor(self) -> float:
        return self.attrs["factor"]

    @factor.setter
    def factor(self, value: float) -> None:
        if self.op != "grad-scale":
            raise GraphError(f"node {self.id} has no factor")
        if not math.isfinite(value):
            raise GraphError(f"grad-scale factor must be finite, got {value}")
        self.attrs["factor"] = float(value)


def _sigmoid(z):
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


sigmoid = _sigmoid


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._inputs: dict[str, Node] = {}
        self._params: dict[int, Parameter] = {}
        self._forwarded = False

    def _add(self, op, inputs, name="", **attrs) -> Node:
        for n in inputs:
            if not isinstance(n, Node) or n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise GraphError(f"input {n!r} does not belong to this graph")
        node = Node(len(self.nodes), op, inputs, name, attrs)
        self.nodes.append(node)
        self._forwarded = False
        return node

    # -- declarations -----------------------------------------------------

    def input(self, name: str, cols: int) -> Node:
        if name in self._inputs:
            raise GraphError(f"duplicate input name {name!r}")
        node = self._add("input", (), name, cols=int(cols))
        self._inputs[name] = node
        return node

    def param(self, p: Parameter) -> Node:
        node = self._add("input", (), p.name, cols=p.shape[1], rows=p.shape[0])
        self._params[node.id] = p
        return node

    def matmul(self, a: Node, b: Node, name="") -> Node:
        return self._add("matmul", (a, b), name)

    def add_bias(self, a: Node, b: Node, name="") -> Node:
        return self._add("add-bias", (a, b), name)

    def relu(self, a: Node, name="") -> Node:
        return self._add("relu", (a,), name)

    def grad_scale(self, a: Node, factor: float = -1.0, name="") -> Node:
        if not math.isfinite(factor):
            raise GraphError(f"grad-scale factor must be finite, got {factor}")
        return self._add("grad-scale", (a,), name, factor=float(factor))

    def sum(self, *nodes: Node, name="") -> Node:
        """Scalar sum of every element of every argument."""
        if not nodes:
            raise GraphError("sum needs at least one input")
        return self._add("sum", nodes, name)

    def scale(self, a: Node, c: float, name="") -> Node:
        return self._add("scale", (a,), name, c=float(c))

    def softmax_xent(self, logits: Node, onehot: Node, weights: Node | None = None,
                     normalizer: float | None = None, name="") -> Node:
        """Cross-entropy of softmax(logits) against one-hot rows.

        Value is ``sum_i w_i * -log p_i,y_i / n`` with ``n`` the batch rows
        unless ``normalizer`` is given; probabilities are clamped to
        [1e-7, 1 - 1e-7] before the log.
        """
        inputs = (logits, onehot) if weights is None else (logits, onehot, weights)
        return self._add("softmax-xent", inputs, name, normalizer=normalizer)

    def sigmoid_bce(self, logits: Node, targets: Node, weights: Node | None = None,
                    normalizer: float | None = None, name="") -> Node:
        inputs = (logits, targets) if weights is None else (logits, targets, weights)
        return self._add("sigmoid-bce", inputs, name, normalizer=normalizer)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def input_node(self, name: str) -> Node:
        return self._inputs[name]

    # -- evaluation -------------------------------------------------------

    def forward(self, feed: Mapping[str | Node, np.ndarray]) -> dict[int, np.ndarray]:
        resolved: dict[int, np.ndarray] = {}
        for key, arr in feed.items():
            node = key if isinstance(key, Node) else self._inputs.get(key)
            if node is None or node.op != "input" or node.id in self._params:
                raise GraphError(f"feed key {key!r} is not a declared input")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != node.attrs["cols"]:
                raise GraphError(
                    f"node {node.id} ({node.name}): expected (rows, {node.attrs['cols']}), "
                    f"got {arr.shape}")
            resolved[node.id] = arr
        for node in self.nodes:
            node.grad = None
            if node.op == "input":
                if node.id in self._params:
                    v = self._params[node.id].value
                elif node.id in resolved:
                    v = resolved[node.id]
                else:
                    raise GraphError(f"node {node.id} ({node.name}): no value fed")
            else:
                v = self._eval(node)
            if not math.isfinite(float(v.sum())):
                raise GraphError(f"node {node.id} ({node.name or node.op}): non-finite value")
            node.value = v
        self._forwarded = True
        return {n.id: n.value for n in self.nodes}

    def _eval(self, node: Node) -> np.ndarray:
        op = node.op
        xs = [i.value for i in node.inputs]
        if op == "matmul":
            a, b = xs
            if a.shape[1] != b.shape[0]:
                raise GraphError(f"node {node.id} ({node.name}): matmul {a.shape} @ {b.shape}")
            return a @ b
        if op == "add-bias":
            a, b = xs
            if b.shape != (1, a.shape[1]):
                raise GraphError(f"node {node.id} ({node.name}): bias {b.shape} for {a.shape}")
            return a + b
        if op == "relu":
            return np.maximum(xs[0], 0.0)
        if op == "grad-scale":
            return xs[0]
        if op == "scale":
            return node.attrs["c"] * xs[0]
        if op == "sum":
            return np.array([[float(sum(x.sum() for x in xs))]])
        if op == "softmax-xent":
            logits, onehot = xs[0], xs[1]
            w = xs[2] if len(xs) > 2 else None
            self._check_loss_shapes(node, logits, onehot, w)
            p = softmax(logits)
            node.attrs["_p"] = p
            py = np.clip((p * onehot).sum(axis=1, keepdims=True), PROB_EPS, 1 - PROB_EPS)
            per = -np.log(py)
            return np.array([[self._reduce(node, per, w, logits.shape[0])]])
        if op == "sigmoid-bce":
            logits, y = xs[0], xs[1]
            w = xs[2] if len(xs) > 2 else None
            self._check_loss_shapes(node, logits, y, w)
            if logits.shape[1] != 1:
                raise GraphError(f"node {node.id} ({node.name}): bce expects one logit column")
            p = _sigmoid(logits)
            node.attrs["_p"] = p
            pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
            per = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
            return np.array([[self._reduce(node, per, w, logits.shape[0])]])
        raise GraphError(f"unknown op {op!r}")

    @staticmethod
    def _check_loss_shapes(node, logits, target, w):
        if target.shape != logits.shape:
            raise GraphError(f"node {node.id} ({node.name}): target {target.shape} vs logits {logits.shape}")
        if w is not None and w.shape != (logits.shape[0], 1):
            raise GraphError(f"node {node.id} ({node.name}): weights {w.shape}")
        if logits.shape[0] == 0:
            raise GraphError(f"node {node.id} ({node.name}): empty batch")

    @staticmethod
    def _reduce(node, per, w, rows):
        n = node.attrs["normalizer"] or rows
        if w is not None:
            per = per * w
        return float(per.sum()) / n

    def backward(self, loss: Node, loss_scale: float = 1.0) -> None:
        self.backward_terms([(loss, loss_scale)])

    def backward_terms(self, terms: Iterable[tuple[Node, float]]) -> None:
        """Backpropagate ``sum(scale * loss)`` in a single reverse sweep.

        Node gradients are reset by each forward and add up over backward
        calls; parameter gradients add into ``Parameter.grad``.
        """
        if not self._forwarded:
            raise GraphError("backward called before forward")
        terms = list(terms)
        for loss, scale in terms:
            if loss.value is None or loss.value.shape != (1, 1):
                raise GraphError(f"node {loss.id} is not a scalar loss")
        grads: dict[int, np.ndarray] = {}
        for loss, scale in terms:
            g = np.array([[float(scale)]])
            grads[loss.id] = grads[loss.id] + g if loss.id in grads else g
        for node in reversed(self.nodes[: max(loss.id for loss, _ in terms) + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node.op == "input":
                p = self._params.get(node.id)
                if p is not None:
                    p.grad += g
                continue
            for inp, gi in zip(node.inputs, self._local_grads(node, g)):
                if gi is None:
                    continue
                grads[inp.id] = grads[inp.id] + gi if inp.id in grads else gi

    def _local_grads(self, node: Node, g: np.ndarray):
        op = node.op
        xs = [i.value for i in node.inputs]
        if op == "matmul":
            a, b = xs
            return g @ b.T, a.T @ g
        if op == "add-bias":
            return g, g.sum(axis=0, keepdims=True)
        if op == "relu":
            return (g * (xs[0] > 0),)
        if op == "grad-scale":
            return (node.attrs["factor"] * g,)
        if op == "scale":
            return (node.attrs["c"] * g,)
        if op == "sum":
            s = g[0, 0]
            return tuple(np.full_like(x, s) for x in xs)
        if op in ("softmax-xent", "sigmoid-bce"):
            logits, target = xs[0], xs[1]
            n = node.attrs["normalizer"] or logits.shape[0]
            d = (node.attrs["_p"] - target) / n
            if len(xs) > 2:
                d = d * xs[2]
            out = [g[0, 0] * d, None]
            if len(xs) > 2:
                out.append(None)
            return out
        raise GraphError(f"unknown op {op!r}")

    def grad(self, node: Node) -> np.ndarray:
        """Gradient at ``node`` from the backward calls since the last forward."""
        if node.value is None:
            raise GraphError(f"node {node.id} has no value; run forward first")
        return np.zeros_like(node.value) if node.grad is None else node.grad


# -- optimization ---------------------------------------------------------

@dataclass
class OptimizerConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 3e-4
    inv_gamma: float = 10.0
    inv_power: float = 0.75
    total_iterations: int = 1000

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (self.inv_gamma > 0 and self.inv_power > 0):
            raise ValueError("inv_gamma and inv_power must be > 0")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")


def progress(t: int, total: int) -> float:
    return min(max(t / total, 0.0), 1.0)


def inv_lr(config: OptimizerConfig, t: int) -> float:
    """INV decay: ``base_lr * (1 + gamma * p) ** -power`` with ``p = t / total``."""
    p = progress(t, config.total_iterations)
    return config.base_lr * (1.0 + config.inv_gamma * p) ** (-config.inv_power)


def adaptation_factor(p: float, gamma: float = 10.0) -> float:
    """Ramp ``2 / (1 + exp(-gamma p)) - 1`` from 0 at p=0 towards 1."""
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


def sgd_step(params: Sequence[Parameter], config: OptimizerConfig, t: int) -> float:
    """Momentum SGD with coupled weight decay; zeroes gradients afterwards.

    Returns the effective learning rate used at iteration ``t``.
    """
    lr = inv_lr(config, t)
    for p in params:
        v = p.momentum
        v *= config.momentum
        v += p.grad
        if config.weight_decay:
            v += config.weight_decay * p.value
        p.value -= (lr * p.lr_mult) * v
        p.grad.fill(0.0)
    return lr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
