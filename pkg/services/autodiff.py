"""
Reverse-mode differentiation over the small operation set that unrolled
Sinkhorn attention needs.

A Graph is built once (every node gets its shape at construction), then
evaluated with forward() and differentiated with backward(). Forward and
adjoint rules live in FORWARD_RULES / VJP_RULES keyed by op name.

Main pieces:
- Graph: node builders, forward, backward
- attention_block: residual attention with unrolled log-domain Sinkhorn
- grad_check: backward vs central finite differences on sampled coordinates
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from config import settings
from services.errors import GraphStateError, InvalidParameterError, ShapeMismatchError
from services.numerics import SeededRng, finite_diff_gradient, logsumexp_cols, logsumexp_rows
from utils.logger import logger

Shape = Tuple[int, ...]
GradientSet = Dict[str, np.ndarray]

LEAF_OPS = ("input", "parameter", "constant")


@dataclass(frozen=True)
class Node:
    index: int
    op: str
    inputs: Tuple[int, ...]
    shape: Shape
    name: Optional[str] = None
    attrs: Dict[str, Any] = field(default_factory=dict, compare=False)


# ════════════════════════════════════════════════════════════════════════════
# Forward rules
# ════════════════════════════════════════════════════════════════════════════


def _softmax_row(logits: np.ndarray) -> np.ndarray:
    return np.exp(logits - logsumexp_rows(logits)[:, None])


FORWARD_RULES: Dict[str, Callable[..., np.ndarray]] = {
    "matmul": lambda node, a, b: a @ b,
    "transpose": lambda node, a: a.T,
    "add": lambda node, a, b: a + b,
    "broadcast_add": lambda node, a, v: a + v,
    "broadcast_sub": lambda node, a, v: a - v,
    "scale": lambda node, a: node.attrs["factor"] * a,
    "exp": lambda node, a: np.exp(a),
    "tanh": lambda node, a: np.tanh(a),
    "logsumexp_rows": lambda node, a: logsumexp_rows(a)[:, None],
    "logsumexp_cols": lambda node, a: logsumexp_cols(a)[None, :],
    "mean_rows": lambda node, a: a.mean(axis=0, keepdims=True),
    "half_squared_norm": lambda node, a: np.asarray(0.5 * np.sum(a * a)),
    "softmax_cross_entropy": lambda node, logits, label: np.asarray(
        logsumexp_rows(logits)[0] - logits[0, int(label)]
    ),
}


# ════════════════════════════════════════════════════════════════════════════
# Adjoint (vector-Jacobian) rules: (node, cotangent, output, *inputs) -> input cotangents
# ════════════════════════════════════════════════════════════════════════════


def _reduce_to(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum a broadcast cotangent back onto a (p, 1) or (1, q) operand."""
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _vjp_cross_entropy(node, g, out, logits, label):
    onehot = np.zeros_like(logits)
    onehot[0, int(label)] = 1.0
    return g * (_softmax_row(logits) - onehot), None


VJP_RULES: Dict[str, Callable[..., Tuple[Optional[np.ndarray], ...]]] = {
    "matmul": lambda node, g, out, a, b: (g @ b.T, a.T @ g),
    "transpose": lambda node, g, out, a: (g.T,),
    "add": lambda node, g, out, a, b: (g, g),
    "broadcast_add": lambda node, g, out, a, v: (g, _reduce_to(g, v.shape)),
    "broadcast_sub": lambda node, g, out, a, v: (g, -_reduce_to(g, v.shape)),
    "scale": lambda node, g, out, a: (node.attrs["factor"] * g,),
    "exp": lambda node, g, out, a: (g * out,),
    "tanh": lambda node, g, out, a: (g * (1.0 - out * out),),
    # softmax-weighted scatter of the reduced cotangent
    "logsumexp_rows": lambda node, g, out, a: (g * np.exp(a - out),),
    "logsumexp_cols": lambda node, g, out, a: (g * np.exp(a - out),),
    "mean_rows": lambda node, g, out, a: (np.broadcast_to(g / a.shape[0], a.shape).copy(),),
    "half_squared_norm": lambda node, g, out, a: (g * a,),
    "softmax_cross_entropy": _vjp_cross_entropy,
}


# ════════════════════════════════════════════════════════════════════════════
# Graph
# ════════════════════════════════════════════════════════════════════════════


class Graph:
    """Define-then-run computation graph with named parameters."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.parameters: Dict[str, np.ndarray] = {}
        self.output: Optional[Node] = None
        self._values: Optional[List[np.ndarray]] = None

    # ─── Leaves ──────────────────────────────────────────────────────────────

    def _add(self, op: str, inputs: Tuple[Node, ...], shape: Shape, name=None, **attrs) -> Node:
        node = Node(len(self.nodes), op, tuple(i.index for i in inputs), tuple(shape), name, attrs)
        self.nodes.append(node)
        self.output = node
        self._values = None
        return node

    def input(self, name: str, shape: Shape) -> Node:
        if any(n.op == "input" and n.name == name for n in self.nodes):
            raise InvalidParameterError(f"duplicate graph input '{name}'")
        return self._add("input", (), shape, name)

    def parameter(self, name: str, value: np.ndarray) -> Node:
        if name in self.parameters:
            raise InvalidParameterError(f"duplicate parameter '{name}'")
        stored = np.array(value, dtype=np.float64, ndmin=2, order="C")
        self.parameters[name] = stored
        return self._add("parameter", (), stored.shape, name)

    def constant(self, value: np.ndarray) -> Node:
        stored = np.array(value, dtype=np.float64, ndmin=2)
        return self._add("constant", (), stored.shape, value=stored)

    # ─── Operations ──────────────────────────────────────────────────────────

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul of {a.shape} and {b.shape}")
        return self._add("matmul", (a, b), (a.shape[0], b.shape[1]))

    def transpose(self, a: Node) -> Node:
        self._require_matrix(a, "transpose")
        return self._add("transpose", (a,), (a.shape[1], a.shape[0]))

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"add of {a.shape} and {b.shape}")
        return self._add("add", (a, b), a.shape)

    def broadcast_add(self, a: Node, v: Node) -> Node:
        self._check_broadcast(a, v, "broadcast_add")
        return self._add("broadcast_add", (a, v), a.shape)

    def broadcast_sub(self, a: Node, v: Node) -> Node:
        self._check_broadcast(a, v, "broadcast_sub")
        return self._add("broadcast_sub", (a, v), a.shape)

    def scale(self, a: Node, factor: float) -> Node:
        return self._add("scale", (a,), a.shape, factor=float(factor))

    def exp(self, a: Node) -> Node:
        return self._add("exp", (a,), a.shape)

    def tanh(self, a: Node) -> Node:
        return self._add("tanh", (a,), a.shape)

    def logsumexp_rows(self, a: Node) -> Node:
        self._require_matrix(a, "logsumexp_rows")
        return self._add("logsumexp_rows", (a,), (a.shape[0], 1))

    def logsumexp_cols(self, a: Node) -> Node:
        self._require_matrix(a, "logsumexp_cols")
        return self._add("logsumexp_cols", (a,), (1, a.shape[1]))

    def mean_rows(self, a: Node) -> Node:
        self._require_matrix(a, "mean_rows")
        return self._add("mean_rows", (a,), (1, a.shape[1]))

    def half_squared_norm(self, a: Node) -> Node:
        return self._add("half_squared_norm", (a,), ())

    def softmax_cross_entropy(self, logits: Node, label: Node) -> Node:
        if len(logits.shape) != 2 or logits.shape[0] != 1:
            raise ShapeMismatchError(f"logits must be 1×c, got {logits.shape}")
        if label.shape != ():
            raise ShapeMismatchError(f"label must be a scalar input, got {label.shape}")
        return self._add("softmax_cross_entropy", (logits, label), ())

    @staticmethod
    def _require_matrix(a: Node, op: str) -> None:
        if len(a.shape) != 2:
            raise ShapeMismatchError(f"{op} needs a matrix operand, got {a.shape}")

    @staticmethod
    def _check_broadcast(a: Node, v: Node, op: str) -> None:
        if len(a.shape) != 2 or v.shape not in ((a.shape[0], 1), (1, a.shape[1])):
            raise ShapeMismatchError(f"{op}: cannot broadcast {v.shape} against {a.shape}")

    # ─── Evaluation ──────────────────────────────────────────────────────────

    def forward(self, inputs: Optional[Mapping[str, Any]] = None) -> np.ndarray:
        """Evaluate every node in construction order and cache the values."""
        if self.output is None:
            raise GraphStateError("graph has no nodes")
        inputs = inputs or {}
        values: List[np.ndarray] = []
        for node in self.nodes:
            if node.op == "input":
                if node.name not in inputs:
                    raise ShapeMismatchError(f"missing graph input '{node.name}'")
                value = np.asarray(inputs[node.name])
                if value.shape != node.shape:
                    raise ShapeMismatchError(
                        f"input '{node.name}' has shape {value.shape}, graph expects {node.shape}"
                    )
            elif node.op == "parameter":
                value = self.parameters[node.name]
            elif node.op == "constant":
                value = node.attrs["value"]
            else:
                value = FORWARD_RULES[node.op](node, *(values[i] for i in node.inputs))
            values.append(value)
        self._values = values
        return values[self.output.index]

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise GraphStateError("forward has not run")
        return self._values[node.index]

    def backward(self, cotangent: Optional[np.ndarray] = None) -> GradientSet:
        """Gradients of the output with respect to every named parameter."""
        if self._values is None:
            raise GraphStateError("backward called before forward")
        values = self._values
        out = self.output
        seed = np.ones(out.shape) if cotangent is None else np.asarray(cotangent, dtype=np.float64)
        if seed.shape != out.shape:
            raise ShapeMismatchError(f"cotangent shape {seed.shape} != output shape {out.shape}")

        adjoints: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        adjoints[out.index] = seed
        for node in reversed(self.nodes[: out.index + 1]):
            g = adjoints[node.index]
            if g is None or node.op in LEAF_OPS:
                continue
            contributions = VJP_RULES[node.op](
                node, g, values[node.index], *(values[i] for i in node.inputs)
            )
            for i, contribution in zip(node.inputs, contributions):
                if contribution is None:
                    continue
                adjoints[i] = contribution if adjoints[i] is None else adjoints[i] + contribution

        grads: GradientSet = {}
        for node in self.nodes:
            if node.op == "parameter":
                g = adjoints[node.index]
                grads[node.name] = np.zeros(node.shape) if g is None else np.asarray(g).reshape(node.shape)
        return grads


# ════════════════════════════════════════════════════════════════════════════
# Attention block
# ════════════════════════════════════════════════════════════════════════════


def attention_block(
    graph: Graph,
    x: Node,
    W_Q: Node,
    W_K: Node,
    W_V: Node,
    iterations: int = 1,
) -> Tuple[Node, Node]:
    """
    x + K (x W_Vᵀ) with K from `iterations` unrolled log-domain normalisations
    of C = (x W_Qᵀ)(x W_Kᵀ)ᵀ, rows first. One iteration is SoftMax.

    Returns:
        (output node, kernel node)
    """
    if iterations < 1:
        raise InvalidParameterError(f"iterations must be >= 1, got {iterations}")
    queries = graph.matmul(x, graph.transpose(W_Q))
    keys = graph.matmul(x, graph.transpose(W_K))
    log_kernel = graph.matmul(queries, graph.transpose(keys))
    for step in range(1, iterations + 1):
        if step % 2 == 1:
            log_kernel = graph.broadcast_sub(log_kernel, graph.logsumexp_rows(log_kernel))
        else:
            log_kernel = graph.broadcast_sub(log_kernel, graph.logsumexp_cols(log_kernel))
    kernel = graph.exp(log_kernel)
    values = graph.matmul(x, graph.transpose(W_V))
    return graph.add(x, graph.matmul(kernel, values)), kernel


# ════════════════════════════════════════════════════════════════════════════
# Gradient check
# ════════════════════════════════════════════════════════════════════════════


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: Dict[str, float]
    coordinates: Dict[str, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "per_parameter": dict(self.per_parameter),
            "coordinates": dict(self.coordinates),
        }


def grad_check(
    graph: Graph,
    inputs: Optional[Mapping[str, Any]] = None,
    tolerance: Optional[float] = None,
    coordinates: Optional[int] = None,
    step: Optional[float] = None,
    floor: Optional[float] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare backward() with central differences of forward().

    For every parameter, up to `coordinates` entries are drawn at random (all
    of them for smaller parameters). The error per coordinate is
    |a - n| / max(|a|, |n|, floor).
    """
    tolerance = settings.gradcheck_tolerance if tolerance is None else tolerance
    coordinates = settings.gradcheck_coordinates if coordinates is None else coordinates
    step = settings.gradcheck_step if step is None else step
    floor = settings.gradcheck_floor if floor is None else floor

    output = graph.forward(inputs)
    if np.asarray(output).shape != ():
        raise ShapeMismatchError(f"grad_check needs a scalar output, got {np.shape(output)}")
    analytic = graph.backward()
    rng = SeededRng(seed).generator

    per_parameter: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    for name, value in graph.parameters.items():
        flat = value.reshape(-1)
        count = min(coordinates, flat.size)
        picks = np.sort(rng.choice(flat.size, size=count, replace=False))
        base = flat[picks].copy()

        def loss_at(entries: np.ndarray) -> float:
            flat[picks] = entries
            return float(graph.forward(inputs))

        try:
            numeric = finite_diff_gradient(loss_at, base, step)
        finally:
            flat[picks] = base
        exact = analytic[name].reshape(-1)[picks]
        denom = np.maximum(np.maximum(np.abs(exact), np.abs(numeric)), floor)
        per_parameter[name] = float(np.max(np.abs(exact - numeric) / denom)) if count else 0.0
        checked[name] = count

    graph.forward(inputs)
    report = GradCheckReport(
        max_rel_error=max(per_parameter.values(), default=0.0),
        per_parameter=per_parameter,
        coordinates=checked,
        tolerance=tolerance,
    )
    logger.info(
        f"Gradient check over {len(per_parameter)} parameters: "
        f"max relative error {report.max_rel_error:.2e} (tolerance {tolerance:.0e})"
    )
    return report
