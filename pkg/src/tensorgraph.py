"""
Eager reverse-mode differentiation over dense float64 arrays.

Every operation computes its values immediately and records a backward closure on the
produced Node. `backward` walks the graph once in reverse topological order. Broadcasting is
never implicit: binary operations require identical shapes, and the two structural broadcasts
the models need (`broadcast_channelwise`, `broadcast_rows`) are explicit operations.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from src import qsim
from src.errors import ShapeError

logger = logging.getLogger(__name__)

GROUPS = ("encoder", "decoder", "quantum")
THREADS_ENV = "QFPN_THREADS"

_threads = 1


class Node:
    """
    A dense array in the differentiation graph.

    Attributes:
        values (np.ndarray): Forward values (float64).
        grad (np.ndarray): Accumulated adjoint, same shape as values.
        op_tag (str): Name of the producing operation ("leaf" for inputs and parameters).
        inputs (tuple[Node, ...]): Predecessors.
        requires_grad (bool): Whether adjoints are accumulated into this node.
    """

    def __init__(self, values, inputs: Sequence["Node"] = (), op_tag: str = "leaf",
                 requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.inputs = tuple(inputs)
        self.op_tag = op_tag
        self.requires_grad = requires_grad or any(node.requires_grad for node in self.inputs)
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Node(op={self.op_tag}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """
    A trainable leaf.

    Attributes:
        name (str): Unique dotted path, e.g. "fpn.gate0.out_linear.weight".
        node (Node): Leaf with requires_grad = True.
        group (str): "encoder", "decoder" or "quantum"; selects the learning rate.
        decay (bool): Whether decoupled weight decay applies.
    """
    name: str
    node: Node
    group: str
    decay: bool = True

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"Parameter '{self.name}' has unknown group '{self.group}'")

    @property
    def values(self) -> np.ndarray:
        return self.node.values

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad

    @property
    def size(self) -> int:
        return int(self.node.values.size)


def parameter(name: str, values: np.ndarray, group: str, decay: bool = True) -> Parameter:
    return Parameter(name, Node(values, requires_grad=True), group, decay)


def constant(values) -> Node:
    return Node(values)


def as_node(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def make_node(values: np.ndarray, inputs: Sequence[Node], op_tag: str,
              backward_fn: Callable[[np.ndarray], None]) -> Node:
    """
    Creates an operation output; backward_fn receives the output adjoint and must accumulate
    into the inputs.
    """
    out = Node(values, inputs, op_tag)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _same_shape(op: str, *nodes: Node) -> None:
    """Raises ShapeError naming op when the operands differ in shape."""
    shapes = [n.shape for n in nodes]
    if any(s != shapes[0] for s in shapes[1:]):
        operands = ", ".join(f"{n.op_tag}{n.shape}" for n in nodes)
        raise ShapeError(f"{op}: operand shapes differ: {operands}")


def _rank(op: str, node: Node, rank: int) -> None:
    """Raises ShapeError naming op unless node has the given rank."""
    if node.values.ndim != rank:
        raise ShapeError(f"{op}: expected a rank-{rank} operand, got {node.op_tag}{node.shape}")


# Structural and elementwise primitives.

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)

    def backward_fn(g):
        a.accumulate(g)
        b.accumulate(g)
    return make_node(a.values + b.values, (a, b), "add", backward_fn)


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)

    def backward_fn(g):
        a.accumulate(g * b.values)
        b.accumulate(g * a.values)
    return make_node(a.values * b.values, (a, b), "mul", backward_fn)


def scalar_mul(x: Node, c: float) -> Node:
    return make_node(c * x.values, (x,), "scalar_mul", lambda g: x.accumulate(c * g))


def scalar_add(x: Node, c: float) -> Node:
    return make_node(x.values + c, (x,), "scalar_add", lambda g: x.accumulate(g))


def sum_all(x: Node) -> Node:
    return make_node(np.sum(x.values), (x,), "sum_all", lambda g: x.accumulate(np.full(x.shape, g)))


def tanh(x: Node) -> Node:
    y = np.tanh(x.values)
    return make_node(y, (x,), "tanh", lambda g: x.accumulate(g * (1.0 - y * y)))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Node) -> Node:
    y = stable_sigmoid(x.values)
    return make_node(y, (x,), "sigmoid", lambda g: x.accumulate(g * y * (1.0 - y)))


def relu(x: Node) -> Node:
    mask = x.values > 0
    return make_node(np.where(mask, x.values, 0.0), (x,), "relu", lambda g: x.accumulate(g * mask))


def concat(nodes: Sequence[Node], axis: int) -> Node:
    """Concatenates along one axis; all other dimensions must agree."""
    ref = nodes[0].shape
    for node in nodes[1:]:
        if len(node.shape) != len(ref) or any(
                d != r for i, (d, r) in enumerate(zip(node.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible operands {[n.shape for n in nodes]} on axis {axis}")
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for node, part in zip(nodes, np.split(g, splits, axis=axis)):
            node.accumulate(part)
    return make_node(np.concatenate([n.values for n in nodes], axis=axis), nodes, "concat", backward_fn)


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    """x [B, in] @ weight[out, in].T + bias[out]."""
    _rank("linear", x, 2)
    _rank("linear", weight, 2)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.values @ weight.values.T
    if bias is not None:
        out = out + bias.values
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        x.accumulate(g @ weight.values)
        weight.accumulate(g.T @ x.values)
        if bias is not None:
            bias.accumulate(g.sum(axis=0))
    return make_node(out, inputs, "linear", backward_fn)


def global_avg_pool(x: Node) -> Node:
    """[B, C, H, W] -> [B, C] spatial mean."""
    _rank("global_avg_pool", x, 4)
    h, w = x.shape[2:]

    def backward_fn(g):
        x.accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())
    return make_node(x.values.mean(axis=(2, 3)), (x,), "global_avg_pool", backward_fn)


def broadcast_channelwise(x: Node, height: int, width: int) -> Node:
    """[B, C] -> [B, C, H, W], constant over space."""
    _rank("broadcast_channelwise", x, 2)
    values = np.broadcast_to(x.values[:, :, None, None], x.shape + (height, width)).copy()
    return make_node(values, (x,), "broadcast_channelwise", lambda g: x.accumulate(g.sum(axis=(2, 3))))


def broadcast_rows(x: Node, rows: int) -> Node:
    """[F] -> [rows, F]."""
    _rank("broadcast_rows", x, 1)
    values = np.broadcast_to(x.values, (rows,) + x.shape).copy()
    return make_node(values, (x,), "broadcast_rows", lambda g: x.accumulate(g.sum(axis=0)))


def upsample_nearest2x(x: Node) -> Node:
    _rank("upsample_nearest2x", x, 4)
    b, c, h, w = x.shape
    values = x.values.repeat(2, axis=2).repeat(2, axis=3)
    return make_node(values, (x,), "upsample_nearest2x",
                     lambda g: x.accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))))


def maxpool2x(x: Node) -> Node:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    _rank("maxpool2x", x, 4)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x: spatial size {h}x{w} is not even")
    windows = x.values.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, arg, g[..., None], axis=-1)
        x.accumulate(routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))
    return make_node(out, (x,), "maxpool2x", backward_fn)


def conv2d(x: Node, weight: Node, bias: Optional[Node] = None, stride: int = 1, padding: int = 0) -> Node:
    """
    Cross-correlation of x [B, Cin, H, W] with weight [Cout, Cin, k, k].

    Args:
        x (Node): Input feature map.
        weight (Node): Square kernel with odd k.
        bias (Node, optional): [Cout] bias.
        stride (int): Step between windows.
        padding (int): Zero padding on every side.

    Returns:
        Node: [B, Cout, H', W'] with H' = (H + 2 padding - k) / stride + 1.

    Raises:
        ShapeError: On channel mismatch, even kernels or a non-integral output size.
    """
    _rank("conv2d", x, 4)
    _rank("conv2d", weight, 4)
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: output size is not integral for input {x.shape}, k={k}, "
                         f"stride={stride}, padding={padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    padded = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", windows, weight.values, optimize=True)
    if bias is not None:
        out = out + bias.values[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        weight.accumulate(np.einsum("bohw,bchwij->ocij", g, windows, optimize=True))
        if bias is not None:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            d_windows = np.einsum("bohw,ocij->bchwij", g, weight.values, optimize=True)
            d_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    d_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d_windows[..., i, j]
            x.accumulate(d_padded[:, :, padding:padding + h, padding:padding + w])
    return make_node(out, inputs, "conv2d", backward_fn)


# Bridge to the circuit simulator.

def configure_threads(threads: Optional[int] = None) -> int:
    """
    Sets the worker count used to evaluate circuit rows; reads QFPN_THREADS when omitted.

    Returns:
        int: The active thread count.
    """
    global _threads
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    _threads = max(1, int(threads))
    return _threads


def _row_chunks(n_rows: int) -> List[slice]:
    """Splits n_rows into at most one contiguous slice per worker thread."""
    workers = min(_threads, n_rows)
    bounds = np.linspace(0, n_rows, workers + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


def _map_rows(fn, n_rows: int) -> list:
    """
    Applies fn to each row chunk, on the thread pool when there is more than one chunk.

    Args:
        fn (Callable[[slice], Any]): Work for one chunk of rows.
        n_rows (int): Number of rows.

    Returns:
        list: Results in chunk order.
    """
    chunks = _row_chunks(n_rows)
    if len(chunks) <= 1:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))


def quantum_node(x: Node, circuit: Parameter, template: qsim.CircuitParams) -> Node:
    """
    Runs the circuit on every row of x [B, n].

    The circuit Parameter holds the [L, n, 3] angles; template carries the qubit count, layer
    count, re-uploading switch and encoding scales. Forward delegates to qsim.run_circuit_batch;
    backward delegates to qsim.circuit_gradients_batch, summing d_angles over rows into the
    circuit Parameter and passing d_x to x.

    Raises:
        ShapeError: If the inner dimension of x differs from the qubit count.
    """
    _rank("quantum_node", x, 2)
    if x.shape[1] != template.n_qubits:
        raise ShapeError(f"quantum_node: inputs {x.shape} do not match {template.n_qubits} qubits")
    params = template.with_angles(circuit.values)
    xs = x.values.copy()
    parts = _map_rows(lambda rows: qsim.run_circuit_batch(xs[rows], params), xs.shape[0])
    values = np.concatenate(parts, axis=0) if parts else np.zeros_like(xs)

    def backward_fn(g):
        results = _map_rows(lambda rows: qsim.circuit_gradients_batch(xs[rows], params, g[rows]), xs.shape[0])
        d_angles = np.concatenate([r[0] for r in results], axis=0)
        d_x = np.concatenate([r[1] for r in results], axis=0)
        circuit.node.accumulate(d_angles.sum(axis=0))
        x.accumulate(d_x)
    return make_node(values, (x, circuit.node), "quantum_node", backward_fn)


def _topological_order(root: Node) -> List[Node]:
    """Nodes reachable from root, inputs before outputs, via an iterative depth-first search."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """
    Accumulates d loss / d node into every reachable node that requires gradients.

    Raises:
        ValueError: If loss is not a scalar.
    """
    if loss.values.size != 1 or loss.values.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.values)
    for node in reversed(_topological_order(loss)):
        if node._backward is not None:
            node._backward(node.grad)
