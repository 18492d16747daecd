# coding: utf-8
"""
Dense float64 matrix numerics with tape-based reverse-mode gradients.

Every public operation takes `Node` values (or anything `as_matrix` accepts) and returns a new `Node`.
When at least one input lives on a `Tape`, the operation records a backward closure on that tape;
`Tape.backward` replays the records in reverse and finally accumulates into the `ParamTensor.grad`
buffers of every parameter the tape watched.  Without a tape nothing is recorded, so inference runs
the exact same code path with no bookkeeping.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import SpaceNumericError, SpaceShapeError

__all__ = ["Matrix", "Node", "ParamTensor", "Tape", "as_matrix", "constant", "matmul", "transpose", "add",
           "add_row", "mul", "scale", "add_constant", "slice_cols", "concat_cols", "concat_rows", "take_rows",
           "softmax_rows", "layer_norm_rows", "gelu", "sum_all", "nll_rows", "cross_entropy",
           "finite_diff_check", "FiniteDiffReport", "PROB_EPSILON", "MASKED_LOGIT"]

# 2-D float64 array, row-major
Matrix = np.ndarray

# clamp for -log(p) so that a zero probability never yields inf
PROB_EPSILON = 1e-12

# additive attention/logit mask; exp() of it underflows to exactly 0.0
MASKED_LOGIT = -1e9


def _check_finite(value: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(value)):
        raise SpaceNumericError(f"{op_name} produced a non-finite value")


def as_matrix(values) -> Matrix:
    """
    Convert to a 2-D float64 matrix (a 1-D input becomes a single row).

    :raises SpaceShapeError: for inputs of rank other than 1 or 2
    :raises SpaceNumericError: if any entry is NaN or Inf
    """
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise SpaceShapeError(f"expected a matrix, got an array of rank {m.ndim}")
    _check_finite(m, "as_matrix")
    return m


class Node(object):
    """
    A matrix value inside (or outside) a computation graph.
    """
    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: Matrix, tape: Optional["Tape"] = None):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self.value.ravel()

    def __repr__(self):
        return f"Node(shape={self.shape}, taped={self.tape is not None})"


class ParamTensor(object):
    """
    A named trainable matrix and its gradient buffer (same shape).
    """

    def __init__(self, name: str, value):
        self.name = name
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.shape})"


class Tape(object):
    """
    Ordered record of the operations of one forward pass.  Build a new tape per training step.
    """

    def __init__(self):
        self._records: List[Tuple[Node, Callable[[np.ndarray], None]]] = []
        self._watched: Dict[int, Tuple[Node, ParamTensor]] = {}

    def __len__(self):
        return len(self._records)

    def watch(self, param: ParamTensor) -> Node:
        """
        Return the leaf node standing for `param` on this tape (one leaf per parameter).
        """
        entry = self._watched.get(id(param))
        if entry is None:
            entry = (Node(param.value, self), param)
            self._watched[id(param)] = entry
        return entry[0]

    def record(self, out: Node, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Node) -> None:
        """
        Propagate d(loss)/d(node) through the recorded operations and add the result to each
        watched parameter's grad buffer.

        :param loss: a 1x1 node produced on this tape
        """
        if loss.shape != (1, 1):
            raise SpaceShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if loss.tape is not self:
            raise SpaceShapeError("loss was not computed on this tape")
        loss.grad = np.ones((1, 1))
        for out, backward in reversed(self._records):
            if out.grad is not None:
                backward(out.grad)
        for leaf, param in self._watched.values():
            if leaf.grad is not None:
                param.grad = param.grad + leaf.grad


NodeLike = Union[Node, np.ndarray, Sequence]


def constant(values) -> Node:
    return Node(as_matrix(values))


def param_node(param: ParamTensor, tape: Optional[Tape]) -> Node:
    """
    The node to use for `param` in a forward pass; a constant when there is no tape.
    """
    if tape is None:
        return Node(param.value)
    return tape.watch(param)


def _node(x: NodeLike) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _tape_of(nodes: Sequence[Node]) -> Optional[Tape]:
    for n in nodes:
        if n.tape is not None:
            return n.tape
    return None


def _emit(value: np.ndarray, inputs: Sequence[Node], backward: Callable[[np.ndarray], None], op_name: str) -> Node:
    _check_finite(value, op_name)
    tape = _tape_of(inputs)
    out = Node(value, tape)
    if tape is not None:
        tape.record(out, backward)
    return out


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.tape is None:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad = node.grad + g


# ----- Linear algebra ------------------------------------------------------------

def matmul(a: NodeLike, b: NodeLike) -> Node:
    """
    Matrix product; dL/dA = dL/dC . B^T and dL/dB = A^T . dL/dC.

    :raises SpaceShapeError: when a.cols != b.rows
    """
    a, b = _node(a), _node(b)
    if a.cols != b.rows:
        raise SpaceShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _emit(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a: NodeLike) -> Node:
    a = _node(a)

    def backward(g):
        _accumulate(a, g.T)

    return _emit(a.value.T.copy(), (a,), backward, "transpose")


def add(a: NodeLike, b: NodeLike) -> Node:
    a, b = _node(a), _node(b)
    if a.shape != b.shape:
        raise SpaceShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _emit(a.value + b.value, (a, b), backward, "add")


def add_row(a: NodeLike, row: NodeLike) -> Node:
    """
    Add a 1 x cols row vector to every row of `a` (bias broadcast).
    """
    a, row = _node(a), _node(row)
    if row.rows != 1 or row.cols != a.cols:
        raise SpaceShapeError(f"add_row needs a 1x{a.cols} row, got {row.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(row, g.sum(axis=0, keepdims=True))

    return _emit(a.value + row.value, (a, row), backward, "add_row")


def mul(a: NodeLike, b: NodeLike) -> Node:
    """
    Element-wise product of two equally shaped matrices.
    """
    a, b = _node(a), _node(b)
    if a.shape != b.shape:
        raise SpaceShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _emit(a.value * b.value, (a, b), backward, "mul")


def scale(a: NodeLike, factor: float) -> Node:
    a = _node(a)

    def backward(g):
        _accumulate(a, g * factor)

    return _emit(a.value * factor, (a,), backward, "scale")


def add_constant(a: NodeLike, const: np.ndarray) -> Node:
    """
    Add a non-trainable array (broadcastable to a's shape), e.g. an additive attention mask.
    """
    a = _node(a)
    const = np.asarray(const, dtype=np.float64)
    try:
        value = a.value + const
    except ValueError as err:
        raise SpaceShapeError(f"add_constant cannot broadcast {const.shape} onto {a.shape}: {err}")
    if value.shape != a.shape:
        raise SpaceShapeError(f"add_constant would change shape {a.shape} -> {value.shape}")

    def backward(g):
        _accumulate(a, g)

    return _emit(value, (a,), backward, "add_constant")


# ----- Slicing and joining ------------------------------------------------------------

def slice_cols(a: NodeLike, start: int, stop: int) -> Node:
    a = _node(a)
    if not 0 <= start < stop <= a.cols:
        raise SpaceShapeError(f"column slice [{start}:{stop}] out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _emit(a.value[:, start:stop].copy(), (a,), backward, "slice_cols")


def concat_cols(nodes: Sequence[NodeLike]) -> Node:
    nodes = [_node(n) for n in nodes]
    if len({n.rows for n in nodes}) != 1:
        raise SpaceShapeError(f"concat_cols row mismatch: {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.cols for n in nodes])

    def backward(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _accumulate(n, g[:, lo:hi])

    return _emit(np.concatenate([n.value for n in nodes], axis=1), nodes, backward, "concat_cols")


def concat_rows(nodes: Sequence[NodeLike]) -> Node:
    nodes = [_node(n) for n in nodes]
    if len({n.cols for n in nodes}) != 1:
        raise SpaceShapeError(f"concat_rows column mismatch: {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.rows for n in nodes])

    def backward(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _accumulate(n, g[lo:hi, :])

    return _emit(np.concatenate([n.value for n in nodes], axis=0), nodes, backward, "concat_rows")


def take_rows(table: NodeLike, indices: Sequence[int]) -> Node:
    """
    Gather rows of `table` (embedding lookup); gradients scatter-add back.
    """
    table = _node(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise SpaceShapeError("take_rows needs a flat index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise SpaceShapeError(f"row index out of range for a table of {table.rows} rows")

    def backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _emit(table.value[idx], (table,), backward, "take_rows")


# ----- Non-linearities ------------------------------------------------------------

def softmax_rows(m: NodeLike) -> Node:
    """
    Row-wise softmax, stabilized by subtracting each row's max.
    """
    m = _node(m)
    shifted = m.value - m.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _accumulate(m, probs * (g - (g * probs).sum(axis=1, keepdims=True)))

    return _emit(probs, (m,), backward, "softmax_rows")


def layer_norm_rows(x: NodeLike, gain: NodeLike, bias: NodeLike, eps: float = 1e-5) -> Node:
    """
    Normalize every row to zero mean / unit variance, then apply a 1 x cols gain and bias.
    """
    x, gain, bias = _node(x), _node(gain), _node(bias)
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise SpaceShapeError(f"layer norm parameters must be 1x{x.cols}")
    mu = x.value.mean(axis=1, keepdims=True)
    centered = x.value - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        dxhat = g * gain.value
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        _accumulate(x, dx)
        _accumulate(gain, (g * xhat).sum(axis=0, keepdims=True))
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    return _emit(xhat * gain.value + bias.value, (x, gain, bias), backward, "layer_norm_rows")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: NodeLike) -> Node:
    """
    GELU, tanh approximation.
    """
    x = _node(x)
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        _accumulate(x, g * d)

    return _emit(0.5 * v * (1.0 + t), (x,), backward, "gelu")


def sum_all(a: NodeLike) -> Node:
    a = _node(a)

    def backward(g):
        _accumulate(a, np.full_like(a.value, g[0, 0]))

    return _emit(np.array([[a.value.sum()]]), (a,), backward, "sum_all")


# ----- Losses ------------------------------------------------------------

def cross_entropy(probs_row: np.ndarray, target: int) -> float:
    """
    -log(probs_row[target]), with the probability clamped at PROB_EPSILON.
    """
    row = np.asarray(probs_row, dtype=np.float64).ravel()
    if not 0 <= target < row.size:
        raise SpaceShapeError(f"target {target} outside a distribution of size {row.size}")
    return float(-math.log(max(row[target], PROB_EPSILON)))


def nll_rows(probs: NodeLike, rows: Sequence[int], targets: Sequence[int], reduction: str = "mean") -> Node:
    """
    Negative log-likelihood of `targets[i]` under distribution row `rows[i]` of `probs`.

    :param reduction: "mean" or "sum" over the selected rows
    :return: 1x1 node; the gradient flows back through `probs` (and on to the logits)
    """
    probs = _node(probs)
    r = np.asarray(rows, dtype=np.int64)
    t = np.asarray(targets, dtype=np.int64)
    if r.shape != t.shape or r.ndim != 1:
        raise SpaceShapeError("rows and targets must be flat sequences of equal length")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction '{reduction}'")
    if r.size == 0:
        return _emit(np.zeros((1, 1)), (probs,), lambda g: None, "nll_rows")
    picked = probs.value[r, t]
    clamped = np.maximum(picked, PROB_EPSILON)
    norm = float(r.size) if reduction == "mean" else 1.0
    total = -np.log(clamped).sum() / norm

    def backward(g):
        full = np.zeros_like(probs.value)
        local = np.where(picked > PROB_EPSILON, -1.0 / clamped, 0.0) * (g[0, 0] / norm)
        np.add.at(full, (r, t), local)
        _accumulate(probs, full)

    return _emit(np.array([[total]]), (probs,), backward, "nll_rows")


# ----- Gradient checking ------------------------------------------------------------

@dataclass
class CoordinateCheck:
    name: str
    index: int
    analytic: float
    numeric: float
    error: float


@dataclass
class FiniteDiffReport:
    checked: int
    tolerance: float
    max_error: float
    worst: List[CoordinateCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        lines = [f"{state}: {self.checked} coordinates, max relative error {self.max_error:.3e} "
                 f"(tolerance {self.tolerance:.1e})"]
        for w in self.worst:
            lines.append(f"  {w.name}[{w.index}] analytic={w.analytic:.6e} numeric={w.numeric:.6e} "
                         f"error={w.error:.3e}")
        return "\n".join(lines)


def finite_diff_check(model_loss_fn: Callable[[Optional[Tape]], Node],
                      params: Sequence[ParamTensor],
                      epsilon: float = 1e-4,
                      tolerance: float = 1e-3,
                      n_coords: int = 64,
                      seed: int = 0,
                      report_worst: int = 5) -> FiniteDiffReport:
    """
    Compare tape gradients with central differences on sampled parameter coordinates.

    :param model_loss_fn: builds the scalar loss; receives a Tape for the analytic pass and None otherwise
    :param params: parameters to check (their values are perturbed in place and restored)
    :param n_coords: coordinates to sample; every coordinate when the total is smaller
    :return: report; exceeding the tolerance yields passed == False, never an exception
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = model_loss_fn(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    coords = [(pi, fi) for pi, p in enumerate(params) for fi in range(p.value.size)]
    if len(coords) > n_coords:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(len(coords), size=n_coords, replace=False))
        coords = [coords[c] for c in chosen]

    checks = []
    for pi, fi in coords:
        p = params[pi]
        flat = p.value.reshape(-1)
        original = flat[fi]
        try:
            flat[fi] = original + epsilon
            plus = model_loss_fn(None).value[0, 0]
            flat[fi] = original - epsilon
            minus = model_loss_fn(None).value[0, 0]
        finally:
            flat[fi] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        a = analytic[pi].reshape(-1)[fi]
        checks.append(CoordinateCheck(p.name, fi, float(a), float(numeric),
                                      float(abs(a - numeric) / max(1.0, abs(a)))))

    checks.sort(key=lambda c: c.error, reverse=True)
    max_error = checks[0].error if checks else 0.0
    return FiniteDiffReport(checked=len(checks), tolerance=tolerance, max_error=max_error,
                            worst=checks[:report_worst])
