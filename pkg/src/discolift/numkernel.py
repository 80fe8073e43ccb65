"""Dense float64 matrix helpers and a define-by-run reverse-mode tape.

Everything numeric in discolift is a 2-D ``numpy.ndarray`` of dtype float64.
Vectors are column matrices. The :class:`Tape` records a fixed set of matrix
operations as they are evaluated and replays them backwards to produce exact
gradients of a scalar with respect to every trainable leaf.
"""

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())

PIVOT_TOL = 1e-12

ACTIVATIONS = ("tanh", "relu", "elu")


class NumericalError(Exception):
    """Raised when a numerical routine cannot produce a trustworthy result."""

    pass


class ShapeMismatchError(NumericalError, ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    pass


class NonFiniteError(NumericalError):
    """Raised when a matrix contains NaN or Inf entries."""

    pass


class SingularMatrixError(NumericalError):
    """Raised when an LU pivot collapses below PIVOT_TOL."""

    pass


class NonScalarRootError(NumericalError):
    """Raised when backward() is called on a non-1x1 node."""

    pass


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce value to a finite 2-D float64 array (vectors become columns)."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected at most 2 dimensions, got {arr.ndim}")

    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def lu_factor(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """LU-factorize a square matrix, refusing pivots smaller than PIVOT_TOL."""
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatchError(f"linear-solve: A must be square, got {A.shape}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(A, check_finite=False)

    smallest = np.min(np.abs(np.diag(lu)))
    if smallest < PIVOT_TOL:
        raise SingularMatrixError(
            f"linear-solve: pivot magnitude {smallest:.3e} below {PIVOT_TOL:.0e}"
        )
    return lu, piv


def linear_solve(A, B) -> np.ndarray:
    """Return X with A X = B using a pivoted LU factorization."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise ShapeMismatchError(f"linear-solve: A {A.shape} incompatible with B {B.shape}")
    if A.shape[0] == 0:
        return np.zeros(B.shape)

    factors = lu_factor(A)
    return linalg.lu_solve(factors, B, check_finite=False)


def expm(A) -> np.ndarray:
    """Matrix exponential (scaling and squaring with a degree-13 Pade approximant)."""
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ShapeMismatchError(f"expm: A must be square, got {A.shape}")
    if A.shape[0] == 0:
        return np.eye(0)
    return linalg.expm(A)


class Op(enum.Enum):
    """Operation kinds a tape can record."""

    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    SCALE = "scale"
    TRANSPOSE = "transpose"
    CONCAT_ROWS = "concat-rows"
    CONCAT_COLS = "concat-cols"
    SLICE = "slice"
    ACTIVATION = "elementwise-activation"
    EXP = "elementwise-exp"
    SOLVE = "linear-solve"
    MSE = "mse-reduction"
    FROBENIUS = "frobenius-norm"
    SUM = "sum"
    NEGATE = "negate"
    DIAG = "diag"


@dataclass
class TapeNode:
    """One recorded operation: its kind, operand indices and forward value."""

    op: Op
    inputs: Tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    trainable: bool = False
    name: Optional[str] = None


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to a node on a tape. Supports @, +, - and scalar * for readability."""

    tape: "Tape"
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Var":
        return self.tape.transpose(self)

    def __matmul__(self, other: "Var") -> "Var":
        return self.tape.matmul(self, other)

    def __add__(self, other: "Var") -> "Var":
        return self.tape.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.tape.sub(self, other)

    def __neg__(self) -> "Var":
        return self.tape.negate(self)

    def __mul__(self, factor: float) -> "Var":
        return self.tape.scale(self, factor)

    __rmul__ = __mul__

    def __getitem__(self, key) -> "Var":
        rows, cols = key
        return self.tape.slice(self, rows, cols)


class Gradients(dict):
    """Mapping from trainable leaf Var to a gradient matrix of the same shape."""

    def by_name(self) -> Dict[str, np.ndarray]:
        """Re-key gradients by the names given to their leaves."""
        return {var.tape.nodes[var.index].name: grad for var, grad in self.items()}


def _check_same_shape(op: Op, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op.value}: operand shapes {a.shape} and {b.shape} differ")


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    """Apply a named elementwise activation (all map 0 to 0)."""
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "elu":
        return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))
    raise ValueError(f"Unknown activation '{kind}' (expected one of {ACTIVATIONS})")


def _slice_bounds(span, size: int) -> Tuple[int, int]:
    if isinstance(span, slice):
        start, stop, step = span.indices(size)
        if step != 1:
            raise ShapeMismatchError("slice: only unit-stride slices are supported")
        return start, max(start, stop)
    start, stop = span
    if not 0 <= start <= stop <= size:
        raise ShapeMismatchError(f"slice: range {start}:{stop} outside dimension {size}")
    return start, stop


class Tape:
    """Define-by-run recording of matrix operations for reverse-mode gradients.

    A tape is rebuilt for every forward pass and belongs to a single thread.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._vars: List[Var] = []

    def _append(self, node: TapeNode) -> Var:
        node.value.setflags(write=False)
        self.nodes.append(node)
        var = Var(self, len(self.nodes) - 1)
        self._vars.append(var)
        return var

    def leaf(self, value, trainable: bool = True, name: Optional[str] = None) -> Var:
        """Add an input matrix. Trainable leaves receive gradients."""
        return self._append(
            TapeNode(Op.LEAF, (), as_matrix(value, name or "leaf"), trainable=trainable, name=name)
        )

    def constant(self, value, name: Optional[str] = None) -> Var:
        return self.leaf(value, trainable=False, name=name)

    def record(self, op: Op, inputs: Sequence[Var], **attrs) -> Var:
        """Append a node for op applied to inputs and return a handle to it."""
        for var in inputs:
            if var.tape is not self:
                raise ValueError(f"{op.value}: operand belongs to a different tape")

        values = [var.value for var in inputs]
        value = self._forward(op, values, attrs)
        return self._append(TapeNode(op, tuple(var.index for var in inputs), value, attrs))

    def _forward(self, op: Op, values: List[np.ndarray], attrs: dict) -> np.ndarray:
        if op is Op.MATMUL:
            a, b = values
            if a.shape[1] != b.shape[0]:
                raise ShapeMismatchError(
                    f"matmul: inner dimensions disagree ({a.shape[0]}x{a.shape[1]} "
                    f"@ {b.shape[0]}x{b.shape[1]})"
                )
            return a @ b
        if op is Op.ADD:
            _check_same_shape(op, *values)
            return values[0] + values[1]
        if op is Op.SUB:
            _check_same_shape(op, *values)
            return values[0] - values[1]
        if op is Op.SCALE:
            return attrs["factor"] * values[0]
        if op is Op.TRANSPOSE:
            return values[0].T.copy()
        if op is Op.NEGATE:
            return -values[0]
        if op is Op.CONCAT_ROWS:
            cols = {v.shape[1] for v in values}
            if len(cols) != 1:
                raise ShapeMismatchError(f"concat-rows: column counts differ {sorted(cols)}")
            return np.vstack(values)
        if op is Op.CONCAT_COLS:
            rows = {v.shape[0] for v in values}
            if len(rows) != 1:
                raise ShapeMismatchError(f"concat-cols: row counts differ {sorted(rows)}")
            return np.hstack(values)
        if op is Op.SLICE:
            (r0, r1), (c0, c1) = attrs["rows"], attrs["cols"]
            return values[0][r0:r1, c0:c1].copy()
        if op is Op.ACTIVATION:
            return activate(attrs["kind"], values[0])
        if op is Op.EXP:
            clamp = attrs.get("clamp")
            x = values[0] if clamp is None else np.clip(values[0], clamp[0], clamp[1])
            return np.exp(x)
        if op is Op.SOLVE:
            A, B = values
            if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
                raise ShapeMismatchError(
                    f"linear-solve: A {A.shape} incompatible with right-hand side {B.shape}"
                )
            if A.shape[0] == 0:
                attrs["factors"] = None
                return np.zeros(B.shape)
            attrs["factors"] = lu_factor(A)
            return linalg.lu_solve(attrs["factors"], B, check_finite=False)
        if op is Op.MSE:
            if values[0].size == 0:
                raise ShapeMismatchError("mse-reduction: empty operand")
            return np.array([[np.mean(values[0] ** 2)]])
        if op is Op.FROBENIUS:
            return np.array([[np.sqrt(np.sum(values[0] ** 2))]])
        if op is Op.SUM:
            return np.array([[np.sum(values[0])]])
        if op is Op.DIAG:
            if values[0].shape[1] != 1:
                raise ShapeMismatchError(f"diag: expected a column vector, got {values[0].shape}")
            return np.diag(values[0][:, 0])
        raise ValueError(f"Cannot record op {op}")

    # Named constructors

    def matmul(self, a: Var, b: Var) -> Var:
        return self.record(Op.MATMUL, [a, b])

    def add(self, a: Var, b: Var) -> Var:
        return self.record(Op.ADD, [a, b])

    def sub(self, a: Var, b: Var) -> Var:
        return self.record(Op.SUB, [a, b])

    def scale(self, a: Var, factor: float) -> Var:
        return self.record(Op.SCALE, [a], factor=float(factor))

    def transpose(self, a: Var) -> Var:
        return self.record(Op.TRANSPOSE, [a])

    def negate(self, a: Var) -> Var:
        return self.record(Op.NEGATE, [a])

    def concat_rows(self, parts: Sequence[Var]) -> Var:
        return self.record(Op.CONCAT_ROWS, list(parts))

    def concat_cols(self, parts: Sequence[Var]) -> Var:
        return self.record(Op.CONCAT_COLS, list(parts))

    def slice(self, a: Var, rows, cols) -> Var:
        n_rows, n_cols = a.shape
        return self.record(
            Op.SLICE, [a], rows=_slice_bounds(rows, n_rows), cols=_slice_bounds(cols, n_cols)
        )

    def activation(self, a: Var, kind: str) -> Var:
        if kind not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{kind}' (expected one of {ACTIVATIONS})")
        return self.record(Op.ACTIVATION, [a], kind=kind)

    def exp(self, a: Var, clamp: Optional[Tuple[float, float]] = None) -> Var:
        return self.record(Op.EXP, [a], clamp=clamp)

    def solve(self, A: Var, B: Var) -> Var:
        return self.record(Op.SOLVE, [A, B])

    def mse(self, a: Var) -> Var:
        return self.record(Op.MSE, [a])

    def frobenius(self, a: Var) -> Var:
        return self.record(Op.FROBENIUS, [a])

    def sum(self, a: Var) -> Var:
        return self.record(Op.SUM, [a])

    def diag(self, a: Var) -> Var:
        return self.record(Op.DIAG, [a])

    def backward(self, root: Var) -> Gradients:
        """Reverse-mode gradients of a 1x1 root with respect to every trainable leaf."""
        if root.shape != (1, 1):
            raise NonScalarRootError(f"backward: root must be 1x1, got {root.shape}")

        adjoints: List[Optional[np.ndarray]] = [None] * (root.index + 1)
        adjoints[root.index] = np.ones((1, 1))

        for index in range(root.index, -1, -1):
            grad = adjoints[index]
            node = self.nodes[index]
            if grad is None or node.op is Op.LEAF:
                continue
            operands = [self.nodes[i].value for i in node.inputs]
            for input_index, contribution in zip(
                node.inputs, _backward(node, grad, operands)
            ):
                if contribution is None:
                    continue
                if adjoints[input_index] is None:
                    adjoints[input_index] = contribution
                else:
                    adjoints[input_index] = adjoints[input_index] + contribution

        grads = Gradients()
        for var, node in zip(self._vars, self.nodes):
            if node.op is Op.LEAF and node.trainable:
                adjoint = adjoints[var.index] if var.index <= root.index else None
                grads[var] = np.zeros(node.value.shape) if adjoint is None else adjoint
        return grads


def _backward(
    node: TapeNode, g: np.ndarray, operands: List[np.ndarray]
) -> List[Optional[np.ndarray]]:
    op = node.op
    if op is Op.MATMUL:
        a, b = operands
        return [g @ b.T, a.T @ g]
    if op is Op.ADD:
        return [g, g]
    if op is Op.SUB:
        return [g, -g]
    if op is Op.SCALE:
        return [node.attrs["factor"] * g]
    if op is Op.TRANSPOSE:
        return [g.T]
    if op is Op.NEGATE:
        return [-g]
    if op is Op.CONCAT_ROWS:
        parts, start = [], 0
        for operand in operands:
            stop = start + operand.shape[0]
            parts.append(g[start:stop, :])
            start = stop
        return parts
    if op is Op.CONCAT_COLS:
        parts, start = [], 0
        for operand in operands:
            stop = start + operand.shape[1]
            parts.append(g[:, start:stop])
            start = stop
        return parts
    if op is Op.SLICE:
        (r0, r1), (c0, c1) = node.attrs["rows"], node.attrs["cols"]
        full = np.zeros(operands[0].shape)
        full[r0:r1, c0:c1] = g
        return [full]
    if op is Op.ACTIVATION:
        x, y = operands[0], node.value
        kind = node.attrs["kind"]
        if kind == "tanh":
            return [g * (1.0 - y * y)]
        if kind == "relu":
            return [g * (x > 0.0)]
        return [np.where(x > 0.0, g, g * (y + 1.0))]
    if op is Op.EXP:
        clamp = node.attrs.get("clamp")
        grad = g * node.value
        if clamp is not None:
            x = operands[0]
            grad = np.where((x >= clamp[0]) & (x <= clamp[1]), grad, 0.0)
        return [grad]
    if op is Op.SOLVE:
        factors = node.attrs["factors"]
        if factors is None:
            return [np.zeros(operands[0].shape), np.zeros(operands[1].shape)]
        # adjoint solve: gB = A^-T g, gA = -gB X^T
        grad_b = linalg.lu_solve(factors, g, trans=1, check_finite=False)
        return [-grad_b @ node.value.T, grad_b]
    if op is Op.MSE:
        a = operands[0]
        return [g[0, 0] * 2.0 * a / a.size]
    if op is Op.FROBENIUS:
        norm = node.value[0, 0]
        if norm == 0.0:
            return [np.zeros(operands[0].shape)]
        return [g[0, 0] * operands[0] / norm]
    if op is Op.SUM:
        return [g[0, 0] * np.ones(operands[0].shape)]
    if op is Op.DIAG:
        return [np.diag(g).reshape(-1, 1).copy()]
    raise ValueError(f"No backward rule for {op}")


ScalarGraph = Callable[[Tape, Dict[str, Var]], Var]


def evaluate_graph(fn: ScalarGraph, point: Dict[str, np.ndarray]) -> float:
    """Evaluate a scalar graph at point without recording gradients."""
    tape = Tape()
    leaves = {name: tape.constant(value, name=name) for name, value in point.items()}
    return float(fn(tape, leaves).value[0, 0])


def grad_check(fn: ScalarGraph, point: Dict[str, np.ndarray], step: float = 1e-6) -> float:
    """Compare tape gradients with central finite differences.

    Args:
        fn: Builds a scalar node from named leaves on the given tape
        point: Parameter values keyed by leaf name
        step: Finite-difference step applied to one entry at a time

    Returns:
        max over entries of |analytic - central| / (|analytic| + |central| + 1e-12)
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")

    point = {name: as_matrix(value, name) for name, value in point.items()}
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in point.items()}
    analytic = tape.backward(fn(tape, leaves)).by_name()

    worst = 0.0
    for name, value in point.items():
        for idx in np.ndindex(*value.shape):
            shifted = dict(point)
            plus = value.copy()
            plus[idx] += step
            shifted[name] = plus
            f_plus = evaluate_graph(fn, shifted)

            minus = value.copy()
            minus[idx] -= step
            shifted[name] = minus
            f_minus = evaluate_graph(fn, shifted)

            central = (f_plus - f_minus) / (2.0 * step)
            exact = analytic[name][idx]
            error = abs(exact - central) / (abs(exact) + abs(central) + 1e-12)
            worst = max(worst, error)
    return worst
