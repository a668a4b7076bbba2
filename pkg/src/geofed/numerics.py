"""Dense 2-D float64 matrices with a reverse-mode gradient tape.

Everything differentiable in the package is built from the primitives here.
Scalars are carried as 1x1 matrices on the tape. Primitive forward functions
live in a registry so a tape can replay itself bit-exactly; backward applies
the matching vector-Jacobian products in reverse recording order. Summations
inside primitives use numpy's fixed (shape-determined) reduction order, so a
given sequence of ops is reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, EvaluationError, ShapeError

_LN_EPS = 1e-5


def _check_finite(a: np.ndarray, context: str) -> None:
    if not np.isfinite(a).all():
        raise EvaluationError(f"{context}: non-finite entries")


class Matrix:
    """Immutable dense matrix: row-major float64 storage plus shape."""

    __slots__ = ("_a",)

    def __init__(self, values):
        a = np.array(values, dtype=np.float64, order="C")
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ShapeError(f"Matrix requires 2-D data, got ndim={a.ndim}")
        _check_finite(a, "Matrix")
        a.setflags(write=False)
        self._a = a

    @classmethod
    def from_array(cls, a: np.ndarray, check: bool = True) -> "Matrix":
        m = object.__new__(cls)
        arr = np.ascontiguousarray(a, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix requires 2-D data, got ndim={arr.ndim}")
        if check:
            _check_finite(arr, "Matrix")
        if arr is a:
            arr = arr.copy()
        arr.setflags(write=False)
        m._a = arr
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls.from_array(np.zeros((rows, cols)), check=False)

    @classmethod
    def eye(cls, n: int) -> "Matrix":
        return cls.from_array(np.eye(n), check=False)

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries (read-only, length rows*cols)."""
        return self._a.reshape(-1)

    def array(self) -> np.ndarray:
        """Read-only 2-D view; callers must not (and cannot) write through it."""
        return self._a

    def to_list(self) -> list[list[float]]:
        return self._a.tolist()

    def allclose(self, other: "Matrix", tol: float = 1e-12) -> bool:
        return self.shape == other.shape and bool(np.allclose(self._a, other._a, atol=tol, rtol=0.0))

    def __eq__(self, other) -> bool:
        return isinstance(other, Matrix) and self.shape == other.shape and bool(np.array_equal(self._a, other._a))

    def __hash__(self):
        return hash((self.shape, self._a.tobytes()))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


class Param:
    """A named tensor with an accumulated gradient and a trainable flag.

    Frozen params (trainable=False) keep a gradient of exactly zero: backward
    never writes to them, which is the contract LoRA-style freezing relies on.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: Matrix, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = Matrix.zeros(value.rows, value.cols)
        self.trainable = trainable

    def zero_grad(self) -> None:
        self.grad = Matrix.zeros(self.value.rows, self.value.cols)

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"grad shape {g.shape} != value shape {self.value.shape} for {self.name}")
        self.grad = Matrix.from_array(self.grad.array() + g)

    def sgd_update(self, lr: float) -> None:
        if self.trainable:
            self.value = Matrix.from_array(self.value.array() - lr * self.grad.array())

    def assign(self, value: Matrix) -> None:
        if value.shape != self.value.shape:
            raise ShapeError(f"assign shape {value.shape} != {self.value.shape} for {self.name}")
        self.value = value

    def nudge(self, i: int, j: int, delta: float) -> None:
        a = self.value.array().copy()
        a[i, j] += delta
        self.value = Matrix.from_array(a, check=False)

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Param({self.name}, {self.value.rows}x{self.value.cols}{flag})"


# ---------------------------------------------------------------------------
# Primitive registry: forward functions and vector-Jacobian products.
# Forward signature: (parent_values, aux) -> value
# VJP signature: (parent_values, aux, out_value, out_grad) -> tuple of parent grads
# ---------------------------------------------------------------------------

_FWD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _op(name: str, fwd: Callable, vjp: Callable) -> None:
    _FWD[name] = fwd
    _VJP[name] = vjp


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _layer_norm_fwd(vals, aux):
    x, gain, bias = vals
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    s = np.sqrt((d * d).mean(axis=1, keepdims=True) + _LN_EPS)
    return (d / s) * gain + bias


def _layer_norm_vjp(vals, aux, out, g):
    x, gain, bias = vals
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    s = np.sqrt((d * d).mean(axis=1, keepdims=True) + _LN_EPS)
    xhat = d / s
    dxhat = g * gain
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / s
    return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


def _normalize_rows_fwd(vals, aux):
    (x,) = vals
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if (n < 1e-300).any():
        raise DegenerateVectorError("normalize_rows: zero-norm row")
    return x / n


def _normalize_rows_vjp(vals, aux, out, g):
    (x,) = vals
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    dot = (x * g).sum(axis=1, keepdims=True)
    return (g / n - x * (dot / n**3),)


def _column_norms_vjp(vals, aux, out, g):
    (x,) = vals
    safe = np.where(out > 0.0, out, 1.0)
    return (x * (np.where(out > 0.0, g, 0.0) / safe),)


def _logsumexp_rows_fwd(vals, aux):
    (x,) = vals
    m = x.max(axis=1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))


_op("matmul", lambda v, a: v[0] @ v[1], lambda v, a, o, g: (g @ v[1].T, v[0].T @ g))
_op("add", lambda v, a: v[0] + v[1], lambda v, a, o, g: (g, g))
_op("sub", lambda v, a: v[0] - v[1], lambda v, a, o, g: (g, -g))
_op("mul", lambda v, a: v[0] * v[1], lambda v, a, o, g: (g * v[1], g * v[0]))
_op("divide", lambda v, a: v[0] / v[1], lambda v, a, o, g: (g / v[1], -g * v[0] / (v[1] * v[1])))
_op("affine", lambda v, a: a[0] * v[0] + a[1], lambda v, a, o, g: (a[0] * g,))
_op("transpose", lambda v, a: v[0].T.copy(), lambda v, a, o, g: (g.T,))
_op("tanh", lambda v, a: np.tanh(v[0]), lambda v, a, o, g: (g * (1.0 - o * o),))
_op("sqrt", lambda v, a: np.sqrt(v[0]), lambda v, a, o, g: (g / (2.0 * o),))
_op("sum", lambda v, a: v[0].sum().reshape(1, 1), lambda v, a, o, g: (np.full_like(v[0], g[0, 0]),))
_op("add_n", lambda v, a: sum(v[1:], v[0].copy()), lambda v, a, o, g: tuple(g for _ in v))
_op(
    "mean_pool",
    lambda v, a: v[0].mean(axis=0, keepdims=True),
    lambda v, a, o, g: (np.repeat(g / v[0].shape[0], v[0].shape[0], axis=0),),
)
_op(
    "add_row",
    lambda v, a: v[0] + v[1],
    lambda v, a, o, g: (g, g.sum(axis=0, keepdims=True)),
)
_op(
    "softmax_rows",
    lambda v, a: _softmax_rows(v[0]),
    lambda v, a, o, g: (o * (g - (g * o).sum(axis=1, keepdims=True)),),
)
_op(
    "logsumexp_rows",
    _logsumexp_rows_fwd,
    lambda v, a, o, g: (_softmax_rows(v[0]) * g,),
)
_op("layer_norm", _layer_norm_fwd, _layer_norm_vjp)
_op("normalize_rows", _normalize_rows_fwd, _normalize_rows_vjp)
_op(
    "column_norms",
    lambda v, a: np.sqrt((v[0] * v[0]).sum(axis=0, keepdims=True)),
    _column_norms_vjp,
)
_op(
    "div_cols",
    lambda v, a: v[0] / v[1],
    lambda v, a, o, g: (g / v[1], -(g * v[0]).sum(axis=0, keepdims=True) / (v[1] * v[1])),
)
_op(
    "mul_cols",
    lambda v, a: v[0] * v[1],
    lambda v, a, o, g: (g * v[1], (g * v[0]).sum(axis=0, keepdims=True)),
)
_op(
    "slice_cols",
    lambda v, a: v[0][:, a[0] : a[1]].copy(),
    lambda v, a, o, g: (_scatter_cols(v[0].shape, a, g),),
)


def _scatter_cols(shape, aux, g):
    z = np.zeros(shape)
    z[:, aux[0] : aux[1]] = g
    return z


def _concat_cols_vjp(vals, aux, out, g):
    grads, j = [], 0
    for v in vals:
        grads.append(g[:, j : j + v.shape[1]])
        j += v.shape[1]
    return tuple(grads)


def _concat_rows_vjp(vals, aux, out, g):
    grads, i = [], 0
    for v in vals:
        grads.append(g[i : i + v.shape[0], :])
        i += v.shape[0]
    return tuple(grads)


_op("concat_cols", lambda v, a: np.concatenate(v, axis=1), _concat_cols_vjp)
_op("concat_rows", lambda v, a: np.concatenate(v, axis=0), _concat_rows_vjp)


class Node:
    """One recorded value. Leaves are bound to a Param or hold a constant."""

    __slots__ = ("op", "parents", "aux", "value", "grad", "param")

    def __init__(self, op: str, parents: tuple, aux, value: np.ndarray, param: Param | None = None):
        self.op = op
        self.parents = parents
        self.aux = aux
        self.value = value
        self.grad: np.ndarray | None = None
        self.param = param

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value[0, 0])


class Tape:
    """Single-threaded op recorder for one forward/backward region.

    With record=False the same ops run eagerly (identical numerics) but nothing
    is retained and backward() is unavailable; this is the evaluation path.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}
        self._params: list[Param] = []
        self._done = False

    # -- graph construction -------------------------------------------------

    def leaf(self, param: Param) -> Node:
        key = id(param)
        if key in self._leaves:
            return self._leaves[key]
        node = Node("leaf", (), None, param.value.array(), param=param)
        if self.record:
            self._leaves[key] = node
            self._params.append(param)
            self._nodes.append(node)
        return node

    def const(self, value: Matrix | np.ndarray | float) -> Node:
        if isinstance(value, Matrix):
            a = value.array()
        elif isinstance(value, np.ndarray):
            a = np.ascontiguousarray(value, dtype=np.float64)
            if a.ndim == 1:
                a = a.reshape(1, -1)
        else:
            a = np.array([[float(value)]])
        node = Node("const", (), None, a)
        if self.record:
            self._nodes.append(node)
        return node

    def _apply(self, op: str, parents: tuple[Node, ...], aux=None) -> Node:
        value = _FWD[op](tuple(p.value for p in parents), aux)
        node = Node(op, parents, aux, value)
        if self.record:
            self._nodes.append(node)
        return node

    # -- primitive ops -------------------------------------------------------

    def matmul(self, x: Node, y: Node) -> Node:
        if x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: inner dims differ ({x.shape[0]}x{x.shape[1]} vs {y.shape[0]}x{y.shape[1]})")
        return self._apply("matmul", (x, y))

    def add(self, x: Node, y: Node) -> Node:
        self._same_shape("add", x, y)
        return self._apply("add", (x, y))

    def sub(self, x: Node, y: Node) -> Node:
        self._same_shape("sub", x, y)
        return self._apply("sub", (x, y))

    def mul(self, x: Node, y: Node) -> Node:
        self._same_shape("mul", x, y)
        return self._apply("mul", (x, y))

    def divide(self, x: Node, y: Node) -> Node:
        self._same_shape("divide", x, y)
        return self._apply("divide", (x, y))

    def affine(self, x: Node, scale: float, shift: float = 0.0) -> Node:
        return self._apply("affine", (x,), (float(scale), float(shift)))

    def transpose(self, x: Node) -> Node:
        return self._apply("transpose", (x,))

    def tanh(self, x: Node) -> Node:
        return self._apply("tanh", (x,))

    def sqrt(self, x: Node) -> Node:
        return self._apply("sqrt", (x,))

    def sum(self, x: Node) -> Node:
        return self._apply("sum", (x,))

    def add_n(self, xs: Sequence[Node]) -> Node:
        if not xs:
            raise ShapeError("add_n: empty operand list")
        return self._apply("add_n", tuple(xs))

    def mean_pool(self, x: Node) -> Node:
        if x.shape[0] < 1:
            raise ShapeError("mean_pool: empty token sequence")
        return self._apply("mean_pool", (x,))

    def add_row(self, x: Node, row: Node) -> Node:
        if row.shape != (1, x.shape[1]):
            raise ShapeError(f"add_row: bias {row.shape} does not broadcast over {x.shape}")
        return self._apply("add_row", (x, row))

    def softmax_rows(self, x: Node) -> Node:
        return self._apply("softmax_rows", (x,))

    def logsumexp_rows(self, x: Node) -> Node:
        return self._apply("logsumexp_rows", (x,))

    def layer_norm(self, x: Node, gain: Node, bias: Node) -> Node:
        return self._apply("layer_norm", (x, gain, bias))

    def normalize_rows(self, x: Node) -> Node:
        return self._apply("normalize_rows", (x,))

    def column_norms(self, x: Node) -> Node:
        return self._apply("column_norms", (x,))

    def div_cols(self, x: Node, cols: Node) -> Node:
        if cols.shape != (1, x.shape[1]):
            raise ShapeError(f"div_cols: {cols.shape} does not broadcast over {x.shape}")
        return self._apply("div_cols", (x, cols))

    def mul_cols(self, x: Node, cols: Node) -> Node:
        if cols.shape != (1, x.shape[1]):
            raise ShapeError(f"mul_cols: {cols.shape} does not broadcast over {x.shape}")
        return self._apply("mul_cols", (x, cols))

    def slice_cols(self, x: Node, j0: int, j1: int) -> Node:
        if not (0 <= j0 < j1 <= x.shape[1]):
            raise ShapeError(f"slice_cols: [{j0}:{j1}] out of range for {x.shape}")
        return self._apply("slice_cols", (x,), (j0, j1))

    def concat_cols(self, xs: Sequence[Node]) -> Node:
        return self._apply("concat_cols", tuple(xs))

    def concat_rows(self, xs: Sequence[Node]) -> Node:
        return self._apply("concat_rows", tuple(xs))

    @staticmethod
    def _same_shape(op: str, x: Node, y: Node) -> None:
        if x.shape != y.shape:
            raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")

    # -- backward and replay ---------------------------------------------------

    def backward(self, out: Node) -> None:
        """Accumulate d(out)/d(param) into every trainable leaf's Param.grad."""
        if not self.record:
            raise EvaluationError("backward() on a non-recording tape")
        if self._done:
            raise EvaluationError("backward() already ran on this tape")
        if out.shape != (1, 1):
            raise ShapeError(f"backward target must be scalar, got {out.shape}")
        _check_finite(out.value, "backward target")
        self._done = True
        out.grad = np.ones((1, 1))
        for node in reversed(self._nodes):
            if node.grad is None or not node.parents:
                continue
            grads = _VJP[node.op](tuple(p.value for p in node.parents), node.aux, node.value, node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self._leaves.values():
            if node.param.trainable and node.grad is not None:
                node.param.add_grad(node.grad)

    def replay(self) -> bool:
        """Recompute every recorded op from its parents; True iff bit-identical."""
        for node in self._nodes:
            if not node.parents:
                continue
            redo = _FWD[node.op](tuple(p.value for p in node.parents), node.aux)
            if not np.array_equal(redo, node.value):
                return False
        return True

    def __len__(self) -> int:
        return len(self._nodes)


# ---------------------------------------------------------------------------
# Public (untaped) matrix operations.
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product; raises ShapeError naming both shapes."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ ({a.rows}x{a.cols} vs {b.rows}x{b.cols})")
    return Matrix.from_array(a.array() @ b.array())


def _as_vector(v) -> np.ndarray:
    if isinstance(v, Matrix):
        return np.asarray(v.data, dtype=np.float64)
    return np.asarray(v, dtype=np.float64).reshape(-1)


def cosine(u, v) -> float:
    """Cosine similarity of two equal-length vectors; clamped to [-1, 1]."""
    uu, vv = _as_vector(u), _as_vector(v)
    if uu.shape != vv.shape:
        raise ShapeError(f"cosine: lengths differ ({uu.size} vs {vv.size})")
    nu, nv = float(np.sqrt(uu @ uu)), float(np.sqrt(vv @ vv))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine: zero-norm vector")
    c = float(uu @ vv) / (nu * nv)
    _check_finite(np.array(c), "cosine")
    return min(1.0, max(-1.0, c))


def column_norms(w: Matrix) -> np.ndarray:
    """Euclidean norm of each column; zero columns yield zero norms."""
    out = np.sqrt((w.array() ** 2).sum(axis=0))
    _check_finite(out, "column_norms")
    return out


def mean_pool(tokens: Matrix) -> np.ndarray:
    """Column-wise mean of an LxD token matrix (L >= 1)."""
    if tokens.rows < 1:
        raise ShapeError("mean_pool: empty token sequence")
    out = tokens.array().mean(axis=0)
    _check_finite(out, "mean_pool")
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient verification.
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    param: str
    index: tuple[int, int]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    failures: list[GradCheckEntry] = field(default_factory=list)
    frozen_grad_max: float = 0.0
    eps: float = 1e-5
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[[Tape], Node],
    params: Iterable[Param],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a recorded scalar to central differences.

    `f` must build and return a scalar node on the tape it is given. Every
    entry of every trainable param is perturbed by +/-eps; the relative error
    |a - n| / max(|a|, |n|) is reported (entries where both magnitudes are
    below 1e-7 count as exact). Frozen params are asserted to keep zero grads.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps={eps} outside [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = f(tape)
    if not np.isfinite(out.value).all():
        raise EvaluationError("grad_check: objective is non-finite")
    tape.backward(out)
    analytic = {id(p): p.grad.array().copy() for p in params}

    def evaluate() -> float:
        val = f(Tape(record=False)).item()
        if not np.isfinite(val):
            raise EvaluationError("grad_check: non-finite objective at perturbed point")
        return val

    report = GradCheckReport(max_rel_error=0.0, n_checked=0, eps=eps, tol=tol)
    for p in params:
        if not p.trainable:
            report.frozen_grad_max = max(report.frozen_grad_max, float(np.abs(p.grad.array()).max(initial=0.0)))
            continue
        grads = analytic[id(p)]
        for i in range(p.value.rows):
            for j in range(p.value.cols):
                p.nudge(i, j, eps)
                up = evaluate()
                p.nudge(i, j, -2.0 * eps)
                down = evaluate()
                p.nudge(i, j, eps)
                numeric = (up - down) / (2.0 * eps)
                a = float(grads[i, j])
                scale = max(abs(a), abs(numeric))
                rel = 0.0 if scale < 1e-7 else abs(a - numeric) / scale
                report.n_checked += 1
                report.max_rel_error = max(report.max_rel_error, rel)
                if rel > tol:
                    report.failures.append(GradCheckEntry(p.name, (i, j), a, numeric, rel))
    return report
