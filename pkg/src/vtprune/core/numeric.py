"""Dense double-precision matrices with opt-in reverse-mode gradients.

Every operation in this module is a pure function over ``Matrix`` values.
Gradients are only recorded while a ``GradientContext`` is active and at
least one input is tracked by it, so inference code pays nothing for
differentiation.
"""

import logging
import math
import threading
import zlib
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from vtprune.utils.exceptions import (
    ArgumentError,
    ContractError,
    NumericError,
    ShapeError,
)

logger = logging.getLogger(__name__)

# Added inside the square root of the RMS so all-zero rows stay finite
RMS_EPS = 1e-6

ArrayLike = Union[np.ndarray, Sequence, float]
Gradients = Dict["Matrix", np.ndarray]

_STATE = threading.local()


class Matrix:
    """A rows x cols block of doubles."""

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError(f"Matrix needs 2 dimensions, got {array.ndim}")
        self.data = array

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Matrix":
        matrix = cls.__new__(cls)
        matrix.data = array
        return matrix

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.ones((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def item(self) -> float:
        """Value of a 1x1 matrix."""
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, _as_matrix(other))

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, _as_matrix(other))

    def __mul__(self, other: Union["Matrix", float]) -> "Matrix":
        if isinstance(other, Matrix):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Matrix":
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)


def _as_matrix(value: Union[Matrix, ArrayLike]) -> Matrix:
    return value if isinstance(value, Matrix) else Matrix(value)


class _Node:
    __slots__ = ("fn", "inputs", "output")

    def __init__(self, fn: "Function", inputs: Tuple[Matrix, ...], output):
        self.fn = fn
        self.inputs = inputs
        self.output = output


class GradientContext:
    """Records the operations applied to watched matrices.

    Use it as a context manager; only ops executed inside the ``with`` block
    whose inputs are watched (or were produced by recorded ops) enter the
    tape. A context belongs to one thread and one caller.

    Example:
        ctx = GradientContext()
        ctx.watch(weights)
        with ctx:
            loss = sum_all(matmul(x, weights))
        grads = ctx.backward(loss)
    """

    def __init__(self):
        self._leaves: Dict[int, Matrix] = {}
        self._tracked: Dict[int, Matrix] = {}
        self._tape: List[_Node] = []
        self._adjoints: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradientContext":
        stack = _context_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _context_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, *matrices: Matrix) -> None:
        """Mark matrices as leaves whose gradients ``backward`` returns."""
        for matrix in matrices:
            self._leaves[id(matrix)] = matrix
            self._tracked[id(matrix)] = matrix

    def is_tracked(self, matrix: Matrix) -> bool:
        return id(matrix) in self._tracked

    @property
    def leaves(self) -> List[Matrix]:
        return list(self._leaves.values())

    def __len__(self) -> int:
        return len(self._tape)

    def record(
        self, fn: "Function", inputs: Tuple[Matrix, ...], output: Matrix
    ) -> None:
        self._tape.append(_Node(fn, inputs, output))
        self._tracked[id(output)] = output

    def backward(self, loss: Matrix) -> Gradients:
        """
        Propagate adjoints from a scalar loss back to every watched leaf.

        Args:
            loss: A 1x1 matrix produced by ops recorded in this context

        Returns:
            Gradients: Mapping from each leaf matrix to its gradient array

        Raises:
            ContractError: If the loss is not a recorded scalar
        """
        if loss.shape != (1, 1):
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if not self.is_tracked(loss):
            raise ContractError("loss was not recorded by this context")

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for node in reversed(self._tape):
            grad = adjoints.get(id(node.output))
            if grad is None:
                continue
            input_grads = node.fn.backward(grad)
            for matrix, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not self.is_tracked(matrix):
                    continue
                key = id(matrix)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + input_grad
                else:
                    adjoints[key] = input_grad

        self._adjoints = adjoints
        return {
            leaf: adjoints.get(key, np.zeros(leaf.shape))
            for key, leaf in self._leaves.items()
        }

    def grad(self, matrix: Matrix) -> np.ndarray:
        """Adjoint of any tracked matrix after ``backward`` has run."""
        if not self.is_tracked(matrix):
            raise ContractError("matrix is not tracked by this context")
        return self._adjoints.get(id(matrix), np.zeros(matrix.shape))

    def replay(self) -> bool:
        """Re-execute the tape and report whether every output is bit-exact."""
        values: Dict[int, np.ndarray] = {}
        exact = True
        for node in self._tape:
            arrays = [values.get(id(m), m.data) for m in node.inputs]
            fresh = type(node.fn)(**node.fn.params).forward(*arrays)
            if fresh.shape != node.output.shape or (
                fresh.tobytes() != node.output.data.tobytes()
            ):
                exact = False
            values[id(node.output)] = fresh
        return exact


def _context_stack() -> List[Optional[GradientContext]]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def current_context() -> Optional[GradientContext]:
    """The innermost active context on this thread, if any."""
    stack = _context_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread, even inside an active context."""
    stack = _context_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Function:
    """One differentiable primitive; ``forward`` caches for ``backward``."""

    def __init__(self, **params):
        self.params = params

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Matrix, **params) -> Matrix:
        fn = cls(**params)
        out = fn.forward(*[m.data for m in inputs])
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.__name__} produced a non-finite value")
        result = Matrix._wrap(out)
        ctx = current_context()
        if ctx is not None and any(ctx.is_tracked(m) for m in inputs):
            ctx.record(fn, inputs, result)
        return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Matrix, b: Matrix, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Transpose(Function):
    def forward(self, a):
        return a.T.copy()

    def backward(self, grad):
        return (grad.T,)


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return (
            _unbroadcast(grad, self.shapes[0]),
            _unbroadcast(grad, self.shapes[1]),
        )


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return (
            _unbroadcast(grad, self.shapes[0]),
            _unbroadcast(-grad, self.shapes[1]),
        )


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Scale(Function):
    def forward(self, a):
        return a * self.params["factor"]

    def backward(self, grad):
        return (grad * self.params["factor"],)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class SumAll(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.array([[a.sum()]])

    def backward(self, grad):
        return (np.full(self.shape, grad[0, 0]),)


class SoftmaxRows(Function):
    def forward(self, a):
        shifted = a - a.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=1, keepdims=True)),)


class RmsNormalize(Function):
    def forward(self, x, gain):
        eps = self.params["eps"]
        self.rms = np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
        self.normed = x / self.rms
        self.gain = gain
        return self.normed * gain

    def backward(self, grad):
        d_gain = (grad * self.normed).sum(axis=0, keepdims=True)
        d_normed = grad * self.gain
        inner = (d_normed * self.normed).mean(axis=1, keepdims=True)
        d_x = (d_normed - self.normed * inner) / self.rms
        return d_x, d_gain


class GatherRows(Function):
    def forward(self, a):
        self.shape = a.shape
        return a[self.params["indices"]]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.params["indices"], grad)
        return (full,)


class ConcatRows(Function):
    def forward(self, *arrays):
        self.splits = np.cumsum([a.shape[0] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=0))


class StraightThrough(Function):
    """Forward the hard value, route the gradient to the soft input."""

    def forward(self, soft):
        hard = self.params["hard"]
        if hard.shape != soft.shape:
            raise ShapeError(
                f"straight-through: hard {hard.shape} vs soft {soft.shape}"
            )
        return hard.copy()

    def backward(self, grad):
        return (grad,)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Standard matrix product.

    Raises:
        ShapeError: If the inner dimensions do not match
    """
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


def transpose(a: Matrix) -> Matrix:
    return Transpose.apply(a)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; a 1xN or Mx1 operand broadcasts."""
    _broadcast_shape(a, b, "add")
    return Add.apply(a, b)


def sub(a: Matrix, b: Matrix) -> Matrix:
    _broadcast_shape(a, b, "sub")
    return Sub.apply(a, b)


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product; a 1x1 operand acts as a trainable scalar."""
    _broadcast_shape(a, b, "mul")
    return Mul.apply(a, b)


def scale(a: Matrix, factor: float) -> Matrix:
    """Multiply by a constant that is not differentiated."""
    return Scale.apply(a, factor=float(factor))


def relu(a: Matrix) -> Matrix:
    return Relu.apply(a)


def sum_all(a: Matrix) -> Matrix:
    return SumAll.apply(a)


def mean_all(a: Matrix) -> Matrix:
    return scale(sum_all(a), 1.0 / (a.rows * a.cols))


def square(a: Matrix) -> Matrix:
    return Mul.apply(a, a)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax computed with max-subtraction."""
    return SoftmaxRows.apply(m)


def rms_normalize(
    m: Matrix, gain: Union[Matrix, ArrayLike], eps: float = RMS_EPS
) -> Matrix:
    """
    Scale each row to unit root-mean-square, then multiply by ``gain``.

    Args:
        m: Input rows
        gain: Gain vector with one entry per column
        eps: Added to the mean square before the square root

    Returns:
        Matrix: Normalized rows

    Raises:
        ShapeError: If the gain length differs from the row dimension
    """
    gain = _as_matrix(gain)
    if gain.shape != (1, m.cols):
        raise ShapeError(
            f"rms_normalize: gain {gain.shape} for rows of width {m.cols}"
        )
    return RmsNormalize.apply(m, gain, eps=float(eps))


def gather_rows(m: Matrix, indices: Sequence[int]) -> Matrix:
    """Rows of ``m`` at ``indices`` (repeats allowed), in the given order."""
    index = np.asarray(indices, dtype=np.int64)
    if index.ndim != 1 or (
        index.size and (index.min() < 0 or index.max() >= m.rows)
    ):
        raise ShapeError(f"gather_rows: indices out of range for {m.rows}")
    return GatherRows.apply(m, indices=index)


def concat_rows(*matrices: Matrix) -> Matrix:
    if not matrices:
        raise ArgumentError("concat_rows needs at least one matrix")
    widths = {m.cols for m in matrices}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: mixed widths {sorted(widths)}")
    return ConcatRows.apply(*matrices)


def straight_through(hard: np.ndarray, soft: Matrix) -> Matrix:
    """Value of ``hard`` in the forward pass, gradient of ``soft`` backward."""
    return StraightThrough.apply(soft, hard=np.asarray(hard, dtype=np.float64))


class Rng:
    """Seeded PCG64 stream; the same seed yields the same draws everywhere."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ArgumentError(f"seed must fit in 64 unsigned bits: {seed}")
        self.seed = seed
        self._generator = np.random.Generator(np.random.PCG64(seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def split(self, name: str) -> "Rng":
        """Independent child stream derived from (seed, name) only."""
        key = zlib.crc32(name.encode("utf-8"))
        state = np.random.SeedSequence([self.seed, key]).generate_state(
            2, dtype=np.uint32
        )
        return Rng((int(state[0]) << 32) | int(state[1]))

    def uniform(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self._generator.random(shape)

    def normal(self, shape: Tuple[int, ...], std: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, std, size=shape)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct integers from range(n)."""
        return self._generator.choice(n, size=size, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def sample_uniform_noise(
    shape: Tuple[int, int], alpha: float, rng: Rng
) -> Matrix:
    """
    I.i.d. noise in the half-open interval [0, alpha).

    Raises:
        ArgumentError: If alpha is negative
    """
    if alpha < 0:
        raise ArgumentError(f"noise alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return Matrix.zeros(*shape)
    values = rng.uniform(shape) * alpha
    # u * alpha can round up to alpha itself
    values = np.minimum(values, np.nextafter(alpha, 0.0))
    return Matrix._wrap(values)


def sample_gumbel_noise(
    shape: Tuple[int, int], alpha: float, rng: Rng
) -> Matrix:
    """Standard Gumbel(0, 1) draws scaled by ``alpha``."""
    if alpha < 0:
        raise ArgumentError(f"noise alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return Matrix.zeros(*shape)
    # random() may return 0.0 exactly
    u = np.clip(rng.uniform(shape), np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return Matrix._wrap(-np.log(-np.log(u)) * alpha)


def inv_sqrt(dim: int) -> float:
    return 1.0 / math.sqrt(dim)
