"""Dense rank<=4 tensor type and the reverse-mode gradient tape."""

from __future__ import annotations

import threading

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Gradient tape used outside its contract (empty tape, non-scalar loss)."""


def _as_array(data, dtype):
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    if arr.ndim == 0:  # ascontiguousarray would promote 0-d to shape (1,)
        return np.asarray(arr, dtype=dtype)
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """n-d float array, NCHW layout for images, row-major.

    float32 by default; float64 is accepted so gradient checks can run the
    same op implementations at oracle precision. ``grad`` is filled in on
    ``requires_grad`` leaves by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Ordered record of executed ops, replayed strictly in reverse.

    One tape per training context; tapes on different threads never share
    state. Ops record themselves on the innermost active tape whenever one
    of their inputs is tracked (a ``requires_grad`` leaf or a value already
    produced on this tape).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    @staticmethod
    def current() -> "Tape | None":
        stack = _tape_stack()
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self._entries)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        """Append an op; ``backward(grad_out)`` must return one array-or-None
        adjoint per input, aligned with ``inputs``."""
        self._entries.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked requires_grad leaf.

        Traverses the recorded ops in exact reverse execution order, then
        clears the tape. Each leaf receives exactly one final gradient per
        call (zeros if the leaf did not influence the loss).
        """
        if loss.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self._entries:
            raise TapeError("backward called on an empty tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}

        for out, inputs, backward in reversed(self._entries):
            for inp in inputs:
                if inp.requires_grad:
                    leaves[id(inp)] = inp
            g = grads.pop(id(out), None)
            if g is None:
                continue  # op not on any path to the loss
            vjps = backward(g)
            for inp, v in zip(inputs, vjps):
                if v is None or not self.tracks(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + v
                else:
                    grads[key] = v

        for key, leaf in leaves.items():
            acc = grads.get(key)
            if acc is None:
                acc = np.zeros(leaf.shape, dtype=leaf.dtype)
            leaf.grad = np.ascontiguousarray(acc, dtype=leaf.dtype)

        self._entries.clear()
        self._produced.clear()


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr
