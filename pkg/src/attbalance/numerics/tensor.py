"""
Dense float64 tensors and the reverse-mode tape that differentiates them.

Every operation in :mod:`attbalance.numerics.ops` whose inputs require
gradients appends a record to the active :class:`Tape`; with no tape active
the record stays on the output and :func:`backward` gathers the graph from
the loss. Records are appended in evaluation order, so replaying them
backwards is a reverse topological traversal of the computation.
"""

import contextlib
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import BackwardError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, Sequence, np.ndarray]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An immutable n-dimensional float64 value that may sit on a tape.

    ``data`` is read-only. Parameters are the one exception to immutability:
    optimizers and moving averages swap their values between steps through
    :meth:`assign`, which replaces the array instead of writing into it.
    """

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self._data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None
        self._generation = -1
        self._record: Optional["_Record"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        """Build a tensor around a freshly computed array without copying."""
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if array.flags.writeable and array.base is None:
            array.flags.writeable = False
        elif array.flags.writeable:
            array = array.copy()
            array.flags.writeable = False
        out._data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        out._generation = -1
        out._record = None
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, values: ArrayLike) -> None:
        """Replace the tensor's values in place of an optimizer update."""
        array = np.array(values, dtype=np.float64)
        if array.shape != self.shape:
            raise DimensionError(
                f"assign: new values have shape {array.shape}, tensor has {self.shape}"
            )
        array.flags.writeable = False
        self._data = array

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar; the implementations live in ops.py.
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __getitem__(self, index):
        return _ops.getitem(self, index)


class _Record:
    __slots__ = ("op", "output", "parents", "vjp")

    def __init__(self, op: str, output: Tensor, parents: Tuple[Tensor, ...], vjp: VJP):
        self.op = op
        self.output = output
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    A tape is replayed once. A second :meth:`backward` raises until
    :meth:`reset_grads` is called; recording a new operation onto a replayed
    tape starts a fresh graph.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._generation = 0
        self.consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def record(self, op: str, output: Tensor, parents: Tuple[Tensor, ...], vjp: VJP) -> None:
        if self.consumed:
            self.clear()
        output._tape = self
        output._generation = self._generation
        self._records.append(_Record(op, output, parents, vjp))

    def clear(self) -> None:
        """Drop all records and start a new graph."""
        self._records = []
        self._generation += 1
        self.consumed = False

    def participants(self) -> List[Tensor]:
        seen: Dict[int, Tensor] = {}
        for rec in self._records:
            for parent in rec.parents:
                if parent.requires_grad:
                    seen.setdefault(id(parent), parent)
            seen.setdefault(id(rec.output), rec.output)
        return list(seen.values())

    def reset_grads(self) -> None:
        """Clear gradients of every participant so the tape may be replayed."""
        for tensor in self.participants():
            tensor.grad = None
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss._generation != self._generation:
            raise BackwardError("loss was not recorded on this tape")
        if self.consumed:
            raise BackwardError(
                "tape already replayed; call reset_grads() before a second backward"
            )

        pending: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: Dict[int, Tensor] = {}
        for rec in reversed(self._records):
            grad = pending.pop(id(rec.output), None)
            if grad is None:
                continue
            rec.output.grad = grad
            parent_grads = rec.vjp(grad)
            factor = _VJP_FAULTS.get(rec.op)
            for parent, pgrad in zip(rec.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pgrad = pgrad * factor
                key = id(parent)
                if parent._tape is not self or parent._generation != self._generation:
                    leaves[key] = parent
                if key in pending:
                    pending[key] = pending[key] + pgrad
                else:
                    pending[key] = pgrad

        for key, leaf in leaves.items():
            grad = pending.pop(key)
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        self.consumed = True
        logger.debug(f"Backward replayed {len(self._records)} records")

    @classmethod
    def from_graph(cls, loss: Tensor) -> "Tape":
        """Collect the records hanging off ``loss`` in evaluation order."""
        tape = cls()
        order: List[_Record] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            rec = node._record
            if rec is None:
                continue
            if expanded:
                order.append(rec)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in rec.parents if p._record is not None)
        for rec in order:
            tape.record(rec.op, rec.output, rec.parents, rec.vjp)
        return tape


_TAPE_STACK: List[Tape] = []
_GRAD_ENABLED: List[bool] = [True]
_VJP_FAULTS: Dict[str, float] = {}


def current_tape() -> Optional[Tape]:
    """The innermost active tape, or None outside any ``with Tape()`` block."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording; outputs never require gradients."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def corrupted_gradient(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the recorded vector-Jacobian product of one operation kind.

    Only used as a negative control for gradient checking.
    """
    previous = _VJP_FAULTS.get(op)
    _VJP_FAULTS[op] = factor
    logger.warning(f"Gradient rule of '{op}' corrupted by factor {factor}")
    try:
        yield
    finally:
        if previous is None:
            _VJP_FAULTS.pop(op, None)
        else:
            _VJP_FAULTS[op] = previous


def make_result(op: str, array: np.ndarray, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap an op's output and record it when any parent needs gradients.

    Outside a tape the record is attached to the output itself and lives as
    long as the graph does.
    """
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(array, requires_grad=requires)
    if requires:
        tape = current_tape()
        if tape is None:
            out._record = _Record(op, out, tuple(parents), vjp)
        else:
            tape.record(op, out, tuple(parents), vjp)
    return out


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every participant of the loss's tape."""
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss._record is None:
            raise BackwardError("loss does not require gradients; nothing was recorded")
        Tape.from_graph(loss).backward(loss)
        return
    loss._tape.backward(loss)


from . import ops as _ops  # noqa: E402
