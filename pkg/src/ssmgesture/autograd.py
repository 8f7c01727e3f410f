"""Dense tensors with a tape-based reverse-mode gradient engine.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :func:`backward` replays that record in reverse. Outside a tape, ops
compute values only, which is what inference and benchmarking use.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape or value contract violated by a kernel."""


class NonFiniteError(TensorError):
    """A kernel produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a computation tape (reuse, non-scalar loss, ...)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _raise_item(t: Tensor):
    raise TensorError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops for one reverse pass.

    Use as a context manager; nested tapes are not supported. A tape is
    confined to the thread that opened it.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise TapeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class no_tape:
    """Temporarily suspend recording on this thread."""

    def __enter__(self):
        self._saved = active_tape()
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._saved


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap a kernel's output and record it on the active tape if needed."""
    check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        if tape.consumed:
            raise TapeError("tape already consumed by backward(); call reset()")
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; return grads of leaf tensors.

    Gradients accumulate into ``.grad`` of every tensor reached. Leaves are
    tensors with ``requires_grad`` that were not produced by a recorded op,
    i.e. parameters and explicit inputs.
    """
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape without reset()")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g if node.out.grad is None else node.out.grad + g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise TensorError(f"gradient shape {gi.shape} != tensor shape {t.shape}")
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            leaves.setdefault(key, t)

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None or key in produced:
            continue
        t.grad = g if t.grad is None else t.grad + g
        result[t] = t.grad
    return result
