"""Tensor value type and the append-only gradient tape."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from oxygan.errors import ContractError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float array, optionally tracked by a :class:`GradTape`.

    ``data`` is float32 by default. Building tensors from float64 arrays gives
    the shadow precision used for gradient checking; every op keeps the dtype
    of its inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: GradTape | None = None
        self._node: int | None = None

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{flag})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from oxygan.tensor_core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from oxygan.tensor_core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from oxygan.tensor_core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from oxygan.tensor_core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from oxygan.tensor_core import ops
        return ops.neg(self)

    def sum(self):
        from oxygan.tensor_core import ops
        return ops.sum_all(self)

    def mean(self):
        from oxygan.tensor_core import ops
        return ops.mean_all(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got dims {t.dims}")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Append-only record of differentiable ops.

    Use as a context manager; ops executed inside it whose inputs require
    gradients append a node. :meth:`backward` walks the nodes once, in reverse
    append order, and then the tape is spent.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._spent = False

    def __enter__(self) -> GradTape:
        if self._spent:
            raise ContractError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        output.requires_grad = True
        output._tape = self
        output._node = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(param) for each param; also stored on ``param.grad``.

        Parameters the loss does not reach get a zero gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got dims {loss.dims}")
        if self._spent:
            raise ContractError("tape already consumed by backward()")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for inp, g in zip(node.inputs, node.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        self.nodes.clear()

        out = []
        for p in params:
            g = grads.get(id(p))
            g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
            p.grad = g
            out.append(g)
        return out


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.backward(loss, params)


def recording_tape(*inputs: Tensor) -> GradTape | None:
    """The tape an op should record on, or None when no input needs a gradient."""
    tape = active_tape()
    if tape is None:
        return None
    tracked = [t for t in inputs if t is not None and t.requires_grad]
    if not tracked:
        return None
    for t in tracked:
        if t._tape is not None and t._tape is not tape:
            raise ContractError("tensor belongs to a different gradient tape")
    return tape
