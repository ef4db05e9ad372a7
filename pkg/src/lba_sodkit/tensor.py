"""Tensor value type and the gradient tape.

Tensors are thin wrappers around float64 numpy arrays. Rank-4 arrays use the
(n, c, h, w) layout; rank-3 arrays (n, r, c) stand in for batched matrices.
Operations in :mod:`lba_sodkit.ops` record themselves on the active
:class:`GradTape` whenever one of their inputs requires a gradient, and
:func:`backward` replays those records in reverse.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "lba_sodkit_tape", default=None
)


class ShapeError(ValueError):
    """Raised when an operation receives operands of incompatible shape."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__


@dataclass
class TapeRecord:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of differentiable operations executed while active.

    Use as a context manager around a forward pass::

        with GradTape() as tape:
            loss = model(x)
        backward(tape, loss)

    A tape is single-writer; concurrent forward passes each need their own.
    The active tape is tracked per context, so separate threads do not see
    each other's tapes.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.records.append(TapeRecord(op, out, inputs, vjp))


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def make_result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and log it on the active tape."""
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, vjp)
    return out


def backward(tape: GradTape, loss: Tensor, seed: float | np.ndarray = 1.0,
             visit: Callable[[TapeRecord], None] | None = None) -> None:
    """Propagate ``seed`` from ``loss`` back through ``tape``.

    Gradients are accumulated into ``.grad`` of every leaf tensor (one that
    requires grad but was not produced by a recorded op). ``visit`` is called
    once per record, in reverse execution order.
    """
    if not tape.records:
        raise TapeError("backward called on an empty tape; run a forward pass first")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")

    seed_arr = np.broadcast_to(np.asarray(seed, dtype=np.float64), loss.shape).copy()
    grads: dict[int, np.ndarray] = {id(loss): seed_arr}
    produced = {id(r.out) for r in tape.records}
    leaves: dict[int, Tensor] = {}

    for rec in reversed(tape.records):
        if visit is not None:
            visit(rec)
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad = leaf.grad + g
