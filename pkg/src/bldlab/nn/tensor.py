"""Dense tensors recorded on an explicit reverse-mode tape.

Every differentiable op appends one node to the active :class:`Tape`. The tape
is cleared once per training step; tensors produced before a clear become
detached and cannot be back-propagated through.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Linear record of differentiable ops in execution order."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: BackwardFn) -> None:
        out._node_index = len(self.nodes)
        out._generation = self.generation
        self.nodes.append(_Node(out, parents, backward))

    def clear(self) -> None:
        self.nodes.clear()
        self.generation += 1


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


class Tensor:
    """n-d float array with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` accumulate into ``grad`` on every
    :func:`backward` call until zeroed. Non-leaf tensors carry a reference to
    the tape node that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node_index", "_generation", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node_index: int | None = None
        self._generation = -1
        self.name = name
        if _DEBUG:
            _check_finite(arr, "tensor construction")

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node_index is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operator sugar (implemented in functional) -------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def _raise_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {where}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the tape when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node_index = None
    out._generation = -1
    out.name = None
    if _DEBUG:
        _check_finite(data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        _TAPE.record(out, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that does not require grad")
    tape = _TAPE
    idx = loss._node_index
    if idx is None:
        # a scalar leaf: d loss / d loss = 1
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    if loss._generation != tape.generation or idx >= len(tape.nodes) or tape.nodes[idx].out is not loss:
        raise RuntimeError("tensor is detached from the tape (was the tape cleared?)")

    pending: dict[int, np.ndarray] = {idx: np.ones_like(loss.data)}
    for i in range(idx, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        node.out.grad = g
        grads = node.backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.data.shape != pg.shape:
                raise RuntimeError(
                    f"internal gradient shape mismatch: {pg.shape} vs {parent.data.shape}"
                )
            pidx = parent._node_index
            if pidx is None or parent._generation != tape.generation:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = pending.get(pidx)
                pending[pidx] = pg if prev is None else prev + pg
