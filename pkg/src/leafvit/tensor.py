"""Dense tensor value type, reverse-mode differentiation and op counting.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`leafvit.ops`
produce new tensors and, when any input requires a gradient, record a
backward closure on the result. :meth:`Tensor.backward` walks the recorded
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "leafvit_default_dtype", default=np.dtype(np.float32)
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("leafvit_grad_enabled", default=True)
_active_counter: contextvars.ContextVar["OpCounter | None"] = contextvars.ContextVar(
    "leafvit_op_counter", default=None
)


def default_dtype() -> np.dtype:
    return _default_dtype.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Used by gradient checks, which run the forward pass in float64.
    """
    token = _default_dtype.set(np.dtype(dtype))
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


@dataclass
class OpCounter:
    """Scalar-operation tally filled in by ops while a counting session is active.

    ``macs`` counts multiply-accumulates of contractions (matmul, conv);
    ``muls`` counts standalone elementwise products.
    """

    macs: int = 0
    muls: int = 0
    adds: int = 0
    divs: int = 0
    exps: int = 0

    def record(self, **counts: int) -> None:
        for key, value in counts.items():
            if value < 0:
                raise ContractError(f"negative op count for {key}: {value}")
            setattr(self, key, getattr(self, key) + int(value))

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@contextlib.contextmanager
def counting(counter: OpCounter | None = None) -> Iterator[OpCounter]:
    """Activate an :class:`OpCounter` for the enclosed forward computation."""
    counter = counter if counter is not None else OpCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def record_ops(**counts: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.record(**counts)


def make_rng(*keys: int) -> np.random.Generator:
    """Seeded Philox (counter-based, 64-bit) generator used for every stochastic op.

    Several integer keys (e.g. seed and epoch) derive independent streams.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else default_dtype(), copy=True)
        _check_extents(arr.shape)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: Sequence[Tensor] = (), backward: BackwardFn | None = None) -> Tensor:
        """Build an op result without copying; attaches the adjoint when recording."""
        out = cls.__new__(cls)
        _check_extents(arr.shape)
        out.data = arr
        out.grad = None
        out.name = None
        track = grad_enabled() and backward is not None and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation ---------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operator sugar (implemented in ops) --------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.index(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def _check_extents(shape: tuple[int, ...]) -> None:
    if any(s == 0 for s in shape):
        raise DimensionError(f"zero-sized extent in shape {shape}")


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=default_dtype()))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None, inputs: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Leaves listed in
    ``inputs`` that the loss does not depend on receive zeros.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")

    pending: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                _accumulate(node, g)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"adjoint produced gradient of shape {pg.shape} for input of shape {parent.shape}"
                )
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg

    for leaf in inputs or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = g.astype(leaf.dtype, copy=False)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
