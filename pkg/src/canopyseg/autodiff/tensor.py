from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ArgumentError, ShapeError, StateError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32}
_local = threading.local()


def default_dtype():
    return _state["dtype"]


def set_default_dtype(name: str) -> None:
    """Select 32-bit (training) or 64-bit (gradient verification) arithmetic."""
    try:
        _state["dtype"] = _DTYPES[np.dtype(name).name]
    except (KeyError, TypeError) as exc:
        raise ArgumentError(f"unsupported dtype {name!r}") from exc


@contextmanager
def precision(name: str):
    previous = _state["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


class Tensor:
    """Dense row-major float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "logits", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.logits = None  # set on sigmoid outputs; lets bce_loss differentiate w.r.t. logits

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Records primitive ops executed inside ``with tape:`` for reverse-mode AD.

    Nodes are appended in execution order, which is already a topological
    order of the computation graph.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._cleared = False

    def __enter__(self):
        if self._cleared:
            raise StateError("tape was cleared")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, output: Tensor, inputs, backward_fn) -> None:
        self._nodes.append(_Node(output, tuple(inputs), backward_fn))

    def clear(self) -> None:
        self._nodes = []
        self._cleared = True

    def backward(self, loss: Tensor, params=None):
        """Accumulate adjoints of ``loss`` into every ``requires_grad`` leaf.

        Returns a dict mapping each leaf (and each tensor in ``params``) to its
        gradient array. Tensors the loss does not depend on get zeros.
        """
        if self._cleared:
            raise StateError("tape was cleared")
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        adjoints = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        produced = set()
        for node in self._nodes:
            produced.add(id(node.output))
        for node in reversed(self._nodes):
            g = adjoints.pop(id(node.output), None)
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            if g is None:
                continue
            grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
        out = {}
        for key, t in leaves.items():
            t.grad = adjoints.get(key, np.zeros_like(t.data))
            out[t] = t.grad
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = adjoints.get(id(loss))
            out[loss] = loss.grad
        for p in params or ():
            if p not in out:
                p.grad = np.zeros_like(p.data)
                out[p] = p.grad
        return out
