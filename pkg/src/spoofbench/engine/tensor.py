"""Dense tensors and reverse-mode differentiation with higher-order support.

Every primitive's backward is written in terms of other primitives, so when
``create_graph=True`` the backward pass is itself recorded as graph nodes and
can be differentiated again (needed for the gradient penalty).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "GradError",
    "ShapeError",
    "grad",
    "no_grad",
    "precision",
    "get_dtype",
    "is_grad_enabled",
]


class ShapeError(ValueError):
    """Raised when input shapes are incompatible for an op."""


class GradError(RuntimeError):
    """Raised for malformed gradient requests."""


_state = threading.local()
_ids = itertools.count()

_DTYPES = {"narrow": np.float32, "wide": np.float64}


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(mode: str):
    """Set the floating dtype of newly created tensors: "narrow" (f32) or "wide" (f64)."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = get_dtype()
    _state.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional real array, optionally a node of the active graph.

    ``id`` is drawn from a global counter at creation, so the inputs of any
    recorded op always have smaller ids than its output.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else get_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._ctx: Optional[Function] = None
        self.id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        leaves = [t for t in _topo(self) if t.is_leaf and t.requires_grad]
        grads = grad(self, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else Tensor(leaf.grad.data + g.data)

    # -- operator sugar (defined in ops, bound at import) ------------------


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


class Function:
    """A recorded primitive. Subclasses implement ``forward`` on arrays and
    ``backward`` on Tensors (so that backward is itself differentiable)."""

    def __init__(self, inputs: Sequence[Tensor]):
        self.inputs = tuple(inputs)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor, needs: Sequence[bool]) -> Sequence[Optional[Tensor]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(inputs, **kwargs) if kwargs else cls(inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs)), dtype=inputs[0].dtype)
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out


def _topo(root: Tensor) -> list[Tensor]:
    """All graph tensors reachable from ``root`` in increasing id order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        if t._ctx is not None:
            stack.extend(t._ctx.inputs)
    return [seen[k] for k in sorted(seen)]


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    grad_output: Optional[Tensor] = None,
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Return d(output)/d(w) for each ``w`` in ``wrt``.

    ``output`` must be a scalar unless ``grad_output`` is given. With
    ``create_graph=True`` the returned gradients are graph members and may be
    differentiated again. A ``w`` that ``output`` does not depend on raises
    ``GradError`` unless ``allow_unused``, in which case its gradient is zero.
    """
    wrt = list(wrt)
    if grad_output is None:
        if output.shape != ():
            raise GradError(f"grad needs a scalar output, got shape {output.shape}")
        grad_output = Tensor(np.ones((), dtype=output.dtype))
    elif grad_output.shape != output.shape:
        raise ShapeError(f"grad_output shape {grad_output.shape} != output shape {output.shape}")

    order = _topo(output)
    wrt_ids = {w.id for w in wrt}
    # tensors lying on some path from a wrt tensor to the output
    needed: set[int] = set()
    for t in order:
        if t.id in wrt_ids or (t._ctx is not None and any(i.id in needed for i in t._ctx.inputs)):
            needed.add(t.id)

    missing = [i for i, w in enumerate(wrt) if w.id not in needed]
    if missing and not allow_unused:
        raise GradError(f"wrt tensors at positions {missing} are not reachable from the output")

    grads: dict[int, Tensor] = {}
    if output.id in needed:
        grads[output.id] = grad_output
    with _grad_mode(create_graph):
        for t in reversed(order):
            g = grads.pop(t.id, None) if t.id not in wrt_ids else grads.get(t.id)
            if g is None or t._ctx is None:
                continue
            ins = t._ctx.inputs
            needs = [i.id in needed for i in ins]
            if not any(needs):
                continue
            for inp, need, gi in zip(ins, needs, t._ctx.backward(g, needs)):
                if not need or gi is None:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
    out = []
    for w in wrt:
        g = grads.get(w.id)
        if g is None:
            g = Tensor(np.zeros(w.shape, dtype=w.dtype))
        elif not create_graph:
            g = Tensor(g.data, dtype=g.dtype)
        out.append(g)
    return out
