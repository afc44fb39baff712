from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

TENSOR_MAGIC = b"TNSR"
_GRAD_ENABLED = True
_DEFAULT_DTYPE: type = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    pass


@contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextmanager
def default_dtype(dtype: type) -> Iterator[None]:
    """Storage dtype for tensors created inside the block (float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def storage_dtype() -> type:
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: object,
        *,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
    ) -> None:
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_DEFAULT_DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(value: object) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: object) -> Tensor:
    return Tensor(data, requires_grad=True)


def make_result(data: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result, enforce finiteness and record the node when any parent needs a gradient."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs_grad = _GRAD_ENABLED and any(parent.requires_grad for parent in parents)
    if not needs_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward_fn)


class OpGraph:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "OpGraph":
        order: List[Tensor] = []
        visited: set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if grad.shape != tensor.data.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {tensor.data.shape}")
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor) -> OpGraph:
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    graph = OpGraph.from_output(loss)
    if not loss.requires_grad:
        return graph
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            _accumulate(parent, grad)
        if node._parents:
            # Intermediate gradients are not needed once propagated.
            node.grad = None
    return graph


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    h: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients of a scalar fn."""
    for tensor in inputs:
        tensor.zero_grad()
    backward(fn())
    analytic = [np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            numeric = np.zeros(flat.size, dtype=np.float64)
            for index in range(flat.size):
                original = flat[index]
                flat[index] = original + h
                plus = float(np.sum(fn().data, dtype=np.float64))
                flat[index] = original - h
                minus = float(np.sum(fn().data, dtype=np.float64))
                flat[index] = original
                numeric[index] = (plus - minus) / (2.0 * h)
            scale = max(1.0, float(np.max(np.abs(numeric))), float(np.max(np.abs(grad))))
            worst = max(worst, float(np.max(np.abs(numeric - grad.reshape(-1)))) / scale)
    return worst


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    data = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", data.ndim))
    if data.ndim:
        stream.write(struct.pack(f"<{data.ndim}I", *data.shape))
    stream.write(data.tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError("invalid tensor header")
    try:
        (rank,) = struct.unpack("<I", stream.read(4))
        shape = struct.unpack(f"<{rank}I", stream.read(4 * rank)) if rank else ()
    except struct.error as exc:
        raise ValueError("truncated tensor header") from exc
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
