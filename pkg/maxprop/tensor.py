# maxprop/tensor.py
"""
Dense tensors, the reverse-mode gradient tape, and the seeded random source.

Every differentiable operation in the package is written against this module:
an op computes its forward value with numpy and, when any operand is bound to
a Tape, appends a node holding the input node ids, the forward values the
backward rule needs, and the rule itself. ``Tape.backward`` walks the nodes in
reverse creation order, which is a valid topological order because a node can
only reference nodes that existed when it was recorded.
"""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError, TapeError

logger = logging.getLogger(__name__)

PRECISIONS: Dict[str, Any] = {"single": np.float32, "double": np.float64}

BackwardFn = Callable[[np.ndarray, Tuple[Any, ...]], Sequence[Optional[np.ndarray]]]


def resolve_dtype(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"Unknown precision '{precision}', expected one of {sorted(PRECISIONS)}") from None


class Tensor:
    """
    Immutable dense array, optionally bound to a node of a Tape.

    The buffer is stored read-only; operations always allocate new tensors.
    """
    __slots__ = ("data", "tape", "node")

    def __init__(self, data: Any, dtype: Any = None):
        array = np.array(data, dtype=dtype, copy=True)
        if array.dtype.kind in "iub":
            array = array.astype(np.float64)
        self._bind(array, None, None)

    @classmethod
    def _wrap(cls, array: np.ndarray, tape: Optional["Tape"] = None, node: Optional[int] = None) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._bind(np.asarray(array), tape, node)
        return tensor

    def _bind(self, array: np.ndarray, tape: Optional["Tape"], node: Optional[int]) -> None:
        if any(extent < 1 for extent in array.shape):
            raise ShapeMismatchError(f"Tensor extents must be >= 1, got shape {array.shape}")
        if array.flags.writeable:
            array = array.view()
            array.setflags(write=False)
        self.data = array
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
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
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __getitem__(self, index):
        # Plain read access; not recorded on the tape.
        return self.data[index]

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("mul", self, other)

    def __repr__(self) -> str:
        bound = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{bound})"


@dataclass(frozen=True)
class TapeNode:
    op: str
    inputs: Tuple[int, ...]
    shape: Tuple[int, ...]
    saved: Tuple[Any, ...]
    backward: Optional[BackwardFn]


class Tape:
    """
    Append-only record of a forward computation.

    A tape is single-writer: record and backward must not run concurrently.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value: Union[Tensor, np.ndarray], name: str = "leaf") -> Tensor:
        """Registers ``value`` as a leaf whose gradient should be collected."""
        array = value.data if isinstance(value, Tensor) else np.asarray(value)
        node_id = self._append(TapeNode(op=f"leaf:{name}", inputs=(), shape=array.shape, saved=(), backward=None))
        return Tensor._wrap(array, self, node_id)

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: np.ndarray,
        backward: BackwardFn,
        saved: Tuple[Any, ...] = (),
    ) -> Tensor:
        """Appends an op node whose inputs are the tape-bound tensors among ``inputs``."""
        input_ids = []
        for tensor in inputs:
            if tensor.tape is None:
                input_ids.append(-1)
            elif tensor.tape is self:
                input_ids.append(tensor.node)
            else:
                raise TapeError(f"Operation '{op}' mixes tensors from different tapes")
        node_id = self._append(TapeNode(op=op, inputs=tuple(input_ids), shape=output.shape, saved=saved, backward=backward))
        return Tensor._wrap(output, self, node_id)

    def _append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagates d(loss)/d(node) to every node reachable from ``loss``.

        Args:
            loss (Tensor): Scalar-shaped tensor recorded on this tape.

        Returns:
            Dict[int, np.ndarray]: Gradient per node id, same shape as the node value.
        """
        if loss.tape is not self:
            raise TapeError("Loss tensor is not recorded on this tape")
        if loss.shape != ():
            raise TapeError(f"Loss must be scalar-shaped, got shape {loss.shape}")

        gradients: Dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.dtype)}
        for node_id in range(loss.node, -1, -1):
            grad = gradients.get(node_id)
            node = self.nodes[node_id]
            if grad is None or node.backward is None:
                continue
            input_grads = node.backward(grad, node.saved)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id < 0 or input_grad is None:
                    continue
                if input_id in gradients:
                    gradients[input_id] = gradients[input_id] + input_grad
                else:
                    gradients[input_id] = input_grad
        self.gradients = gradients
        logger.debug(f"Backward pass over {loss.node + 1} nodes, {len(gradients)} gradients populated")
        return gradients

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``tensor`` (zeros if unreachable)."""
        if tensor.tape is not self:
            raise TapeError("Tensor is not recorded on this tape")
        grad = self.gradients.get(tensor.node)
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        return grad


class Rng:
    """
    Seeded, counter-based random source (Philox), splittable into independent streams.

    Identical seeds give identical draws on every platform numpy supports.
    """

    def __init__(self, seed: int, _sequence: Optional[np.random.SeedSequence] = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._sequence = _sequence if _sequence is not None else np.random.SeedSequence(self.seed)
        self._generator = np.random.Generator(np.random.Philox(self._sequence))

    def fork(self, key: int) -> "Rng":
        """Derives a child stream identified by ``key``; independent of draws made so far."""
        child = np.random.SeedSequence(self._sequence.entropy, spawn_key=self._sequence.spawn_key + (int(key),))
        return Rng(self.seed, _sequence=child)

    def spawn(self, count: int) -> List["Rng"]:
        return [self.fork(key) for key in range(count)]

    def normal(self, shape: Tuple[int, ...], scale: float = 1.0, dtype: Any = np.float64) -> np.ndarray:
        draws = self._generator.standard_normal(size=shape, dtype=np.float64)
        return (draws * scale).astype(dtype)

    def uniform(self, low: float, high: float, shape: Tuple[int, ...], dtype: Any = np.float64) -> np.ndarray:
        return self._generator.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, size: Optional[Union[int, Tuple[int, ...]]] = None) -> Union[int, np.ndarray]:
        """Integers in ``[low, high]`` inclusive."""
        return self._generator.integers(low, high, size=size, endpoint=True)

    def random(self, size: Optional[Union[int, Tuple[int, ...]]] = None) -> Union[float, np.ndarray]:
        return self._generator.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


def _active_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise TapeError("Operands are recorded on different tapes")
    return tape


def apply_op(
    op: str,
    inputs: Sequence[Tensor],
    output: np.ndarray,
    backward: BackwardFn,
    saved: Tuple[Any, ...] = (),
) -> Tensor:
    """Wraps ``output`` and records it when any input is tape-bound."""
    tape = _active_tape(*inputs)
    if tape is None:
        return Tensor._wrap(output)
    return tape.record(op, inputs, output, backward, saved)


# --- elementwise ---

def _add_backward(grad, saved):
    return grad, grad


def _sub_backward(grad, saved):
    return grad, -grad


def _mul_backward(grad, saved):
    a, b = saved
    return grad * b, grad * a


def _max_backward(grad, saved):
    # Tie routes to the first operand.
    (first_wins,) = saved
    zero = np.zeros_like(grad)
    return np.where(first_wins, grad, zero), np.where(first_wins, zero, grad)


_ELEMENTWISE: Dict[str, Tuple[Callable, Callable, Callable]] = {
    "add": (np.add, _add_backward, lambda a, b: ()),
    "sub": (np.subtract, _sub_backward, lambda a, b: ()),
    "mul": (np.multiply, _mul_backward, lambda a, b: (a, b)),
    "max": (np.maximum, _max_backward, lambda a, b: (a >= b,)),
    # Ties route to the second operand so max and min split a tie between both inputs.
    "min": (np.minimum, _max_backward, lambda a, b: (a < b,)),
}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """
    Applies ``op`` in {add, sub, mul, max, min} element by element.

    Raises:
        ShapeMismatchError: If ``a`` and ``b`` differ in shape.
    """
    if op not in _ELEMENTWISE:
        raise ValueError(f"Unsupported elementwise op '{op}', expected one of {sorted(_ELEMENTWISE)}")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"elementwise {op}: operand shapes {a.shape} and {b.shape} differ")
    forward, backward, save = _ELEMENTWISE[op]
    return apply_op(op, (a, b), forward(a.data, b.data), backward, save(a.data, b.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("max", a, b)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("min", a, b)


def scale(t: Tensor, factor: float) -> Tensor:
    factor = t.dtype.type(factor)
    return apply_op("scale", (t,), t.data * factor, lambda grad, saved: (grad * factor,))


# --- linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(grad, saved):
        left, right = saved
        return grad @ right.T, left.T @ grad

    return apply_op("matmul", (a, b), a.data @ b.data, backward, (a.data, b.data))


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a 2-D tensor, got shape {t.shape}")
    return apply_op("transpose", (t,), np.ascontiguousarray(t.data.T), lambda grad, saved: (grad.T,))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-D cross-correlation with zero padding.

    Args:
        x (Tensor): Input in NCHW layout.
        kernel (Tensor): Weights in OIHW layout; I must equal the input channels.
        stride (int): Step between output positions, >= 1.
        pad (int): Zero padding added to each spatial border, >= 0.

    Returns:
        Tensor: N x O x Ho x Wo with Ho = floor((H + 2*pad - kH) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, channels, height, width = x.shape
    out_channels, in_channels, k_h, k_w = kernel.shape
    if channels != in_channels:
        raise ShapeMismatchError(f"conv2d channel mismatch: input has {channels}, kernel expects {in_channels}")
    if k_h > height + 2 * pad or k_w > width + 2 * pad:
        raise ShapeMismatchError(
            f"conv2d kernel {k_h}x{k_w} larger than padded input {height + 2 * pad}x{width + 2 * pad}"
        )

    out_h = (height + 2 * pad - k_h) // stride + 1
    out_w = (width + 2 * pad - k_w) // stride + 1
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    dtype = np.result_type(x.dtype, kernel.dtype)

    def window(i: int, j: int) -> Tuple[slice, slice, slice, slice]:
        return (
            slice(None),
            slice(None),
            slice(i, i + stride * (out_h - 1) + 1, stride),
            slice(j, j + stride * (out_w - 1) + 1, stride),
        )

    acc = np.zeros((n, out_h, out_w, out_channels), dtype=dtype)
    for i in range(k_h):
        for j in range(k_w):
            acc += np.tensordot(padded[window(i, j)], kernel.data[:, :, i, j], axes=([1], [1]))
    output = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def backward(grad, saved):
        padded_in, weights = saved
        grad_nhwo = grad.transpose(0, 2, 3, 1)
        grad_kernel = np.zeros_like(weights)
        grad_padded = np.zeros_like(padded_in)
        for i in range(k_h):
            for j in range(k_w):
                region = window(i, j)
                grad_kernel[:, :, i, j] = np.tensordot(grad, padded_in[region], axes=([0, 2, 3], [0, 2, 3]))
                grad_padded[region] += np.tensordot(grad_nhwo, weights[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        grad_input = grad_padded[:, :, pad:pad + height, pad:pad + width] if pad else grad_padded
        return grad_input, grad_kernel

    return apply_op("conv2d", (x, kernel), output, backward, (padded, kernel.data))


# --- reductions and reshaping ---

def _normalize_axes(axes: Optional[Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ValueError(f"Axis {axis} out of range for a tensor of rank {ndim}")
        normalized.append(axis % ndim)
    if len(set(normalized)) != len(normalized):
        raise ValueError(f"Repeated axes in {list(axes)}")
    return tuple(sorted(normalized))


def reduce(op: str, t: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """
    Reduces ``t`` over ``axes`` with op in {sum, mean, max}.

    ``axes=None`` reduces everything to a scalar; an empty axis list returns ``t``.
    Max routes the gradient to the first maximal element.
    """
    if op not in ("sum", "mean", "max"):
        raise ValueError(f"Unsupported reduction '{op}'")
    axes = _normalize_axes(axes, t.ndim)
    if not axes:
        return t
    kept_shape = tuple(1 if axis in axes else extent for axis, extent in enumerate(t.shape))
    count = int(np.prod([t.shape[axis] for axis in axes]))

    if op == "sum":
        output = np.sum(t.data, axis=axes)
        return apply_op("sum", (t,), np.asarray(output), lambda grad, saved: (np.broadcast_to(grad.reshape(kept_shape), t.shape).copy(),))

    if op == "mean":
        output = np.mean(t.data, axis=axes)
        inv = t.dtype.type(1.0 / count)
        return apply_op("mean", (t,), np.asarray(output), lambda grad, saved: (np.broadcast_to(grad.reshape(kept_shape) * inv, t.shape).copy(),))

    destination = list(range(t.ndim - len(axes), t.ndim))
    moved = np.moveaxis(t.data, axes, destination)
    flat = moved.reshape(moved.shape[:t.ndim - len(axes)] + (-1,))
    winner = flat.argmax(axis=-1)[..., None]
    output = np.take_along_axis(flat, winner, axis=-1)[..., 0]

    def backward(grad, saved):
        grad_flat = np.zeros(flat.shape, dtype=grad.dtype)
        np.put_along_axis(grad_flat, winner, np.asarray(grad)[..., None], axis=-1)
        return (np.moveaxis(grad_flat.reshape(moved.shape), destination, axes),)

    return apply_op("max_reduce", (t,), np.asarray(output), backward)


def reshape(t: Tensor, shape: Tuple[int, ...]) -> Tensor:
    output = t.data.reshape(shape)
    return apply_op("reshape", (t,), output, lambda grad, saved: (grad.reshape(t.shape),))


def broadcast_to(t: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Broadcasts ``t`` (same rank, size-1 axes expanded) to ``shape``."""
    if t.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(t.shape, shape)):
        raise ShapeMismatchError(f"Cannot broadcast shape {t.shape} to {shape}")
    expanded = tuple(axis for axis, (a, b) in enumerate(zip(t.shape, shape)) if a != b)
    output = np.broadcast_to(t.data, shape).copy()
    return apply_op("broadcast", (t,), output, lambda grad, saved: (np.sum(grad, axis=expanded, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.ndim != len(reference) or any(
            a != b for dim, (a, b) in enumerate(zip(tensor.shape, reference)) if dim != axis % len(reference)
        ):
            raise ShapeMismatchError(f"concat along axis {axis}: shapes {reference} and {tensor.shape} disagree")
    bounds = np.cumsum([0] + [tensor.shape[axis] for tensor in tensors])
    output = np.concatenate([tensor.data for tensor in tensors], axis=axis)

    def backward(grad, saved):
        return tuple(
            np.take(grad, np.arange(start, stop), axis=axis) for start, stop in zip(bounds[:-1], bounds[1:])
        )

    return apply_op("concat", tuple(tensors), output, backward)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Keeps indices ``[start, stop)`` of ``axis``."""
    if not 0 <= start < stop <= t.shape[axis]:
        raise ShapeMismatchError(f"Slice [{start}, {stop}) out of range for axis {axis} of shape {t.shape}")
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    output = t.data[index].copy()

    def backward(grad, saved):
        full = np.zeros(t.shape, dtype=grad.dtype)
        full[index] = grad
        return (full,)

    return apply_op("slice", (t,), output, backward)
