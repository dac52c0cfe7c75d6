# maxprop/combiners.py
"""
Combiner rules merging a block's body output f(x) with its skip input x.

    Addition       f + x
    Maximum        max(f, x), ties take f
    LeakyMax       alpha * max(f, x) + beta * min(f, x)
    Concatenation  channel halves: [f1 + x1, max(f2, x2)]

LeakyMax(1, 1) reproduces Addition and LeakyMax(1, 0) reproduces Maximum,
bit for bit, in both directions.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import CombinerError, ShapeMismatchError
from .tensor import Tensor, apply_op

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.9
DEFAULT_BETA = 0.1


class CombinerType(str, Enum):
    ADDITION = "addition"
    MAXIMUM = "maximum"
    LEAKY_MAX = "leaky_max"
    CONCATENATION = "concatenation"


class MaxBackward(str, Enum):
    MAX_ONLY = "max_only"  # error goes to the larger input only
    SHARED = "shared"      # both inputs receive the full error


_SHORT_CODES = {
    CombinerType.ADDITION: "A",
    CombinerType.MAXIMUM: "M",
    CombinerType.LEAKY_MAX: "LM",
    CombinerType.CONCATENATION: "C",
}


@dataclass(frozen=True)
class CombinerKind:
    """
    A combiner rule with its parameters.

    alpha/beta are only meaningful for LeakyMax (defaults 0.9 / 0.1); max_backward
    selects the backward rule of the maximum, including the max half of Concatenation.
    """
    kind: CombinerType = CombinerType.ADDITION
    alpha: Optional[float] = None
    beta: Optional[float] = None
    max_backward: MaxBackward = MaxBackward.MAX_ONLY

    def __post_init__(self):
        object.__setattr__(self, "kind", CombinerType(self.kind))
        object.__setattr__(self, "max_backward", MaxBackward(self.max_backward))
        if self.kind != CombinerType.LEAKY_MAX:
            if self.alpha is not None or self.beta is not None:
                raise CombinerError(f"alpha/beta are only valid for leaky_max, not {self.kind.value}")
            return
        alpha = DEFAULT_ALPHA if self.alpha is None else float(self.alpha)
        beta = DEFAULT_BETA if self.beta is None else float(self.beta)
        if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
            raise CombinerError(f"leaky_max needs alpha >= 0, beta >= 0 and not both zero, got alpha={alpha}, beta={beta}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def addition(cls) -> "CombinerKind":
        return cls(CombinerType.ADDITION)

    @classmethod
    def maximum(cls, max_backward: MaxBackward = MaxBackward.MAX_ONLY) -> "CombinerKind":
        return cls(CombinerType.MAXIMUM, max_backward=max_backward)

    @classmethod
    def leaky_max(cls, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> "CombinerKind":
        return cls(CombinerType.LEAKY_MAX, alpha=alpha, beta=beta)

    @classmethod
    def concatenation(cls, max_backward: MaxBackward = MaxBackward.MAX_ONLY) -> "CombinerKind":
        return cls(CombinerType.CONCATENATION, max_backward=max_backward)

    @property
    def code(self) -> str:
        """Short label used in ensemble mixes (A, M, LM, C)."""
        return _SHORT_CODES[self.kind]

    def describe(self) -> str:
        if self.kind == CombinerType.LEAKY_MAX:
            return f"leaky_max(alpha={self.alpha}, beta={self.beta})"
        if self.kind in (CombinerType.MAXIMUM, CombinerType.CONCATENATION):
            return f"{self.kind.value}[{self.max_backward.value}]"
        return self.kind.value


def _check_operands(kind: CombinerKind, f_out: np.ndarray, skip: np.ndarray) -> None:
    if f_out.shape != skip.shape:
        raise ShapeMismatchError(f"combine {kind.kind.value}: f(x) shape {f_out.shape} and skip shape {skip.shape} differ")
    if kind.kind == CombinerType.CONCATENATION and (f_out.ndim < 2 or f_out.shape[1] % 2):
        raise ShapeMismatchError(f"concatenation needs an even channel axis, got shape {f_out.shape}")


def _half(channels: int) -> Tuple[slice, slice]:
    return slice(0, channels // 2), slice(channels // 2, channels)


def combine_forward(kind: CombinerKind, f_out: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """Forward value of ``kind`` on raw arrays."""
    _check_operands(kind, f_out, skip)
    if kind.kind == CombinerType.ADDITION:
        return f_out + skip
    if kind.kind == CombinerType.MAXIMUM:
        return np.where(f_out >= skip, f_out, skip)
    if kind.kind == CombinerType.LEAKY_MAX:
        f_wins = f_out >= skip
        high = np.where(f_wins, f_out, skip)
        low = np.where(f_wins, skip, f_out)
        dtype = f_out.dtype.type
        return dtype(kind.alpha) * high + dtype(kind.beta) * low
    add_half, max_half = _half(f_out.shape[1])
    return np.concatenate(
        [
            f_out[:, add_half] + skip[:, add_half],
            np.where(f_out[:, max_half] >= skip[:, max_half], f_out[:, max_half], skip[:, max_half]),
        ],
        axis=1,
    )


def _max_grads(mode: MaxBackward, grad: np.ndarray, f_out: np.ndarray, skip: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if mode == MaxBackward.SHARED:
        return grad, grad
    f_wins = f_out >= skip
    zero = np.zeros_like(grad)
    return np.where(f_wins, grad, zero), np.where(f_wins, zero, grad)


def combine_backward(
    kind: CombinerKind, upstream_grad: np.ndarray, f_out: np.ndarray, skip: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Splits ``upstream_grad`` between the body output and the skip input.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (grad_f, grad_skip).
    """
    _check_operands(kind, f_out, skip)
    if upstream_grad.shape != f_out.shape:
        raise ShapeMismatchError(f"combine_backward: gradient shape {upstream_grad.shape} vs operand shape {f_out.shape}")
    if kind.kind == CombinerType.ADDITION:
        return upstream_grad, upstream_grad
    if kind.kind == CombinerType.MAXIMUM:
        return _max_grads(kind.max_backward, upstream_grad, f_out, skip)
    if kind.kind == CombinerType.LEAKY_MAX:
        f_wins = f_out >= skip
        dtype = upstream_grad.dtype.type
        to_high = dtype(kind.alpha) * upstream_grad
        to_low = dtype(kind.beta) * upstream_grad
        return np.where(f_wins, to_high, to_low), np.where(f_wins, to_low, to_high)
    add_half, max_half = _half(f_out.shape[1])
    grad_f = np.empty_like(upstream_grad)
    grad_skip = np.empty_like(upstream_grad)
    grad_f[:, add_half] = upstream_grad[:, add_half]
    grad_skip[:, add_half] = upstream_grad[:, add_half]
    grad_f[:, max_half], grad_skip[:, max_half] = _max_grads(
        kind.max_backward, upstream_grad[:, max_half], f_out[:, max_half], skip[:, max_half]
    )
    return grad_f, grad_skip


def combine(kind: CombinerKind, f_out: Tensor, skip: Tensor) -> Tensor:
    """Differentiable combiner; ``f_out`` is always the first operand so ties favour the body."""
    output = combine_forward(kind, f_out.data, skip.data)

    def backward(grad, saved):
        return combine_backward(kind, grad, saved[0], saved[1])

    return apply_op(f"combine_{kind.kind.value}", (f_out, skip), output, backward, (f_out.data, skip.data))
