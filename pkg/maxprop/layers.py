# maxprop/layers.py
"""
Layer vocabulary: parameters and modules, convolution, batch normalization
(learned, frozen or absent), ReLU, global average pooling, the dense
classifier, and the two losses.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ShapeMismatchError, WeightsMismatchError
from .tensor import (
    Rng,
    Tape,
    Tensor,
    add,
    apply_op,
    broadcast_to,
    conv2d,
    matmul,
    reshape,
    transpose,
)

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class Phase(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class BnMode(str, Enum):
    LEARNED = "learned"
    FROZEN = "frozen"
    OFF = "off"


class Parameter:
    """Named array held by a module; optimizers replace ``value`` rather than mutating it."""

    def __init__(self, value: np.ndarray, trainable: bool = True):
        self.value = value
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter(shape={self.value.shape}, trainable={self.trainable})"


class ForwardContext:
    """
    Per-pass state: the tape to record on, the phase, and the tensors bound to
    each parameter during this pass.

    Args:
        tape (Optional[Tape]): Tape to record on; None runs an unrecorded pass.
        phase (Phase): Train or eval behaviour for batch normalization.
        update_stats (bool): Whether train-phase BN updates its running statistics.
        overrides (Optional[Dict[int, Tensor]]): Tensors to use instead of selected
            parameters, keyed by ``id(parameter)``.
    """

    def __init__(
        self,
        tape: Optional[Tape] = None,
        phase: Phase = Phase.TRAIN,
        update_stats: bool = True,
        overrides: Optional[Dict[int, Tensor]] = None,
    ):
        self.tape = tape
        self.phase = Phase(phase)
        self.update_stats = update_stats
        self._bound: Dict[int, Tensor] = dict(overrides or {})

    def bind(self, parameter: Parameter) -> Tensor:
        key = id(parameter)
        tensor = self._bound.get(key)
        if tensor is None:
            if self.tape is not None and parameter.trainable:
                tensor = self.tape.watch(parameter.value, "param")
            else:
                tensor = Tensor._wrap(parameter.value)
            self._bound[key] = tensor
        return tensor

    def gradients(self, named: Dict[str, Parameter]) -> Dict[str, np.ndarray]:
        """Gradients of the last backward pass for each of ``named`` (zeros if unused)."""
        grads = {}
        for name, parameter in named.items():
            tensor = self._bound.get(id(parameter))
            if tensor is None or tensor.tape is None:
                grads[name] = np.zeros_like(parameter.value)
            else:
                grads[name] = tensor.tape.grad(tensor)
        return grads


class Module:
    """Container of parameters, buffers and child modules with hierarchical names."""

    def __init__(self):
        self._parameters: Dict[str, Parameter] = {}
        self._modules: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        parameter = Parameter(value, trainable)
        self._parameters[name] = parameter
        return parameter

    def add_module(self, name: str, module: Optional["Module"]) -> Optional["Module"]:
        if module is not None:
            self._modules[name] = module
        return module

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def named_parameters(self, prefix: str = "", trainable_only: bool = True) -> Dict[str, Parameter]:
        named = {}
        for name, parameter in self._parameters.items():
            if parameter.trainable or not trainable_only:
                named[prefix + name] = parameter
        for name, module in self._modules.items():
            named.update(module.named_parameters(f"{prefix}{name}.", trainable_only))
        return named

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        named = {prefix + name: value for name, value in self.buffers().items()}
        for name, module in self._modules.items():
            named.update(module.named_buffers(f"{prefix}{name}."))
        return named

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        """Count of learnable scalars."""
        return int(sum(parameter.value.size for parameter in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters(trainable_only=False).items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Strictly loads parameters and buffers; names and shapes must match exactly."""
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise WeightsMismatchError(
                f"Weights do not match the model: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected {unexpected[:5]}{'...' if len(unexpected) > 5 else ''}"
            )
        for name, value in state.items():
            if tuple(value.shape) != tuple(expected[name].shape):
                raise WeightsMismatchError(
                    f"Shape mismatch for '{name}': model has {tuple(expected[name].shape)}, weights have {tuple(value.shape)}"
                )
        parameters = self.named_parameters(trainable_only=False)
        for name, value in state.items():
            array = np.array(value, dtype=expected[name].dtype)
            if name in parameters:
                parameters[name].value = array
            else:
                self._load_named_buffer(name, array)

    def _load_named_buffer(self, name: str, value: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        if rest and head in self._modules:
            self._modules[head]._load_named_buffer(rest, value)
        else:
            self.load_buffer(name, value)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self.forward(x, ctx)


def he_normal(shape: Sequence[int], fan_in: int, rng: Rng, dtype) -> np.ndarray:
    return rng.normal(tuple(shape), scale=float(np.sqrt(2.0 / fan_in)), dtype=dtype)


# --- batch normalization ---

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    mode: BnMode = BnMode.LEARNED
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def create(cls, channels: int, mode: BnMode = BnMode.LEARNED, dtype=np.float32) -> "BatchNormState":
        mode = BnMode(mode)
        if mode == BnMode.OFF:
            raise ValueError("BatchNormState is not created for BN mode 'off'")
        trainable = mode == BnMode.LEARNED
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), trainable),
            beta=Parameter(np.zeros(channels, dtype=dtype), trainable),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            mode=mode,
        )

    @property
    def channels(self) -> int:
        return int(self.running_mean.shape[0])


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    phase: Phase,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    update_stats: bool = True,
) -> Tensor:
    """
    Batch normalization over the N, H, W axes of an NCHW tensor.

    Frozen mode in any phase computes x / sqrt(1 + epsilon): the layer keeps
    mean 0, variance 1, scale 1 and shift 0 and never updates.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeMismatchError(f"batch_norm: input shape {x.shape} does not have {state.channels} channels")
    dtype = x.dtype
    eps = dtype.type(state.epsilon)

    if state.mode == BnMode.FROZEN:
        inv = dtype.type(1.0) / np.sqrt(dtype.type(1.0) + eps)
        return apply_op("batch_norm_frozen", (x,), x.data * inv, lambda grad, saved: (grad * inv,))

    gamma = gamma if gamma is not None else Tensor._wrap(state.gamma.value)
    beta = beta if beta is not None else Tensor._wrap(state.beta.value)
    g = gamma.data.reshape(1, -1, 1, 1)
    b = beta.data.reshape(1, -1, 1, 1)

    if Phase(phase) == Phase.TRAIN:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = dtype.type(1.0) / np.sqrt(var + eps)
        x_hat = centered * inv_std
        if update_stats:
            momentum = dtype.type(state.momentum)
            unbiased = var.reshape(-1) * dtype.type(count / max(count - 1, 1))
            state.running_mean = (momentum * state.running_mean + (1 - momentum) * mean.reshape(-1)).astype(dtype)
            state.running_var = (momentum * state.running_var + (1 - momentum) * unbiased).astype(dtype)

        def backward(grad, saved):
            x_hat_s, inv_std_s, g_s = saved
            grad_hat = grad * g_s
            sum_hat = grad_hat.sum(axis=(0, 2, 3), keepdims=True)
            sum_hat_x = (grad_hat * x_hat_s).sum(axis=(0, 2, 3), keepdims=True)
            grad_x = inv_std_s / count * (count * grad_hat - sum_hat - x_hat_s * sum_hat_x)
            return grad_x, (grad * x_hat_s).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))

        return apply_op("batch_norm_train", (x, gamma, beta), g * x_hat + b, backward, (x_hat, inv_std, g))

    inv_std = (dtype.type(1.0) / np.sqrt(state.running_var + eps)).reshape(1, -1, 1, 1)
    x_hat = (x.data - state.running_mean.reshape(1, -1, 1, 1)) * inv_std

    def backward_eval(grad, saved):
        x_hat_s, inv_std_s, g_s = saved
        return grad * g_s * inv_std_s, (grad * x_hat_s).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))

    return apply_op("batch_norm_eval", (x, gamma, beta), g * x_hat + b, backward_eval, (x_hat, inv_std, g))


# --- activations, pooling, losses ---

def relu(x: Tensor) -> Tensor:
    """max(x, 0); the gradient is zero at exactly 0."""
    return apply_op("relu", (x,), np.maximum(x.data, 0), lambda grad, saved: (grad * (saved[0] > 0),), (x.data,))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def backward(grad, saved):
        return (np.broadcast_to((grad * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return apply_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, classes = logits.shape
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"Labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    loss = np.mean(logsumexp(logits.data, axis=1) - logits.data[rows, labels])

    def backward(grad, saved):
        probs = softmax(saved[0], axis=1)
        probs[rows, labels] -= 1
        return ((probs * (grad / n)).astype(saved[0].dtype),)

    return apply_op("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward, (logits.data,))


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at equality is 0."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mae_loss: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data

    def backward(grad, saved):
        direction = np.sign(saved[0]) * (grad / saved[0].size)
        return direction, -direction

    return apply_op("mae_loss", (pred, target), np.asarray(np.abs(diff).mean(), dtype=pred.dtype), backward, (diff,))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x · weightᵀ + bias for x of shape N x in, weight out x in, bias out."""
    n = x.shape[0]
    out = weight.shape[0]
    return add(matmul(x, transpose(weight)), broadcast_to(reshape(bias, (1, out)), (n, out)))


# --- modules ---

class Conv2d(Module):
    """Bias-free square convolution with 'same' padding for odd kernels."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = self.add_parameter(
            "weight", he_normal((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng, dtype)
        )

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return conv2d(x, ctx.bind(self.weight), stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, mode: BnMode, dtype=np.float32):
        super().__init__()
        self.state = BatchNormState.create(channels, mode, dtype)
        self._parameters["gamma"] = self.state.gamma
        self._parameters["beta"] = self.state.beta

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, name, value)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if self.state.mode == BnMode.FROZEN:
            return batch_norm(x, self.state, ctx.phase)
        return batch_norm(
            x,
            self.state,
            ctx.phase,
            gamma=ctx.bind(self.state.gamma),
            beta=ctx.bind(self.state.beta),
            update_stats=ctx.update_stats,
        )


def make_batch_norm(channels: int, mode: BnMode, dtype=np.float32) -> Optional[BatchNorm2d]:
    """BN layer for ``mode``, or None when normalization is switched off."""
    if BnMode(mode) == BnMode.OFF:
        return None
    return BatchNorm2d(channels, BnMode(mode), dtype)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.weight = self.add_parameter("weight", he_normal((out_features, in_features), in_features, rng, dtype))
        self.bias = self.add_parameter("bias", np.zeros(out_features, dtype=dtype))

    @property
    def out_features(self) -> int:
        return int(self.weight.value.shape[0])

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return dense(x, ctx.bind(self.weight), ctx.bind(self.bias))
