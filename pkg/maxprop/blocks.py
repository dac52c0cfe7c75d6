# maxprop/blocks.py
"""
Declarative block, network and jointly-trained-ensemble (JTE) descriptions and
the builders that turn them into modules.

A block is ``combine(body(x), shortcut(x))`` followed by ReLU when activations
are on. Bodies are two 3x3 convolutions, a 1x1-3x3-1x1 bottleneck, or a single
3x3 convolution for activation-free networks. Every convolution is followed by
BN in the block's BN mode. A 1x1 strided projection (plus BN) sits on the skip
path whenever stride or width changes, for every combiner kind.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .combiners import CombinerKind, CombinerType, MaxBackward, combine
from .errors import SpecError
from .layers import BnMode, Conv2d, Dense, ForwardContext, Module, Parameter, make_batch_norm, relu, global_avg_pool
from .tensor import Rng, Tensor, concat, resolve_dtype

logger = logging.getLogger(__name__)

BOTTLENECK_EXPANSION = 4


class Activation(str, Enum):
    RELU = "relu"
    NONE = "none"


class BodyType(str, Enum):
    TWO_CONV = "two_conv3x3"
    SINGLE_CONV = "single_conv3x3"
    BOTTLENECK = "bottleneck"


class Schedule(str, Enum):
    UNIFORM = "uniform"
    ALTERNATING = "alternating"


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    combiner: CombinerKind = field(default_factory=CombinerKind.addition)
    activation: Activation = Activation.RELU
    bn_mode: BnMode = BnMode.LEARNED
    body: BodyType = BodyType.TWO_CONV

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "bn_mode", BnMode(self.bn_mode))
        object.__setattr__(self, "body", BodyType(self.body))
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError(f"Block channels must be positive, got {self.in_channels} -> {self.out_channels}")
        if self.stride not in (1, 2):
            raise SpecError(f"Block stride must be 1 or 2, got {self.stride}")
        if self.activation == Activation.NONE and self.body != BodyType.SINGLE_CONV:
            raise SpecError(f"Activation-free blocks need a single_conv3x3 body, got {self.body.value}")
        if self.body == BodyType.BOTTLENECK and self.out_channels % BOTTLENECK_EXPANSION:
            raise SpecError(f"Bottleneck output width must be a multiple of {BOTTLENECK_EXPANSION}, got {self.out_channels}")
        if self.combiner.kind == CombinerType.CONCATENATION and self.out_channels % 2:
            raise SpecError(f"Concatenation blocks need an even output width, got {self.out_channels}")

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    def following(self) -> "BlockSpec":
        """Spec of the blocks after the first one in a stage."""
        return replace(self, in_channels=self.out_channels, stride=1)


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    block: BlockSpec  # first block of the stage

    def __post_init__(self):
        if self.blocks < 1:
            raise SpecError(f"A stage needs at least one block, got {self.blocks}")


# name -> (stem width, ((blocks, width), ...), body)
PRESETS: Dict[str, Tuple[int, Tuple[Tuple[int, int], ...], BodyType]] = {
    "resnet34": (64, ((3, 64), (4, 128), (6, 256), (3, 512)), BodyType.TWO_CONV),
    "resnet50": (64, ((3, 256), (4, 512), (6, 1024), (3, 2048)), BodyType.BOTTLENECK),
    "small": (16, ((2, 16), (2, 32), (2, 64)), BodyType.TWO_CONV),
    "tiny": (4, ((1, 4), (1, 8)), BodyType.TWO_CONV),
    "deep14": (8, ((5, 8), (5, 16), (4, 32)), BodyType.TWO_CONV),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Stem convolution, stages of blocks, global average pooling and a dense classifier."""
    in_channels: int
    stem_channels: int
    stages: Tuple[StageSpec, ...]
    num_classes: int
    schedule: Schedule = Schedule.UNIFORM
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        if not self.stages:
            raise SpecError("A network needs at least one stage")
        if self.in_channels < 1 or self.stem_channels < 1 or self.num_classes < 1:
            raise SpecError(
                f"Invalid network sizes: in={self.in_channels}, stem={self.stem_channels}, classes={self.num_classes}"
            )
        width = self.stem_channels
        for index, stage in enumerate(self.stages):
            if stage.block.in_channels != width:
                raise SpecError(
                    f"Stage {index} expects {stage.block.in_channels} input channels but receives {width}"
                )
            width = stage.block.out_channels
        first = self.stages[0].block
        for stage in self.stages[1:]:
            if (stage.block.activation, stage.block.bn_mode) != (first.activation, first.bn_mode):
                raise SpecError("All stages must share the activation and BN mode")

    @property
    def activation(self) -> Activation:
        return self.stages[0].block.activation

    @property
    def bn_mode(self) -> BnMode:
        return self.stages[0].block.bn_mode

    @property
    def combiner(self) -> CombinerKind:
        return self.stages[0].block.combiner

    @property
    def feature_width(self) -> int:
        return self.stages[-1].block.out_channels

    @property
    def num_blocks(self) -> int:
        return sum(stage.blocks for stage in self.stages)

    def block_specs(self) -> List[BlockSpec]:
        """Every block in order, with the combiner schedule applied."""
        specs = []
        for stage in self.stages:
            specs.append(stage.block)
            specs.extend(stage.block.following() for _ in range(stage.blocks - 1))
        if self.schedule == Schedule.ALTERNATING:
            mode = self.combiner.max_backward
            specs = [
                replace(spec, combiner=CombinerKind.maximum(mode) if index % 2 == 0 else CombinerKind.addition())
                for index, spec in enumerate(specs)
            ]
        return specs

    def with_combiner(self, combiner: CombinerKind) -> "NetworkSpec":
        stages = tuple(replace(stage, block=replace(stage.block, combiner=combiner)) for stage in self.stages)
        return replace(self, stages=stages)

    def geometry(self) -> "NetworkSpec":
        """This spec with combiner and schedule stripped, for comparing layouts."""
        return replace(self.with_combiner(CombinerKind.addition()), schedule=Schedule.UNIFORM, name="")

    def describe(self) -> str:
        combiner = "alternating" if self.schedule == Schedule.ALTERNATING else self.combiner.describe()
        return f"{self.name}({combiner}, activation={self.activation.value}, bn={self.bn_mode.value})"

    @classmethod
    def preset(
        cls,
        name: str,
        in_channels: int,
        num_classes: int,
        combiner: Optional[CombinerKind] = None,
        activation: Activation = Activation.RELU,
        bn_mode: BnMode = BnMode.LEARNED,
        schedule: Schedule = Schedule.UNIFORM,
    ) -> "NetworkSpec":
        """
        Builds a named architecture.

        Activation-free variants replace every two-convolution block by two
        single-convolution blocks, so the learnable-parameter count is unchanged.
        """
        if name not in PRESETS:
            raise SpecError(f"Unknown network preset '{name}', expected one of {sorted(PRESETS)}")
        stem, layout, body = PRESETS[name]
        activation = Activation(activation)
        repeat = 1
        if activation == Activation.NONE:
            if body != BodyType.TWO_CONV:
                raise SpecError(f"Preset '{name}' has no activation-free variant")
            body, repeat = BodyType.SINGLE_CONV, 2
        combiner = combiner or CombinerKind.addition()
        stages = []
        width = stem
        for index, (blocks, out_width) in enumerate(layout):
            block = BlockSpec(
                in_channels=width,
                out_channels=out_width,
                stride=1 if index == 0 else 2,
                combiner=combiner,
                activation=activation,
                bn_mode=bn_mode,
                body=body,
            )
            stages.append(StageSpec(blocks * repeat, block))
            width = out_width
        return cls(in_channels, stem, tuple(stages), num_classes, schedule=schedule, name=name)


@dataclass(frozen=True)
class JteSpec:
    """Three branches of identical geometry with Addition, Maximum and LeakyMax combiners."""
    branches: Tuple[NetworkSpec, NetworkSpec, NetworkSpec]

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if len(self.branches) != 3:
            raise SpecError(f"A JTE has exactly three branches, got {len(self.branches)}")
        expected = (CombinerType.ADDITION, CombinerType.MAXIMUM, CombinerType.LEAKY_MAX)
        for branch, kind in zip(self.branches, expected):
            if branch.schedule != Schedule.UNIFORM or branch.combiner.kind != kind:
                raise SpecError(f"JTE branch combiners must be addition, maximum, leaky_max in that order")
        reference = self.branches[0].geometry()
        for branch in self.branches[1:]:
            if branch.geometry() != reference:
                raise SpecError("JTE branches must share stage geometry, differing only in combiner")

    @classmethod
    def standard(
        cls,
        base: Optional[NetworkSpec] = None,
        in_channels: int = 3,
        num_classes: int = 10,
        leaky: Optional[CombinerKind] = None,
        max_backward: MaxBackward = MaxBackward.MAX_ONLY,
    ) -> "JteSpec":
        """Default stand-in: three 'small' branches (stem 16, stages 16/32/64 x 2 blocks)."""
        base = base or NetworkSpec.preset("small", in_channels, num_classes)
        return cls((
            base.with_combiner(CombinerKind.addition()),
            base.with_combiner(CombinerKind.maximum(max_backward)),
            base.with_combiner(leaky or CombinerKind.leaky_max()),
        ))

    @property
    def num_classes(self) -> int:
        return self.branches[0].num_classes

    @property
    def in_channels(self) -> int:
        return self.branches[0].in_channels

    @property
    def feature_width(self) -> int:
        return sum(branch.feature_width for branch in self.branches)

    def describe(self) -> str:
        return f"jte[{self.branches[0].name}]"


ModelSpec = Union[NetworkSpec, JteSpec]


class Block(Module):
    def __init__(self, spec: BlockSpec, rng: Rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        if spec.body == BodyType.TWO_CONV:
            layout = [(spec.in_channels, spec.out_channels, 3, spec.stride), (spec.out_channels, spec.out_channels, 3, 1)]
        elif spec.body == BodyType.SINGLE_CONV:
            layout = [(spec.in_channels, spec.out_channels, 3, spec.stride)]
        else:
            width = spec.out_channels // BOTTLENECK_EXPANSION
            layout = [(spec.in_channels, width, 1, 1), (width, width, 3, spec.stride), (width, spec.out_channels, 1, 1)]
        self.body = []
        for index, (c_in, c_out, kernel, stride) in enumerate(layout):
            conv = self.add_module(f"conv{index}", Conv2d(c_in, c_out, kernel, stride, rng, dtype))
            bn = self.add_module(f"bn{index}", make_batch_norm(c_out, spec.bn_mode, dtype))
            self.body.append((conv, bn))
        self.shortcut_conv = None
        self.shortcut_bn = None
        if spec.needs_projection:
            self.shortcut_conv = self.add_module("shortcut_conv", Conv2d(spec.in_channels, spec.out_channels, 1, spec.stride, rng, dtype))
            self.shortcut_bn = self.add_module("shortcut_bn", make_batch_norm(spec.out_channels, spec.bn_mode, dtype))

    def body_parameters(self) -> List[Parameter]:
        return [conv.weight for conv, _ in self.body]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        activated = self.spec.activation == Activation.RELU
        out = x
        last = len(self.body) - 1
        for index, (conv, bn) in enumerate(self.body):
            out = conv(out, ctx)
            if bn is not None:
                out = bn(out, ctx)
            if activated and index < last:
                out = relu(out)
        skip = x
        if self.shortcut_conv is not None:
            skip = self.shortcut_conv(x, ctx)
            if self.shortcut_bn is not None:
                skip = self.shortcut_bn(skip, ctx)
        combined = combine(self.spec.combiner, out, skip)
        return relu(combined) if activated else combined


class Network(Module):
    """Stem -> blocks -> global average pooling -> dense classifier."""

    def __init__(self, spec: NetworkSpec, rng: Rng, dtype=np.float32, with_head: bool = True):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.stem = self.add_module("stem", Conv2d(spec.in_channels, spec.stem_channels, 3, 1, rng, dtype))
        self.stem_bn = self.add_module("stem_bn", make_batch_norm(spec.stem_channels, spec.bn_mode, dtype))
        self.blocks = []
        for index, block_spec in enumerate(spec.block_specs()):
            self.blocks.append(self.add_module(f"block{index}", Block(block_spec, rng, dtype)))
        self.head = self.add_module("head", Dense(spec.feature_width, spec.num_classes, rng, dtype)) if with_head else None

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def stem_output(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        out = self.stem(x, ctx)
        if self.stem_bn is not None:
            out = self.stem_bn(out, ctx)
        return relu(out) if self.spec.activation == Activation.RELU else out

    def features(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        out = self.stem_output(x, ctx)
        for block in self.blocks:
            out = block(out, ctx)
        return global_avg_pool(out)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if self.head is None:
            raise SpecError("This network was built without a classifier head")
        return self.head(self.features(x, ctx), ctx)


class JointEnsemble(Module):
    """Three combiner-distinct branches whose pooled features feed one classifier."""

    def __init__(self, spec: JteSpec, rng: Rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.branches = [
            self.add_module(f"branch_{branch.combiner.code.lower()}", Network(branch, rng, dtype, with_head=False))
            for branch in spec.branches
        ]
        self.head = self.add_module("head", Dense(spec.feature_width, spec.num_classes, rng, dtype))

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def features(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return concat([branch.features(x, ctx) for branch in self.branches], axis=1)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self.head(self.features(x, ctx), ctx)


def build_block(spec: BlockSpec, rng: Optional[Rng] = None, precision: str = "single") -> Block:
    return Block(spec, rng or Rng(0), resolve_dtype(precision))


def build_network(spec: NetworkSpec, rng: Optional[Rng] = None, precision: str = "single") -> Network:
    network = Network(spec, rng or Rng(0), resolve_dtype(precision))
    logger.info(f"Built network {spec.describe()}: {spec.num_blocks} blocks, {network.num_parameters()} parameters")
    return network


def build_jte(spec: JteSpec, rng: Optional[Rng] = None, precision: str = "single") -> JointEnsemble:
    model = JointEnsemble(spec, rng or Rng(0), resolve_dtype(precision))
    logger.info(f"Built {spec.describe()}: feature width {spec.feature_width}, {model.num_parameters()} parameters")
    return model


def build_model(spec: ModelSpec, rng: Optional[Rng] = None, precision: str = "single") -> Module:
    if isinstance(spec, JteSpec):
        return build_jte(spec, rng, precision)
    return build_network(spec, rng, precision)
