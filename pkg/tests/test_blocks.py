import numpy as np
import pytest

from maxprop.blocks import (
    Activation,
    BlockSpec,
    BodyType,
    JteSpec,
    NetworkSpec,
    Schedule,
    StageSpec,
    build_block,
    build_jte,
    build_model,
    build_network,
)
from maxprop.combiners import CombinerKind, CombinerType
from maxprop.errors import SpecError
from maxprop.layers import BnMode, ForwardContext, Phase
from maxprop.tensor import Rng, Tensor

from conftest import random_array

COMBINERS = [CombinerKind.addition(), CombinerKind.maximum(), CombinerKind.leaky_max(), CombinerKind.concatenation()]


def zero_body(block):
    for parameter in block.body_parameters():
        parameter.value = np.zeros_like(parameter.value)


@pytest.mark.parametrize("phase", [Phase.TRAIN, Phase.EVAL])
def test_zero_body_addition_block_is_relu(phase):
    block = build_block(BlockSpec(4, 4, 1, CombinerKind.addition()), Rng(0), "double")
    zero_body(block)
    x = random_array(0, (2, 4, 3, 3))
    out = block(Tensor(x), ForwardContext(phase=phase))
    np.testing.assert_array_equal(out.data, np.maximum(x, 0))


def test_zero_body_maximum_block_passes_nonnegative_input():
    block = build_block(BlockSpec(4, 4, 1, CombinerKind.maximum()), Rng(0), "double")
    zero_body(block)
    x = random_array(1, (2, 4, 3, 3), 0.0, 3.0)
    out = block(Tensor(x), ForwardContext(phase=Phase.EVAL))
    np.testing.assert_array_equal(out.data, x)


def test_block_layouts():
    two = build_block(BlockSpec(4, 4), Rng(0))
    assert len(two.body) == 2 and two.shortcut_conv is None
    single = build_block(BlockSpec(4, 4, activation=Activation.NONE, body=BodyType.SINGLE_CONV), Rng(0))
    assert len(single.body) == 1
    bottleneck = build_block(BlockSpec(8, 16, 2, body=BodyType.BOTTLENECK), Rng(0))
    kernels = [conv.weight.value.shape for conv, _ in bottleneck.body]
    assert kernels == [(4, 8, 1, 1), (4, 4, 3, 3), (16, 4, 1, 1)]
    assert bottleneck.shortcut_conv.weight.value.shape == (16, 8, 1, 1)
    assert bottleneck.shortcut_conv.stride == 2


@pytest.mark.parametrize("kind", COMBINERS, ids=lambda k: k.code)
def test_projection_shortcut_for_every_combiner(kind):
    block = build_block(BlockSpec(4, 8, 2, kind), Rng(0))
    out = block(Tensor(np.zeros((1, 4, 6, 6), dtype=np.float32)), ForwardContext(phase=Phase.EVAL))
    assert out.shape == (1, 8, 3, 3)
    assert block.shortcut_conv is not None and block.shortcut_bn is not None


def test_block_spec_validation():
    with pytest.raises(SpecError):
        BlockSpec(4, 4, activation=Activation.NONE, body=BodyType.TWO_CONV)
    with pytest.raises(SpecError):
        BlockSpec(4, 4, stride=3)
    with pytest.raises(SpecError):
        BlockSpec(4, 6, body=BodyType.BOTTLENECK)
    with pytest.raises(SpecError):
        BlockSpec(4, 5, combiner=CombinerKind.concatenation())


def test_no_activation_block_has_no_relu():
    block = build_block(BlockSpec(2, 2, 1, CombinerKind.addition(), activation=Activation.NONE,
                                  bn_mode=BnMode.OFF, body=BodyType.SINGLE_CONV), Rng(0), "double")
    x = random_array(2, (1, 2, 3, 3))
    assert np.any(block(Tensor(x), ForwardContext(phase=Phase.EVAL)).data < 0)


def test_resnet34_topology_audit():
    spec = NetworkSpec.preset("resnet34", in_channels=3, num_classes=10)
    assert spec.num_blocks == 16
    network = build_network(spec, Rng(0))
    convs = 1 + sum(len(block.body) for block in network.blocks)
    assert convs + 1 == 34
    strides = [block.spec.stride for block in network.blocks]
    assert strides == [1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1, 1, 1, 2, 1, 1]
    widths = [block.spec.out_channels for block in network.blocks]
    assert widths[0] == 64 and widths[-1] == 512
    projections = [index for index, block in enumerate(network.blocks) if block.shortcut_conv is not None]
    assert projections == [3, 7, 13]


def test_alternating_schedule():
    spec = NetworkSpec.preset("deep14", 3, 10, schedule=Schedule.ALTERNATING)
    kinds = [block.combiner.kind for block in spec.block_specs()]
    assert len(kinds) == 14
    assert all(kind == CombinerType.MAXIMUM for kind in kinds[0::2])
    assert all(kind == CombinerType.ADDITION for kind in kinds[1::2])


@pytest.mark.parametrize("preset", ["tiny", "small", "resnet34", "resnet50"])
def test_parameter_parity_across_combiners(preset):
    base = NetworkSpec.preset(preset, 3, 10)
    counts = {
        kind.code: build_network(base.with_combiner(kind), Rng(0)).num_parameters()
        for kind in COMBINERS
    }
    assert len(set(counts.values())) == 1


def test_no_activation_preset_doubles_blocks_and_keeps_parameter_count():
    relu_spec = NetworkSpec.preset("small", 3, 10, CombinerKind.maximum())
    linear_spec = NetworkSpec.preset("small", 3, 10, CombinerKind.maximum(), activation=Activation.NONE)
    assert linear_spec.num_blocks == 2 * relu_spec.num_blocks
    assert build_network(linear_spec, Rng(0)).num_parameters() == build_network(relu_spec, Rng(0)).num_parameters()
    with pytest.raises(SpecError):
        NetworkSpec.preset("resnet50", 3, 10, activation=Activation.NONE)


def test_network_width_consistency():
    stage = StageSpec(1, BlockSpec(8, 8))
    with pytest.raises(SpecError):
        NetworkSpec(in_channels=3, stem_channels=4, stages=(stage,), num_classes=10)


def test_network_forward_shape_and_frozen_bn_has_fewer_parameters():
    spec = NetworkSpec.preset("tiny", 3, 5)
    network = build_network(spec, Rng(0))
    logits = network(Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32)), ForwardContext(phase=Phase.EVAL))
    assert logits.shape == (2, 5)
    frozen = build_network(NetworkSpec.preset("tiny", 3, 5, bn_mode=BnMode.FROZEN), Rng(0))
    off = build_network(NetworkSpec.preset("tiny", 3, 5, bn_mode=BnMode.OFF), Rng(0))
    assert frozen.num_parameters() == off.num_parameters() < network.num_parameters()


def test_same_seed_builds_identical_networks():
    spec = NetworkSpec.preset("tiny", 3, 4, CombinerKind.leaky_max())
    a = build_network(spec, Rng(5)).state_dict()
    b = build_network(spec, Rng(5)).state_dict()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_jte_feature_width_and_branches():
    base = NetworkSpec.preset("tiny", 3, 4)
    spec = JteSpec.standard(base=base)
    assert spec.feature_width == 3 * base.feature_width
    model = build_jte(spec, Rng(0))
    assert [name for name in model._modules] == ["branch_a", "branch_m", "branch_lm", "head"]
    assert model.head.weight.value.shape == (4, 3 * base.feature_width)
    features = model.features(Tensor(np.zeros((2, 3, 6, 6), dtype=np.float32)), ForwardContext(phase=Phase.EVAL))
    assert features.shape == (2, 3 * base.feature_width)


def test_jte_default_standin_geometry():
    spec = JteSpec.standard()
    branch = spec.branches[0]
    assert branch.stem_channels == 16
    assert [(stage.blocks, stage.block.out_channels) for stage in branch.stages] == [(2, 16), (2, 32), (2, 64)]
    assert [b.combiner.code for b in spec.branches] == ["A", "M", "LM"]


def test_jte_reduces_to_linear_readout_of_one_branch():
    spec = JteSpec.standard(base=NetworkSpec.preset("tiny", 3, 4))
    model = build_jte(spec, Rng(2), "double")
    width = spec.branches[0].feature_width
    weight = model.head.weight.value.copy()
    weight[:, :2 * width] = 0.0
    model.head.weight.value = weight
    x = Tensor(random_array(3, (2, 3, 6, 6)))
    ctx = ForwardContext(phase=Phase.EVAL)
    logits = model(x, ctx).data
    lm_features = model.branches[2].features(x, ctx).data
    np.testing.assert_allclose(logits, lm_features @ weight[:, 2 * width:].T + model.head.bias.value, rtol=1e-12, atol=1e-12)


def test_jte_rejects_mismatched_geometry():
    a = NetworkSpec.preset("tiny", 3, 4)
    b = NetworkSpec.preset("small", 3, 4, CombinerKind.maximum())
    with pytest.raises(SpecError):
        JteSpec((a, b, a.with_combiner(CombinerKind.leaky_max())))
    with pytest.raises(SpecError):
        JteSpec((a, a, a))


def test_build_model_dispatches():
    assert build_model(JteSpec.standard(base=NetworkSpec.preset("tiny", 3, 4)), Rng(0)).num_classes == 4
    assert build_model(NetworkSpec.preset("tiny", 1, 7), Rng(0)).num_classes == 7
