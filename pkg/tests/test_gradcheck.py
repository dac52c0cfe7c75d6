import numpy as np
import pytest

from maxprop.combiners import CombinerKind, MaxBackward
from maxprop.gradcheck import (
    GradientChecker,
    block_specs,
    grad_check,
    module_case,
    network_specs,
    op_cases,
    shared_rule_check,
    uniform_sampler,
)
from maxprop.blocks import build_block
from maxprop.layers import relu
from maxprop.tensor import Rng, elementwise, matmul


def test_linear_model_gradients_are_exact():
    report = grad_check(lambda t: matmul(t[0], t[1]), uniform_sampler((3, 4), (4, 2)), trials=30, rng=Rng(0))
    assert report.ok
    assert report.passed == 30 and report.failed == 0


def test_smooth_product_passes():
    report = grad_check(lambda t: elementwise("mul", t[0], t[1]), uniform_sampler((5,), (5,)), trials=20, rng=Rng(1))
    assert report.ok and report.skipped_kinks == 0


def test_kinks_are_redrawn_not_failed():
    report = grad_check(lambda t: relu(t[0]), lambda rng: [np.zeros(3)], trials=2, rng=Rng(2), max_redraws=3)
    assert report.failed == 0
    assert report.skipped_kinks == 2 * 4
    assert not report.ok


def test_negative_control_is_caught():
    case = next(c for c in op_cases(Rng(3)) if c["name"] == "negative_control_max_sign_flipped")
    report = grad_check(case["fn"], case["sampler"], trials=20, rng=Rng(4))
    assert report.failed > 0
    assert not report.ok
    report.expect_failure = True
    assert report.ok


@pytest.mark.parametrize("kind", [CombinerKind.maximum(MaxBackward.SHARED), CombinerKind.concatenation(MaxBackward.SHARED)],
                         ids=lambda k: k.describe())
def test_shared_max_backward_rule(kind):
    report = shared_rule_check(kind, trials=5, rng=Rng(5))
    assert report.ok and report.method == "rule"


def test_exclusive_max_fails_shared_rule():
    assert not shared_rule_check(CombinerKind.maximum(), trials=3, rng=Rng(6)).ok


def test_case_catalogues_cover_every_combiner():
    names = {case["name"] for case in op_cases(Rng(0))}
    for prefix in ("combine_addition", "combine_maximum", "combine_leaky_max", "combine_concatenation"):
        assert any(name.startswith(prefix) for name in names), prefix
    assert "injected_max_sign_flipped" not in names
    assert "injected_max_sign_flipped" in {case["name"] for case in op_cases(Rng(0), inject_fault=True)}
    assert {"two_conv_A", "two_conv_M", "two_conv_LM", "two_conv_C"} <= set(block_specs())
    assert "tiny_jte" in network_specs()


def test_block_case_passes():
    spec = block_specs()["two_conv_M_projection"]
    fn, sampler = module_case(build_block(spec, Rng(7), precision="double"), (2, spec.in_channels, 4, 4))
    assert grad_check(fn, sampler, trials=10, rng=Rng(8)).ok


def test_checker_ops_scope_passes():
    report = GradientChecker(trials=3, seed=0).run("ops")
    assert report["passed"], report["failed_cases"]
    assert report["scopes"] == ["ops"]
    control = next(case for case in report["cases"] if case["name"] == "negative_control_max_sign_flipped")
    assert control["expect_failure"] and control["ok"] and control["failed"] > 0


def test_checker_blocks_scope_passes():
    report = GradientChecker(trials=2, seed=1).run("blocks")
    assert report["passed"], report["failed_cases"]
    assert len(report["cases"]) == len(block_specs())


def test_checker_network_scope_passes():
    report = GradientChecker(trials=2, seed=2).run("network")
    assert report["passed"], report["failed_cases"]


def test_injected_fault_fails_the_run():
    report = GradientChecker(trials=3, seed=0, inject_fault=True).run("ops")
    assert not report["passed"]
    assert report["failed_cases"] == ["injected_max_sign_flipped"]


def test_unknown_scope_is_reported():
    report = GradientChecker(trials=1).run("layers")
    assert not report["passed"]
    assert "layers" in report["error"]
