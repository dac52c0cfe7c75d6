# maxprop/gradcheck.py
"""
Finite-difference gradient oracle.

``grad_check`` compares tape gradients with central differences in double
precision on randomly sampled coordinates. Vector outputs are reduced to a
scalar with a random linear functional drawn per trial. When a check fails,
the one-sided differences are compared: at a kink (ReLU, max, |x|) they
disagree by about twice the central-difference error, while a wrong backward
rule on a smooth region leaves them close together. Kinks are redrawn and
counted instead of reported as failures.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .blocks import Activation, BlockSpec, BodyType, JteSpec, NetworkSpec, Schedule, build_block, build_jte, build_network
from .combiners import CombinerKind, CombinerType, MaxBackward, combine, combine_backward
from .layers import (
    BatchNormState,
    BnMode,
    ForwardContext,
    Module,
    Phase,
    batch_norm,
    dense,
    global_avg_pool,
    mae_loss,
    relu,
    softmax_cross_entropy,
)
from .tensor import (
    Rng,
    Tape,
    Tensor,
    apply_op,
    broadcast_to,
    concat,
    conv2d,
    elementwise,
    matmul,
    mul,
    reduce,
    reshape,
    scale,
    slice_axis,
    transpose,
)

logger = logging.getLogger(__name__)

SCOPES = ("ops", "blocks", "network")

Fn = Callable[[List[Tensor]], Tensor]
Sampler = Callable[[Rng], List[np.ndarray]]


@dataclass
class GradCheckReport:
    name: str
    method: str = "finite_difference"
    trials: int = 0
    passed: int = 0
    skipped_kinks: int = 0
    max_rel_error: float = 0.0
    failures: List[Dict[str, Any]] = field(default_factory=list)
    expect_failure: bool = False

    @property
    def failed(self) -> int:
        return len(self.failures)

    @property
    def ok(self) -> bool:
        if self.expect_failure:
            return self.failed > 0
        return self.failed == 0 and self.passed > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "method": self.method,
            "trials": self.trials,
            "passed": self.passed,
            "failed": self.failed,
            "skipped_kinks": self.skipped_kinks,
            "max_rel_error": self.max_rel_error,
            "expect_failure": self.expect_failure,
            "ok": self.ok,
        }


def _scalarize(output: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    if output.shape == ():
        return output
    return reduce("sum", mul(output, Tensor._wrap(weights)))


def _evaluate(fn: Fn, arrays: Sequence[np.ndarray], weights: Optional[np.ndarray]) -> float:
    return _scalarize(fn([Tensor._wrap(a) for a in arrays]), weights).item()


def grad_check(
    fn: Fn,
    sampler: Sampler,
    trials: int = 100,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    rng: Optional[Rng] = None,
    name: str = "check",
    max_redraws: int = 20,
) -> GradCheckReport:
    """
    Checks ``fn``'s tape gradients against central differences.

    Args:
        fn (Fn): Maps input tensors to an output tensor using recorded ops.
        sampler (Sampler): Draws a fresh list of float64 inputs per trial.
        trials (int): Number of checked coordinates.
        h (float): Finite-difference step.
        rtol (float): Relative tolerance on |analytic - numeric| / max(|analytic|, |numeric|).
        atol (float): Absolute floor for near-zero gradients.
        rng (Optional[Rng]): Source for inputs, weights and coordinates.
        name (str): Case name for the report.
        max_redraws (int): Kink redraws allowed per trial before it is dropped.

    Returns:
        GradCheckReport: Counts, max relative error and the failing coordinates.
    """
    rng = rng or Rng(0)
    report = GradCheckReport(name=name)
    for trial in range(trials):
        for _ in range(max_redraws + 1):
            arrays = [np.asarray(a, dtype=np.float64) for a in sampler(rng)]
            tape = Tape()
            leaves = [tape.watch(a, f"input{i}") for i, a in enumerate(arrays)]
            output = fn(leaves)
            weights = None if output.shape == () else rng.uniform(-1.0, 1.0, output.shape)
            tape.backward(_scalarize(output, weights))

            which = int(rng.integers(0, len(arrays) - 1))
            flat = int(rng.integers(0, arrays[which].size - 1))
            analytic = float(tape.grad(leaves[which]).reshape(-1)[flat])

            def shifted(delta: float) -> float:
                moved = [a.copy() for a in arrays]
                moved[which].reshape(-1)[flat] += delta
                return _evaluate(fn, moved, weights)

            centre, plus, minus = _evaluate(fn, arrays, weights), shifted(h), shifted(-h)
            numeric = (plus - minus) / (2 * h)
            error = abs(analytic - numeric)
            magnitude = max(abs(analytic), abs(numeric))
            if error <= atol + rtol * magnitude:
                report.passed += 1
                report.max_rel_error = max(report.max_rel_error, error / magnitude if magnitude else 0.0)
                break
            one_sided_gap = abs((plus - centre) / h - (centre - minus) / h)
            if one_sided_gap >= error:
                report.skipped_kinks += 1
                continue
            report.max_rel_error = max(report.max_rel_error, error / magnitude)
            report.failures.append(
                {"trial": trial, "input": which, "index": flat, "analytic": analytic, "numeric": numeric}
            )
            break
        report.trials += 1
    logger.debug(
        f"grad_check {name}: {report.passed}/{report.trials} passed, {report.skipped_kinks} kinks skipped, "
        f"max rel error {report.max_rel_error:.2e}"
    )
    return report


def shared_rule_check(kind: CombinerKind, trials: int = 100, rng: Optional[Rng] = None, name: str = "") -> GradCheckReport:
    """
    Shared max-backward has no finite-difference counterpart, so its rule is
    checked exactly: every max-routed element hands the full upstream gradient
    to both operands, through ``combine_backward`` and through the tape.
    """
    rng = rng or Rng(0)
    report = GradCheckReport(name=name or f"combine_{kind.describe()}", method="rule")
    for trial in range(trials):
        f_out, skip, grad = (rng.uniform(-2.0, 2.0, (2, 4, 3, 3)) for _ in range(3))
        expected_f, expected_skip = combine_backward(kind, grad, f_out, skip)
        tape = Tape()
        f_leaf, skip_leaf = tape.watch(f_out), tape.watch(skip)
        tape.backward(_scalarize(combine(kind, f_leaf, skip_leaf), grad))
        max_half = slice(None) if kind.kind == CombinerType.MAXIMUM else slice(2, 4)
        rule_holds = (
            np.array_equal(expected_f[:, max_half], grad[:, max_half])
            and np.array_equal(expected_skip[:, max_half], grad[:, max_half])
            and np.array_equal(tape.grad(f_leaf), expected_f)
            and np.array_equal(tape.grad(skip_leaf), expected_skip)
        )
        report.trials += 1
        if rule_holds:
            report.passed += 1
        else:
            report.failures.append({"trial": trial})
    return report


def _sign_flipped_maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max whose backward negates the routed gradient."""
    first = a.data >= b.data

    def backward(grad, saved):
        zero = np.zeros_like(grad)
        return np.where(first, -grad, zero), np.where(first, zero, -grad)

    return apply_op("max_sign_flipped", (a, b), np.maximum(a.data, b.data), backward)


def uniform_sampler(*shapes) -> Sampler:
    def sample(rng: Rng) -> List[np.ndarray]:
        return [rng.uniform(-2.0, 2.0, shape) for shape in shapes]
    return sample


def module_case(module: Module, input_shape, labels: Optional[np.ndarray] = None):
    """
    (fn, sampler) differentiating ``module`` w.r.t. its input and every trainable
    parameter. BN runs in train phase without touching running statistics; with
    ``labels`` the output is the cross-entropy loss.
    """
    params = list(module.named_parameters().values())
    initial = [np.asarray(p.value, dtype=np.float64) for p in params]

    def fn(tensors: List[Tensor]) -> Tensor:
        overrides = {id(p): t for p, t in zip(params, tensors[1:])}
        ctx = ForwardContext(phase=Phase.TRAIN, update_stats=False, overrides=overrides)
        out = module(tensors[0], ctx)
        return softmax_cross_entropy(out, labels) if labels is not None else out

    def sampler(rng: Rng) -> List[np.ndarray]:
        return [rng.uniform(-2.0, 2.0, input_shape)] + [value.copy() for value in initial]

    return fn, sampler


def _bn_state(channels: int, mode: BnMode, rng: Rng) -> BatchNormState:
    state = BatchNormState.create(channels, mode, np.float64)
    if mode == BnMode.LEARNED:
        state.running_mean = rng.uniform(-0.5, 0.5, (channels,))
        state.running_var = rng.uniform(0.5, 2.0, (channels,))
    return state


def op_cases(rng: Rng, inject_fault: bool = False) -> List[Dict[str, Any]]:
    """Primitive ops, losses, BN and every combiner kind."""
    cases = []

    def add_case(name, fn, sampler, expect_failure=False):
        cases.append({"name": name, "fn": fn, "sampler": sampler, "expect_failure": expect_failure})

    for op in ("add", "sub", "mul", "max", "min"):
        add_case(f"elementwise_{op}", lambda t, op=op: elementwise(op, t[0], t[1]), uniform_sampler((3, 4), (3, 4)))
    add_case("scale", lambda t: scale(t[0], 1.7), uniform_sampler((3, 4)))
    add_case("matmul", lambda t: matmul(t[0], t[1]), uniform_sampler((3, 4), (4, 2)))
    add_case("transpose", lambda t: transpose(t[0]), uniform_sampler((3, 4)))
    add_case("conv2d_stride1_pad1", lambda t: conv2d(t[0], t[1], 1, 1), uniform_sampler((2, 3, 5, 5), (4, 3, 3, 3)))
    add_case("conv2d_stride2_pad0", lambda t: conv2d(t[0], t[1], 2, 0), uniform_sampler((2, 2, 5, 5), (3, 2, 3, 3)))
    add_case("conv2d_1x1_stride2", lambda t: conv2d(t[0], t[1], 2, 0), uniform_sampler((2, 3, 4, 4), (2, 3, 1, 1)))
    add_case("reduce_sum", lambda t: reduce("sum", t[0], (1,)), uniform_sampler((3, 4, 5)))
    add_case("reduce_mean", lambda t: reduce("mean", t[0], (0, 2)), uniform_sampler((3, 4, 5)))
    add_case("reduce_max", lambda t: reduce("max", t[0], (1,)), uniform_sampler((3, 4, 5)))
    add_case("reshape", lambda t: reshape(t[0], (2, 6)), uniform_sampler((3, 4)))
    add_case("broadcast_to", lambda t: broadcast_to(t[0], (3, 4)), uniform_sampler((3, 1)))
    add_case("concat", lambda t: concat([t[0], t[1]], axis=1), uniform_sampler((2, 3), (2, 2)))
    add_case("slice_axis", lambda t: slice_axis(t[0], 1, 1, 4), uniform_sampler((3, 5)))
    add_case("relu", lambda t: relu(t[0]), uniform_sampler((4, 5)))
    add_case("global_avg_pool", lambda t: global_avg_pool(t[0]), uniform_sampler((2, 3, 3, 3)))
    add_case("dense", lambda t: dense(t[0], t[1], t[2]), uniform_sampler((3, 4), (2, 4), (2,)))
    labels = np.array([0, 2, 4, 1])
    add_case("softmax_cross_entropy", lambda t: softmax_cross_entropy(t[0], labels), uniform_sampler((4, 5)))
    add_case("mae_loss", lambda t: mae_loss(t[0], t[1]), uniform_sampler((3, 4), (3, 4)))

    learned = _bn_state(3, BnMode.LEARNED, rng)
    frozen = _bn_state(3, BnMode.FROZEN, rng)
    add_case(
        "batch_norm_train",
        lambda t: batch_norm(t[0], learned, Phase.TRAIN, t[1], t[2], update_stats=False),
        uniform_sampler((4, 3, 2, 2), (3,), (3,)),
    )
    add_case(
        "batch_norm_eval",
        lambda t: batch_norm(t[0], learned, Phase.EVAL, t[1], t[2]),
        uniform_sampler((4, 3, 2, 2), (3,), (3,)),
    )
    add_case("batch_norm_frozen", lambda t: batch_norm(t[0], frozen, Phase.TRAIN), uniform_sampler((4, 3, 2, 2)))

    combiners = [
        CombinerKind.addition(),
        CombinerKind.maximum(),
        CombinerKind.leaky_max(),
        CombinerKind.leaky_max(1.0, 1.0),
        CombinerKind.leaky_max(1.0, 0.0),
        CombinerKind.leaky_max(0.5, 0.3),
        CombinerKind.concatenation(),
    ]
    for kind in combiners:
        add_case(f"combine_{kind.describe()}", lambda t, kind=kind: combine(kind, t[0], t[1]),
                 uniform_sampler((2, 4, 3, 3), (2, 4, 3, 3)))

    add_case("negative_control_max_sign_flipped", lambda t: _sign_flipped_maximum(t[0], t[1]),
             uniform_sampler((3, 4), (3, 4)), expect_failure=True)
    if inject_fault:
        add_case("injected_max_sign_flipped", lambda t: _sign_flipped_maximum(t[0], t[1]), uniform_sampler((3, 4), (3, 4)))
    return cases


def block_specs() -> Dict[str, BlockSpec]:
    """Tiny blocks covering every body layout, combiner, BN mode and the projection shortcut."""
    specs = {}
    for kind in (CombinerKind.addition(), CombinerKind.maximum(), CombinerKind.leaky_max(), CombinerKind.concatenation()):
        specs[f"two_conv_{kind.code}"] = BlockSpec(4, 4, 1, kind)
        specs[f"bottleneck_{kind.code}"] = BlockSpec(8, 8, 1, kind, body=BodyType.BOTTLENECK)
    for kind in (CombinerKind.addition(), CombinerKind.maximum(), CombinerKind.leaky_max()):
        specs[f"single_conv_no_activation_{kind.code}"] = BlockSpec(
            4, 4, 1, kind, activation=Activation.NONE, body=BodyType.SINGLE_CONV
        )
    specs["two_conv_M_projection"] = BlockSpec(4, 8, 2, CombinerKind.maximum())
    specs["bottleneck_LM_projection"] = BlockSpec(4, 8, 2, CombinerKind.leaky_max(), body=BodyType.BOTTLENECK)
    specs["two_conv_M_frozen_bn"] = BlockSpec(4, 4, 1, CombinerKind.maximum(), bn_mode=BnMode.FROZEN)
    specs["two_conv_LM_no_bn"] = BlockSpec(4, 4, 1, CombinerKind.leaky_max(), bn_mode=BnMode.OFF)
    return specs


def network_specs() -> Dict[str, Any]:
    """Tiny networks: every uniform combiner, the alternating schedule, no activations, and a JTE."""
    base = NetworkSpec.preset("tiny", in_channels=3, num_classes=3)
    specs: Dict[str, Any] = {
        f"tiny_{kind.code}": base.with_combiner(kind)
        for kind in (CombinerKind.addition(), CombinerKind.maximum(), CombinerKind.leaky_max(), CombinerKind.concatenation())
    }
    specs["tiny_alternating"] = NetworkSpec.preset("tiny", 3, 3, schedule=Schedule.ALTERNATING)
    specs["tiny_no_activation_M"] = NetworkSpec.preset("tiny", 3, 3, CombinerKind.maximum(), activation=Activation.NONE)
    specs["tiny_jte"] = JteSpec.standard(base=base)
    return specs


class GradientChecker:
    """
    Runs the gradient oracle suite for the requested scopes.

    Args:
        trials (int): Coordinates checked per case.
        seed (int): Seed of every sampled input and model.
        inject_fault (bool): Adds a deliberately broken op that must be caught.
        name (str): Prefix used in log lines.
    """

    def __init__(self, trials: int = 100, seed: int = 0, inject_fault: bool = False, name: str = "GradientChecker"):
        self.trials = trials
        self.seed = seed
        self.inject_fault = inject_fault
        self.name = name
        logger.info(f"Initialized {self.name} (trials={trials}, seed={seed}, inject_fault={inject_fault})")

    def _run_case(self, case: Dict[str, Any], rng: Rng) -> GradCheckReport:
        report = grad_check(case["fn"], case["sampler"], trials=self.trials, rng=rng, name=case["name"])
        report.expect_failure = case.get("expect_failure", False)
        return report

    def check_ops(self) -> List[GradCheckReport]:
        rng = Rng(self.seed).fork(0)
        reports = [self._run_case(case, rng.fork(i)) for i, case in enumerate(op_cases(rng.fork(999), self.inject_fault))]
        for index, kind in enumerate((CombinerKind.maximum(MaxBackward.SHARED), CombinerKind.concatenation(MaxBackward.SHARED))):
            reports.append(shared_rule_check(kind, self.trials, rng.fork(500 + index), f"combine_{kind.describe()}"))
        return reports

    def check_blocks(self) -> List[GradCheckReport]:
        rng = Rng(self.seed).fork(1)
        reports = []
        for index, (name, spec) in enumerate(block_specs().items()):
            block = build_block(spec, rng.fork(1000 + index), precision="double")
            fn, sampler = module_case(block, (2, spec.in_channels, 4, 4))
            reports.append(self._run_case({"name": f"block_{name}", "fn": fn, "sampler": sampler}, rng.fork(index)))
        return reports

    def check_network(self) -> List[GradCheckReport]:
        rng = Rng(self.seed).fork(2)
        labels = np.array([0, 2])
        reports = []
        for index, (name, spec) in enumerate(network_specs().items()):
            init = rng.fork(1000 + index)
            model = build_jte(spec, init, "double") if isinstance(spec, JteSpec) else build_network(spec, init, "double")
            fn, sampler = module_case(model, (2, 3, 6, 6), labels)
            reports.append(self._run_case({"name": f"network_{name}", "fn": fn, "sampler": sampler}, rng.fork(index)))
        return reports

    def run(self, scope: Optional[str] = None) -> Dict[str, Any]:
        """
        Args:
            scope (Optional[str]): One of ops, blocks, network; None runs all three.

        Returns:
            Dict[str, Any]: Per-case results and an overall ``passed`` flag.
        """
        scopes = list(SCOPES) if scope in (None, "all") else [scope]
        logger.info(f"{self.name}: running gradient checks for scopes {scopes}")
        try:
            unknown = [s for s in scopes if s not in SCOPES]
            if unknown:
                raise ValueError(f"Unknown gradcheck scope {unknown[0]!r}, expected one of {list(SCOPES)}")
            runners = {"ops": self.check_ops, "blocks": self.check_blocks, "network": self.check_network}
            reports: List[GradCheckReport] = []
            for name in scopes:
                reports.extend(runners[name]())
            for report in reports:
                level = logging.INFO if report.ok else logging.ERROR
                logger.log(level, f"{self.name}: {report.name}: {'ok' if report.ok else 'FAILED'} "
                                  f"({report.passed}/{report.trials}, kinks {report.skipped_kinks}, "
                                  f"max rel err {report.max_rel_error:.2e})")
            failed = [report.name for report in reports if not report.ok]
            return {
                "source": self.name,
                "type": "gradcheck_report",
                "scopes": scopes,
                "cases": [report.to_dict() for report in reports],
                "failed_cases": failed,
                "passed": not failed,
            }
        except Exception as e:
            logger.error(f"{self.name}: gradient check run failed: {e}", exc_info=True)
            return {"source": self.name, "type": "gradcheck_report", "passed": False, "error": str(e), "exception": e}
