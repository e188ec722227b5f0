"""
Finite-difference gradient checking for the adapter and classifier gradients

Central differences with step h. A coordinate whose stencil changes any ReLU
on/off pattern is skipped (the loss is not differentiable across the kink)
and counted separately.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .backbone import Adapter, AdapterSet, BackboneConfig, FrozenBackbone
from .learners import LearnerState, Role, loss_ce, loss_radical

STEP = 1e-5
RELATIVE_TOLERANCE = 1e-4
ABSOLUTE_TOLERANCE = 1e-9
GRADIENT_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    checked: int = 0
    skipped: int = 0
    max_relative_error: float = 0.0
    failures: List[Tuple[str, Tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                    analytic: Dict[str, np.ndarray],
                    pattern_fn: Optional[Callable[[], np.ndarray]] = None,
                    h: float = STEP) -> GradCheckReport:
    """
    Compare analytic gradients with central differences, coordinate by coordinate

    Args:
        loss_fn: Evaluates the loss at the current (in-place perturbed) params
        params: Named parameter arrays, perturbed in place and restored
        analytic: Analytic gradients with the same names and shapes
        pattern_fn: Returns the current ReLU pattern (kink detection)
        h: Finite-difference step

    Returns:
        GradCheckReport
    """
    report = GradCheckReport()
    base_pattern = pattern_fn() if pattern_fn is not None else None

    for name, param in params.items():
        grad = analytic[name]
        for index in np.ndindex(param.shape):
            original = param[index]

            param[index] = original + h
            loss_plus = loss_fn()
            kink = pattern_fn is not None and not np.array_equal(pattern_fn(), base_pattern)
            param[index] = original - h
            loss_minus = loss_fn()
            kink = kink or (pattern_fn is not None
                            and not np.array_equal(pattern_fn(), base_pattern))
            param[index] = original

            if kink:
                report.skipped += 1
                continue

            numeric = (loss_plus - loss_minus) / (2.0 * h)
            value = float(grad[index])
            scale = max(abs(value), abs(numeric))
            if scale <= GRADIENT_FLOOR:
                continue
            report.checked += 1
            error = abs(value - numeric)
            relative = error / scale
            report.max_relative_error = max(report.max_relative_error, relative)
            if relative >= RELATIVE_TOLERANCE and error >= ABSOLUTE_TOLERANCE:
                report.failures.append((name, index, value, numeric))

    return report


@dataclass
class GradProblem:
    """A small random backbone, two adapter sets, a head and a labelled batch"""

    backbone: FrozenBackbone
    adapters: AdapterSet
    other_adapters: AdapterSet
    classifier: np.ndarray
    x: np.ndarray
    y: np.ndarray


def random_problem(seed: int) -> GradProblem:
    """Draw a small random configuration (nonzero W_up so every path carries gradient)"""
    rng = np.random.default_rng(seed)
    hidden_dim = int(rng.integers(5, 10))
    config = BackboneConfig(input_dim=int(rng.integers(3, 8)), hidden_dim=hidden_dim,
                            embed_dim=int(rng.integers(3, 7)), num_blocks=int(rng.integers(1, 4)),
                            adapter_dim=int(rng.integers(2, hidden_dim)), seed=seed)
    backbone = FrozenBackbone.from_config(config)

    def adapters():
        return AdapterSet([
            Adapter(rng.normal(0.0, 0.5, size=(hidden_dim, config.adapter_dim)),
                    rng.normal(0.0, 0.5, size=(config.adapter_dim, hidden_dim)))
            for _ in range(config.num_blocks)
        ])

    num_classes = int(rng.integers(2, 5))
    batch = int(rng.integers(2, 6))
    return GradProblem(
        backbone=backbone,
        adapters=adapters(),
        other_adapters=adapters(),
        classifier=rng.normal(0.0, 1.0, size=(config.embed_dim, num_classes)),
        x=rng.normal(0.0, 1.0, size=(batch, config.input_dim)),
        y=rng.integers(0, num_classes, size=batch),
    )


def check_classification(problem: GradProblem, scale: Optional[float] = None) -> GradCheckReport:
    """Gradients of CE(W^T phi(x), y) (cosine logits when scale is set) w.r.t. adapters and W"""
    backbone, adapters = problem.backbone, problem.adapters

    def loss():
        return loss_ce(problem.classifier, backbone.embed(problem.x, adapters)[0], problem.y,
                       scale).loss

    embeddings, trace = backbone.embed(problem.x, adapters)
    ce = loss_ce(problem.classifier, embeddings, problem.y, scale)
    analytic = dict(backbone.backward_adapters(trace, ce.grad_embeddings).parameters())
    analytic["classifier"] = ce.grad_classifier

    params = dict(adapters.parameters())
    params["classifier"] = problem.classifier
    return check_gradients(loss, params, analytic,
                           pattern_fn=lambda: backbone.embed(problem.x, adapters)[1].relu_pattern())


def check_radical(problem: GradProblem, scale: Optional[float] = None) -> GradCheckReport:
    """Gradients of CE(W_R^T phi_R) + CE(W_R^T phi_C) w.r.t. radical adapters and W_R"""
    backbone = problem.backbone
    state = LearnerState(problem.adapters, problem.classifier, Role.RADICAL)
    conservative_embeddings = backbone.embed(problem.x, problem.other_adapters)[0]

    def loss():
        radical_embeddings = backbone.embed(problem.x, state.adapters)[0]
        return loss_radical(state, radical_embeddings, conservative_embeddings, problem.y,
                            scale).loss

    radical_embeddings, trace = backbone.embed(problem.x, state.adapters)
    radical = loss_radical(state, radical_embeddings, conservative_embeddings, problem.y, scale)
    analytic = dict(backbone.backward_adapters(trace, radical.grad_embeddings).parameters())
    analytic["classifier"] = radical.grad_classifier

    params = dict(state.adapters.parameters())
    params["classifier"] = state.classifier
    return check_gradients(loss, params, analytic,
                           pattern_fn=lambda: backbone.embed(problem.x, state.adapters)[1].relu_pattern())
