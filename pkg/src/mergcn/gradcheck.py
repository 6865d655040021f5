"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, TensorError, backward, kink_probe, zero_grads


class NonDeterministicClosure(TensorError):
    pass


@dataclass
class CoordinateCheck:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    kinked: bool = False


@dataclass
class GradCheckResult:
    """``max_rel_error`` covers coordinates where the loss is differentiable.

    A coordinate is kinked when some activation changes sign between the
    base, ``+eps`` and ``-eps`` evaluations; central differences straddle a
    corner there, so those coordinates are kept in ``kinked`` and replaced
    by fresh draws rather than scored.
    """

    max_rel_error: float
    worst: Optional[CoordinateCheck]
    checks: list[CoordinateCheck]
    eps: float
    kinked: list[CoordinateCheck] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return bool(self.checks) and self.max_rel_error < tol

    @property
    def max_rel_error_including_kinks(self) -> float:
        return max((c.rel_error for c in self.checks + self.kinked), default=0.0)


def relative_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    closure: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    samples: int = 4,
    seed: int = 0,
    floor: float = 1e-6,
    max_draws: Optional[int] = None,
) -> GradCheckResult:
    """Compare backprop gradients of ``closure()`` with central differences.

    ``closure`` must rebuild the scalar loss from the current parameter
    values on every call. For each parameter, coordinates are drawn in a
    seeded order until ``samples`` differentiable ones have been checked or
    ``max_draws`` (default ``4 * samples``) have been tried. The relative
    error uses ``max(|analytic|, |numeric|, floor)`` as denominator so
    coordinates with vanishing gradient do not dominate.
    """
    if eps <= 0:
        raise TensorError(f"eps must be positive, got {eps}")
    if max_draws is None:
        max_draws = 4 * samples

    def evaluate() -> tuple[float, list]:
        with kink_probe() as masks:
            value = closure().item()
        return value, masks

    zero_grads(params)
    with Tape() as tape:
        loss = closure()
    backward(loss, tape, params)
    base, pattern = evaluate()
    if base != loss.item() or evaluate()[0] != base:
        raise NonDeterministicClosure(f"closure is not deterministic: {loss.item()!r} then {base!r}")

    rng = np.random.default_rng(seed)
    checks: list[CoordinateCheck] = []
    kinked: list[CoordinateCheck] = []
    for prm in params:
        flat = prm.value.data.reshape(-1)
        grad = prm.grad.reshape(-1)
        order = rng.permutation(flat.size)[:max_draws]
        smooth = 0
        for i in (int(v) for v in order):
            if smooth == samples:
                break
            orig = flat[i]
            flat[i] = orig + eps
            up, up_pattern = evaluate()
            flat[i] = orig - eps
            down, down_pattern = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grad[i])
            crossed = not (_same_pattern(up_pattern, pattern) and _same_pattern(down_pattern, pattern))
            check = CoordinateCheck(
                prm.name,
                tuple(int(v) for v in np.unravel_index(i, prm.shape)),
                analytic,
                numeric,
                relative_error(analytic, numeric, floor),
                crossed,
            )
            if crossed:
                kinked.append(check)
            else:
                checks.append(check)
                smooth += 1
    zero_grads(params)
    worst = max(checks, key=lambda c: c.rel_error, default=None)
    return GradCheckResult(worst.rel_error if worst else 0.0, worst, checks, eps, kinked)


def tiny_model_check(
    eps: float = 1e-5,
    samples: int = 2,
    seed: int = 0,
    corrupt: bool = False,
    n_classes: int = 3,
    width_scale: float = 0.125,
    t: int = 8,
) -> GradCheckResult:
    """End-to-end check on a 2-AU MER-GCN model over one random sequence."""
    from .backbone import BackboneConfig
    from .graph import AuVocabulary, build_adjacency
    from .model import ModelConfig, build_model, model_loss
    from .tensor import planted_fault

    # P(AU1|AU2) = 1 but P(AU2|AU1) = 1/2: an asymmetric graph.
    adjacency = build_adjacency([{1, 2}, {1}], AuVocabulary((1, 2)))
    config = ModelConfig(
        n_classes=n_classes,
        backbone=BackboneConfig(in_channels=3, width_scale=width_scale),
        head_init_std=0.5,
    )
    model = build_model(config, adjacency, seed)
    rng = np.random.default_rng([seed, 7])
    seq = Tensor(rng.uniform(-1.0, 1.0, size=(3, t, 112, 112)))
    label = int(rng.integers(n_classes))
    params = model.parameters()

    def closure():
        return model_loss(model, seq, label)

    if corrupt:
        with planted_fault("matmul"):
            return grad_check(closure, params, eps, samples, seed)
    return grad_check(closure, params, eps, samples, seed)
