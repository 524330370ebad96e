"""ADAM optimizer over named parameter tensors."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from latentprog.autodiff import Tensor
from latentprog.exceptions import (
    ConfigurationError,
    FrozenParameterError,
    NumericError,
    ShapeError,
    TrainingError,
)

__all__ = ["Adam", "AdamState", "adam_step"]


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name.

    Attributes:
        lr: Step size.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator floor.
        t: Number of steps taken so far.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(
                f"beta1/beta2 must lie in [0, 1), got {self.beta1}, {self.beta2}"
            )


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """Apply one bias-corrected ADAM update in place, then zero the grads.

    Only the parameters passed in are touched; moments of parameters left out
    of a step stay as they were.

    Raises:
        TrainingError: A parameter has no gradient.
        FrozenParameterError: A frozen parameter was passed in.
        NumericError: A gradient is not finite.
    """
    for name, param in params.items():
        if param.frozen:
            raise FrozenParameterError(f"Optimizer step on frozen parameter '{name}'")
        if param.grad is None:
            raise TrainingError(f"Parameter '{name}' has no gradient")
        if not np.all(np.isfinite(param.grad)):
            raise NumericError(f"Parameter '{name}' has a non-finite gradient")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        grad = param.grad
        assert grad is not None
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.shape:
            raise ShapeError(
                f"moment shape {m.shape} does not match parameter "
                f"'{name}' {param.shape}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.grad = np.zeros_like(param.data)


class Adam:
    """Thin stateful wrapper binding an :class:`AdamState` to a parameter set.

    Args:
        params: Named parameters the optimizer may update.
        lr: Initial learning rate.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3):
        self.params = dict(params)
        self.state = AdamState(lr=lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    def halve_lr(self) -> float:
        self.state.lr /= 2.0
        return self.state.lr

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self, names: list[str] | None = None) -> None:
        """Step every parameter, or only those listed in ``names``."""
        selected = self.params if names is None else {n: self.params[n] for n in names}
        adam_step(self.state, selected)

    def __repr__(self) -> str:
        state = self.state
        return f"Adam(params={len(self.params)}, lr={state.lr:g}, t={state.t})"
