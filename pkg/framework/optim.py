from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from framework.errors import ContractError, NumericError
from framework.params import ParamVector


@dataclass
class AdamState:
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")

    @classmethod
    def for_params(cls, params: ParamVector, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        arrays = list(params.arrays())
        return cls(
            first_moment=[np.zeros_like(a) for a in arrays],
            second_moment=[np.zeros_like(a) for a in arrays],
            learning_rate=learning_rate,
            names=params.array_names(),
            **kwargs,
        )

    @classmethod
    def for_array(cls, values: np.ndarray, learning_rate: float = 1e-3, name: str = "array", **kwargs) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(values, dtype=np.float64)],
            second_moment=[np.zeros_like(values, dtype=np.float64)],
            learning_rate=learning_rate,
            names=[name],
            **kwargs,
        )


def _adam_update(values: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    if len(values) != len(state.first_moment) or len(grads) != len(values):
        raise ContractError("parameter, gradient and moment layouts differ")
    for i, (v, g) in enumerate(zip(values, grads)):
        name = state.names[i] if i < len(state.names) else f"array{i}"
        if v.shape != g.shape or v.shape != state.first_moment[i].shape:
            raise ContractError(f"{name}: shape {v.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry", layer=name)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for v, g, m, s in zip(values, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * g * g
        m_hat = m / correction1
        s_hat = s / correction2
        v -= state.learning_rate * m_hat / (np.sqrt(s_hat) + state.epsilon)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    params.check_layout(grads)
    _adam_update(list(params.arrays()), list(grads.arrays()), state)
    params.version += 1
    return params, state


def adam_step_array(values: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    _adam_update([values], [np.asarray(grad, dtype=np.float64)], state)
    return values, state
