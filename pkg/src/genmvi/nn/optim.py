"""Adam and the hyperbolic-tangent learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    """Raised when a gradient or loss stops being finite; training must abort."""


@dataclass(frozen=True)
class TrainState:
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0
    epoch: int = 0
    rng_seed: int = 0

    @classmethod
    def fresh(cls, params: np.ndarray, rng_seed: int = 0) -> "TrainState":
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0, 0, rng_seed)

    def __post_init__(self):
        if self.adam_m.shape != self.params.shape or self.adam_v.shape != self.params.shape:
            raise ValueError("Adam moments must mirror the parameter shape")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")


def adam_step(state: TrainState, grads: np.ndarray, lr: float) -> TrainState:
    """One bias-corrected Adam update. Does not modify ``state``."""
    if grads.shape != state.params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient(f"non-finite gradient at step {state.step_count + 1}")
    t = state.step_count + 1
    m = BETA1 * state.adam_m + (1 - BETA1) * grads
    v = BETA2 * state.adam_v + (1 - BETA2) * grads * grads
    m_hat = m / (1 - BETA1 ** t)
    v_hat = v / (1 - BETA2 ** t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + EPS)
    dt = state.params.dtype
    return replace(state, params=params.astype(dt), adam_m=m.astype(dt), adam_v=v.astype(dt), step_count=t)


def lr_multiplier(n: int) -> float:
    """``(tanh(1.8 - 0.3 n) + 1) / (2 (tanh(1.5) + 1))`` for epoch ``n >= 1``."""
    if int(n) != n or n < 1:
        raise ValueError(f"epoch number must be an integer >= 1, got {n}")
    return (math.tanh(1.8 - 0.3 * n) + 1.0) / (2.0 * (math.tanh(1.5) + 1.0))


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    # divide by multiplier(1) = 0.5 so that epoch 1 runs at exactly base_lr
    normalize_first_epoch: bool = True

    def __call__(self, n: int) -> float:
        m = lr_multiplier(n)
        if self.normalize_first_epoch:
            m /= lr_multiplier(1)
        return self.base_lr * m
