"""Named parameters and the AdamW update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, OptimizerError
from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass(eq=False)
class Parameter:
    """A named, shaped tensor that can be frozen.

    Freezing flips ``tensor.requires_grad`` off, so autodiff never hands the
    parameter a gradient and :func:`adamw_step` leaves it alone.
    """

    name: str
    tensor: Tensor
    frozen: bool = False
    optimizer_state: AdamState | None = None

    def __post_init__(self):
        self.tensor.requires_grad = not self.frozen

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self.tensor.requires_grad = not frozen
        if frozen:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.05
    name: str = field(default="AdamW")

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"betas must lie in (0, 1): {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def adamw_step(params: Iterable[Parameter], config: OptimizerConfig) -> None:
    """One AdamW update with bias correction and decoupled weight decay.

    Frozen parameters are skipped entirely: data, state and step count stay put.
    """
    params = list(params)
    for p in params:
        if not p.frozen and p.tensor.grad is None:
            raise OptimizerError(f"trainable parameter {p.name!r} has no gradient")
    b1, b2 = config.beta1, config.beta2
    for p in params:
        if p.frozen:
            continue
        g = p.tensor.grad
        st = p.optimizer_state
        if st is None:
            st = p.optimizer_state = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m = b1 * st.m + (1 - b1) * g
        st.v = b2 * st.v + (1 - b2) * g * g
        m_hat = st.m / (1 - b1**st.step)
        v_hat = st.v / (1 - b2**st.step)
        theta = p.tensor.data
        theta = theta - config.learning_rate * config.weight_decay * theta
        theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        p.tensor.data = theta


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients of trainable params so their global L2 norm is <= max_norm."""
    trainable = [p for p in params if not p.frozen and p.tensor.grad is not None]
    total = math.sqrt(sum(float((p.tensor.grad**2).sum()) for p in trainable))
    if total > max_norm > 0:
        for p in trainable:
            p.tensor.grad = p.tensor.grad * (max_norm / total)
    return total
