"""Adam updates for the model parts, one optimizer instance per part holder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelPartParams
from .tensor import Tensor


class OptimizerError(Exception):
    pass


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise OptimizerError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0) or not (0.0 <= self.beta2 < 1.0):
            raise OptimizerError(f"momentum factors must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise OptimizerError(f"eps must be positive, got {self.eps}")


class AdamState:
    """Step counter plus first/second moment accumulators per parameter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray]):
        self.step = 0
        self.m = m
        self.v = v


def adam_init(params: ModelPartParams, config: AdamConfig) -> AdamState:
    m = {name: np.zeros_like(t.data) for name, t in params.items()}
    v = {name: np.zeros_like(t.data) for name, t in params.items()}
    return AdamState(m, v)


def adam_step(params: ModelPartParams, grads: dict[str, np.ndarray],
              state: AdamState, config: AdamConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors.

    All gradients are validated before any mutation so a non-finite
    gradient aborts the whole update.
    """
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            raise OptimizerError(f"missing gradient for {params.part} parameter '{name}'")
        g = g.data if isinstance(g, Tensor) else g
        if g.shape != t.shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {t.shape} for '{name}'")
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise OptimizerError(
                f"non-finite gradient for {params.part} parameter '{name}' "
                f"({bad} of {g.size} entries); update aborted")

    state.step += 1
    t_step = state.step
    bc1 = 1.0 - config.beta1 ** t_step
    bc2 = 1.0 - config.beta2 ** t_step
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else g
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + config.eps
        p.data -= config.learning_rate * (m / bc1) / denom
