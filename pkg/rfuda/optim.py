"""SGD with momentum over named parameters."""

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from rfuda.errors import ConfigError, DimensionError, UsageError
from rfuda.tensor import Tensor


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], learning_rate: float,
                   momentum: float = 0.0) -> "SgdState":
        velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(learning_rate, momentum, velocity)


def gradients(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Collect ``grad`` buffers; parameters that received none count as zero."""
    return {
        name: p.grad if p.grad is not None else np.zeros_like(p.data)
        for name, p in params.items()
    }


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             state: SgdState) -> None:
    """``v <- momentum * v - lr * g``; ``p <- p + v``, in place, in name order."""
    for name, p in params.items():
        if name not in state.velocity:
            raise UsageError(f"no velocity buffer for parameter '{name}'")
        if name not in grads:
            raise UsageError(f"no gradient for parameter '{name}'")
        g = grads[name]
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(
                f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape}", axis=name
            )
        v *= state.momentum
        v -= state.learning_rate * g
        p.data += v
