"""Central finite-difference gradient checks against the tape."""

from typing import Callable, Sequence

import numpy as np

from rfuda.tensor import Tape, Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        plus = f()
        x[idx] = orig - eps
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(build_loss: Callable[[], Tensor], inputs: Sequence[Tensor],
                    eps: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``build_loss`` must recompute the scalar loss from ``inputs`` each call
    and be deterministic.
    """
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    def value() -> float:
        return float(build_loss().data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(value, t.data, eps)))
    return worst
