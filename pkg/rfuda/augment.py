"""Feature Erasing and Time Erasing for ``[T, N, N]`` RF tensors."""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from rfuda.errors import ConfigError


class AugmentMode(str, Enum):
    FEATURE_ONLY = "feature_only"
    TIME_ONLY = "time_only"
    BOTH = "both"
    EITHER = "either"  # one of the two, chosen per sample
    NONE = "none"


@dataclass(frozen=True)
class AugmentPolicy:
    m: int
    q: int
    mode: AugmentMode = AugmentMode.BOTH

    @classmethod
    def default_for(cls, grid: int, frames: int, mode: AugmentMode = AugmentMode.BOTH) -> "AugmentPolicy":
        """Erase about 10% of cells and 10% of frames."""
        q = min(math.ceil(0.1 * frames), frames - 1)
        return cls(m=math.ceil(0.1 * grid * grid), q=q, mode=AugmentMode(mode))

    def validate(self, grid: int, frames: int) -> None:
        if not 0 <= self.m <= grid * grid:
            raise ConfigError(f"feature erase count m={self.m} outside [0, {grid * grid}]")
        if not 0 <= self.q < frames:
            raise ConfigError(f"time erase count q={self.q} outside [0, {frames})")


def feature_erase(sample: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Zero ``m`` distinct spatial cells across every frame; input is not modified."""
    frames, rows, cols = sample.shape
    if not 0 <= m <= rows * cols:
        raise ConfigError(f"feature erase count m={m} outside [0, {rows * cols}]")
    out = sample.copy()
    if m:
        cells = rng.choice(rows * cols, size=m, replace=False)
        out.reshape(frames, rows * cols)[:, cells] = 0.0
    return out


def time_erase(sample: np.ndarray, q: int, rng: np.random.Generator) -> np.ndarray:
    """Zero ``q`` distinct whole frames; input is not modified."""
    frames = sample.shape[0]
    if not 0 <= q < frames:
        raise ConfigError(f"time erase count q={q} outside [0, {frames})")
    out = sample.copy()
    if q:
        out[rng.choice(frames, size=q, replace=False)] = 0.0
    return out


def augment(sample: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    mode = AugmentMode(policy.mode)
    if mode is AugmentMode.NONE:
        return sample.copy()
    if mode is AugmentMode.EITHER:
        mode = AugmentMode.FEATURE_ONLY if rng.random() < 0.5 else AugmentMode.TIME_ONLY
    out = sample
    if mode in (AugmentMode.FEATURE_ONLY, AugmentMode.BOTH):
        out = feature_erase(out, policy.m, rng)
    if mode in (AugmentMode.TIME_ONLY, AugmentMode.BOTH):
        out = time_erase(out, policy.q, rng)
    return out
