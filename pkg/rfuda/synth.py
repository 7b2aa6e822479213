"""Seeded synthetic RF gesture generator with a four-factor domain grid.

Each class is a parametric 2-D trajectory (four line sweeps and two arcs);
every frame renders a Gaussian blob of energy at the trajectory point.
Domain factors perturb the rendering:

  * location     -> translation of the whole trajectory
  * orientation  -> rotation about the grid centre, with a per-sample pose
                    spread so neighbouring orientations meet
  * subject      -> time warp (speed) and amplitude scaling
  * environment  -> additive static noise floor with a fixed spatial pattern
"""

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from rfuda import rng as rngs
from rfuda.dataset import Dataset, DomainTag, GestureSample
from rfuda.errors import ConfigError

logger = logging.getLogger(__name__)

GESTURES = ("sweep_right", "sweep_left", "sweep_up", "sweep_down", "arc_cw", "arc_ccw")

_LOCATION_PATTERN = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 6
    grid: int = 12
    frames: int = 12
    environments: int = 2
    subjects: int = 4
    locations: int = 5
    orientations: int = 4
    samples_per_cell: int = 1
    radius: float = 0.4            # trajectory radius as a fraction of (N - 1)
    location_shift: float = 0.75   # cells per location step
    orientation_step: float = 15.0  # degrees between adjacent orientations
    orientation_spread: float = 7.5  # per-sample pose, uniform within +-spread degrees
    subject_speed: float = 0.5     # time-warp exponent spread across subjects
    subject_amplitude: float = 0.3  # amplitude drop from first to last subject
    environment_noise: float = 0.15  # peak of the static noise floor
    noise: float = 0.02            # per-sample random noise level
    jitter: float = 0.3            # per-sample start offset, cells
    blob_sigma: float = 1.0
    peak_amplitude: float = 1.0

    def validate(self) -> None:
        if not 1 <= self.class_count <= len(GESTURES):
            raise ConfigError(f"class_count must be in [1, {len(GESTURES)}], got {self.class_count}")
        if self.grid < 4 or self.frames < 2:
            raise ConfigError(f"synthetic geometry needs N>=4 and T>=2, got N={self.grid}, T={self.frames}")
        for name in ("environments", "subjects", "locations", "orientations", "samples_per_cell"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic {name} must be at least 1")
        if self.locations > len(_LOCATION_PATTERN):
            raise ConfigError(f"at most {len(_LOCATION_PATTERN)} synthetic locations are supported")
        if self.peak_amplitude <= 0 or self.blob_sigma <= 0:
            raise ConfigError("peak_amplitude and blob_sigma must be positive")
        if not 0 <= self.subject_amplitude < 1:
            raise ConfigError("subject_amplitude must be in [0, 1)")
        if min(self.noise, self.environment_noise, self.jitter, self.location_shift) < 0:
            raise ConfigError("noise, environment_noise, jitter and location_shift must be non-negative")
        if self.orientation_spread < 0:
            raise ConfigError("orientation_spread must be non-negative")
        span = self.orientation_step * (self.orientations - 1) + 2 * self.orientation_spread
        if self.class_count > 2 and span >= 90.0:
            # sweeps are 90 degrees apart: a wider span renders one class as another
            raise ConfigError(f"orientations span {span:g} degrees; sweep classes need less than 90")

    @property
    def cell_count(self) -> int:
        return self.environments * self.subjects * self.locations * self.orientations

    @property
    def sample_count(self) -> int:
        return self.class_count * self.samples_per_cell * self.cell_count


def _trajectory(gesture: int, progress: np.ndarray, radius: float) -> np.ndarray:
    """Offsets ``[T, 2]`` (row, col) from the grid centre."""
    s = progress
    sweep = radius * (2.0 * s - 1.0)
    zero = np.zeros_like(s)
    if gesture == 0:
        return np.stack([zero, sweep], axis=1)
    if gesture == 1:
        return np.stack([zero, -sweep], axis=1)
    if gesture == 2:
        return np.stack([-sweep, zero], axis=1)
    if gesture == 3:
        return np.stack([sweep, zero], axis=1)
    # arcs: left to right, over the top (cw) or under the bottom (ccw)
    theta = math.pi * (1.0 - s) if gesture == 4 else math.pi * (1.0 + s)
    return np.stack([-radius * np.sin(theta), radius * np.cos(theta)], axis=1)


def _environment_floor(spec: SynthSpec, seed: int, env: int) -> np.ndarray:
    if spec.environment_noise == 0:
        return np.zeros((spec.grid, spec.grid))
    g = rngs.stream(seed, "environment", env)
    coarse = g.random((4, 4))
    idx = np.minimum((np.arange(spec.grid) * 4) // spec.grid, 3)
    field = coarse[np.ix_(idx, idx)]
    return spec.environment_noise * field / field.max()


def _render(spec: SynthSpec, centres: np.ndarray, amplitude: float) -> np.ndarray:
    axis = np.arange(spec.grid, dtype=np.float64)
    dr = axis[None, :, None] - centres[:, 0, None, None]
    dc = axis[None, None, :] - centres[:, 1, None, None]
    return amplitude * np.exp(-(dr * dr + dc * dc) / (2.0 * spec.blob_sigma ** 2))


def render_sample(spec: SynthSpec, gesture: int, env: int, subject: int, location: int,
                  orientation: int, g: np.random.Generator, floor: np.ndarray) -> np.ndarray:
    """Frames ``[T, N, N]`` for one (class, domain) draw from stream ``g``."""
    t = np.arange(spec.frames) / (spec.frames - 1)
    mid_subject = (spec.subjects - 1) / 2.0
    warp = 1.0 + spec.subject_speed * ((subject - mid_subject) / max(mid_subject, 1.0))
    progress = t ** warp

    radius = spec.radius * (spec.grid - 1)
    offsets = _trajectory(gesture, progress, radius)
    start = g.uniform(-spec.jitter, spec.jitter, size=2)
    pose = g.uniform(-spec.orientation_spread, spec.orientation_spread)
    angle = math.radians(spec.orientation_step * (orientation - (spec.orientations - 1) / 2.0) + pose)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    offsets = offsets @ rot.T
    shift = np.array(_LOCATION_PATTERN[location], dtype=np.float64) * spec.location_shift
    centre = (spec.grid - 1) / 2.0
    centres = centre + offsets + shift + start
    if np.any(centres < 0) or np.any(centres > spec.grid - 1):
        raise ConfigError(
            f"trajectory of class {gesture} leaves the {spec.grid}x{spec.grid} grid "
            f"(location {location}, orientation {orientation}); reduce radius or shifts"
        )

    amplitude = spec.peak_amplitude * (
        1.0 - spec.subject_amplitude * subject / max(spec.subjects - 1, 1)
    )
    frames = _render(spec, centres, amplitude) + floor[None, :, :] * spec.peak_amplitude
    if spec.noise:
        frames = frames + spec.noise * spec.peak_amplitude * np.abs(g.standard_normal(frames.shape))
    # f32-representable so the on-disk dataset loads back bit-identical
    return np.clip(frames, 0.0, spec.peak_amplitude).astype(np.float32)


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Build the full (class x domain x repeat) grid; depends only on ``(spec, seed)``."""
    spec.validate()
    floors = [_environment_floor(spec, seed, e) for e in range(spec.environments)]
    samples = []
    cells = itertools.product(
        range(spec.environments), range(spec.subjects), range(spec.locations), range(spec.orientations)
    )
    for env, subject, location, orientation in cells:
        domain = DomainTag(f"e{env + 1}", f"s{subject + 1}", f"l{location + 1}", f"o{orientation + 1}")
        for gesture in range(spec.class_count):
            for rep in range(spec.samples_per_cell):
                sample_id = f"{domain.environment}-{domain.subject}-{domain.location}-{domain.orientation}-g{gesture}-r{rep}"
                g = rngs.stream(seed, "synth", sample_id)
                frames = render_sample(spec, gesture, env, subject, location, orientation, g, floors[env])
                samples.append(GestureSample(sample_id, frames, gesture, domain))
    logger.info("generated %d synthetic samples over %d domain cells", len(samples), spec.cell_count)
    return Dataset(samples, spec.class_count)
