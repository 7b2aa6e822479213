"""Run configuration: flat ``key = value`` files with ``--set`` overrides.

Every key is a field of :class:`RunConfig`; docs/CONFIG.md documents them.
"""

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

from rfuda.augment import AugmentMode, AugmentPolicy
from rfuda.dataset import FACTORS
from rfuda.errors import ConfigError
from rfuda.model import ModelConfig
from rfuda.synth import SynthSpec
from rfuda.uda import TrainConfig

RESOLVED_NAME = "config.resolved"

PRESETS = {
    "wifi": {"tau0": 0.92, "eta_c": 0.92},
    "radar": {"tau0": 0.95, "eta_c": 0.95},
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # data
    data_dir: Optional[str] = None
    synth: bool = False
    class_count: int = 0  # 0: infer from the data
    split_factor: str = "orientation"
    held_value: str = "o1"
    out_dir: str = "runs/latest"
    checkpoint: Optional[str] = None
    preset: Optional[str] = None

    # training
    batch_size: int = 32
    mu: int = 1
    tau0: float = 0.92
    tau_step: float = 0.001
    tau_max: float = 0.99
    lambda_u: float = 1.0
    eta_c: float = 0.005
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    augment_mode: str = "both"
    erase_cells: Optional[int] = None   # m; empty: ceil(0.1 N^2)
    erase_frames: Optional[int] = None  # q; empty: ceil(0.1 T)
    lc_divisor: str = "pseudo_count"
    clean_pseudo_forward: bool = False
    per_sample_forward: bool = False
    prefetch: bool = True
    check_numerics: bool = False

    # model
    conv_kernels: int = 8
    kernel_size: int = 3
    pool: int = 2
    dense_widths: tuple[int, ...] = (64, 32)
    gru_hidden: int = 32
    head_width: int = 32
    dropout_extractor: float = 0.3
    dropout_head: float = 0.5

    # synthetic data
    synth_grid: int = 12
    synth_frames: int = 12
    synth_environments: int = 2
    synth_subjects: int = 4
    synth_locations: int = 5
    synth_orientations: int = 4
    synth_samples_per_cell: int = 1
    synth_radius: float = 0.4
    synth_location_shift: float = 0.75
    synth_orientation_step: float = 15.0
    synth_orientation_spread: float = 7.5
    synth_subject_speed: float = 0.5
    synth_subject_amplitude: float = 0.3
    synth_environment_noise: float = 0.15
    synth_noise: float = 0.02
    synth_jitter: float = 0.3
    synth_blob_sigma: float = 1.0
    synth_peak_amplitude: float = 1.0

    # ablation
    disable_lc: bool = False
    disable_augment: bool = False
    source_only: bool = False
    threshold_sweep: tuple[float, ...] = ()
    eta_sweep: tuple[float, ...] = ()
    augment_sweep: tuple[str, ...] = ()
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    held_values: tuple[str, ...] = ()  # empty: held_value only; "all": every value

    # ------------------------------------------------------------------
    # Derived configs
    # ------------------------------------------------------------------

    def validate_data_source(self) -> None:
        if bool(self.data_dir) == bool(self.synth):
            raise ConfigError("exactly one data source is required: set data_dir or synth = true")
        if self.split_factor not in FACTORS:
            raise ConfigError(f"split_factor must be one of {', '.join(FACTORS)}, got {self.split_factor!r}")

    def augment_policy(self, grid: int, frames: int) -> AugmentPolicy:
        try:
            mode = AugmentMode(self.augment_mode)
        except ValueError:
            choices = ", ".join(m.value for m in AugmentMode)
            raise ConfigError(f"augment_mode must be one of {choices}, got {self.augment_mode!r}") from None
        default = AugmentPolicy.default_for(grid, frames, mode)
        policy = AugmentPolicy(
            m=default.m if self.erase_cells is None else self.erase_cells,
            q=default.q if self.erase_frames is None else self.erase_frames,
            mode=mode,
        )
        policy.validate(grid, frames)
        return policy

    def train_config(self, grid: int, frames: int) -> TrainConfig:
        cfg = TrainConfig(
            batch_size=self.batch_size, mu=self.mu, tau0=self.tau0, tau_step=self.tau_step,
            tau_max=self.tau_max, lambda_u=self.lambda_u, eta_c=self.eta_c, lr=self.lr,
            momentum=self.momentum, epochs=self.epochs, seed=self.seed,
            augment=self.augment_policy(grid, frames), lc_divisor=self.lc_divisor,
            clean_pseudo_forward=self.clean_pseudo_forward, per_sample_forward=self.per_sample_forward,
            prefetch=self.prefetch,
            check_numerics=self.check_numerics,
        )
        cfg.validate()
        return cfg

    def model_config(self, grid: int, frames: int, class_count: int) -> ModelConfig:
        if len(self.dense_widths) != 2:
            raise ConfigError(f"dense_widths needs two widths, got {self.dense_widths}")
        cfg = ModelConfig(
            grid=grid, frames=frames, class_count=class_count, conv_kernels=self.conv_kernels,
            kernel_size=self.kernel_size, pool=self.pool, dense_widths=tuple(self.dense_widths),
            gru_hidden=self.gru_hidden, head_width=self.head_width,
            dropout_extractor=self.dropout_extractor, dropout_head=self.dropout_head,
        )
        cfg.validate()
        return cfg

    def synth_spec(self) -> SynthSpec:
        kwargs = {
            f.name[len("synth_"):]: getattr(self, f.name)
            for f in fields(self) if f.name.startswith("synth_")
        }
        spec = SynthSpec(class_count=self.class_count or 6, **kwargs)
        spec.validate()
        return spec

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{name} = {format_value(getattr(self, name))}" for name in sorted(_field_types())]
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------

def _field_types() -> dict[str, type]:
    return typing.get_type_hints(RunConfig)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(key: str, text: str, hint, where: str = ""):
    """Convert ``text`` to the type named by ``hint``."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    text = text.strip()
    try:
        if origin is Union and type(None) in args:
            inner = next(a for a in args if a is not type(None))
            return None if text == "" or text.lower() == "none" else coerce(key, text, inner, where)
        if origin is tuple:
            item = args[0]
            return tuple(coerce(key, part, item, where) for part in text.split(",") if part.strip())
        if hint is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for '{key}': {exc}") from None


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    """``(key, value, location)`` triples from ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip(), f"{source}:{line_no}: "))
    return pairs


def build_config(pairs: Sequence[tuple[str, str, str]]) -> RunConfig:
    """Apply pairs in order on top of the defaults; a preset applies before any key."""
    types = _field_types()
    values = {}
    for key, value, where in pairs:
        if key not in types:
            raise ConfigError(f"{where}unknown key '{key}'")
        values[key] = coerce(key, value, types[key], where)

    config = RunConfig()
    preset = values.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {', '.join(PRESETS)}, got {preset!r}")
        config = config.replace(**PRESETS[preset])
    return config.replace(**values)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                out_dir: Optional[str] = None) -> RunConfig:
    """Config file, then ``--set key=value`` overrides, then ``--out``."""
    pairs = []
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        pairs.extend(parse_pairs(text, str(path)))
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip(), f"--set #{i}: "))
    if out_dir is not None:
        pairs.append(("out_dir", out_dir, "--out: "))
    return build_config(pairs)
