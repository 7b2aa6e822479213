"""CNN + GRU gesture recognizer: feature extractor G, recognizer head, loss, checkpoints."""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from rfuda import rng as rngs
from rfuda.dataset import VERSION_F64, decode_tensor, encode_tensor
from rfuda.errors import ConfigError, DimensionError, FormatError, UsageError
from rfuda.tensor import (
    EVAL,
    GRU_GATES,
    RngArg,
    Tensor,
    as_tensor,
    conv2d,
    dense,
    dropout,
    gru_step,
    log,
    max_pool2d,
    reduce_sum,
    relu,
    reshape,
    softmax,
    softplus,
    stack,
    take,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rfuda-checkpoint"


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 12
    frames: int = 12
    class_count: int = 6
    conv_kernels: int = 8
    kernel_size: int = 3
    pool: int = 2
    dense_widths: tuple[int, int] = (64, 32)
    gru_hidden: int = 32
    head_width: int = 32
    dropout_extractor: float = 0.3
    dropout_head: float = 0.5

    def validate(self) -> None:
        if self.grid < 2 or self.frames < 1 or self.class_count < 1:
            raise ConfigError(f"bad geometry N={self.grid}, T={self.frames}, C={self.class_count}")
        if not 1 <= self.kernel_size <= self.grid:
            raise ConfigError(f"kernel_size {self.kernel_size} must be in [1, {self.grid}]")
        conv_out = self.grid - self.kernel_size + 1
        if self.pool < 1 or conv_out % self.pool:
            raise ConfigError(f"pool {self.pool} must divide the conv output size {conv_out}")
        if len(self.dense_widths) != 2 or min(self.dense_widths) < 1:
            raise ConfigError(f"dense_widths must be two positive widths, got {self.dense_widths}")
        if min(self.conv_kernels, self.gru_hidden, self.head_width) < 1:
            raise ConfigError("layer widths must be positive")
        for name in ("dropout_extractor", "dropout_head"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")

    @property
    def pooled(self) -> int:
        return (self.grid - self.kernel_size + 1) // self.pool

    @property
    def flat_width(self) -> int:
        return self.conv_kernels * self.pooled * self.pooled

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_widths"] = list(self.dense_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown architecture keys {sorted(unknown)}", 0)
        d = dict(d)
        if "dense_widths" in d:
            d["dense_widths"] = tuple(d["dense_widths"])
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _glorot(g: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-a, a, size=shape)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    k, c = config.kernel_size, config.conv_kernels
    d1, d2 = config.dense_widths
    h = config.gru_hidden
    shapes = {
        "conv.weight": (c, 1, k, k),
        "conv.bias": (c,),
        "dense1.weight": (d1, config.flat_width),
        "dense1.bias": (d1,),
        "dense2.weight": (d2, d1),
        "dense2.bias": (d2,),
    }
    for gate in GRU_GATES:
        shapes[f"gru.w_{gate}"] = (h, d2)
        shapes[f"gru.u_{gate}"] = (h, h)
        shapes[f"gru.b_{gate}"] = (h,)
    shapes["head.weight"] = (config.head_width, h)
    shapes["head.bias"] = (config.head_width,)
    shapes["out.weight"] = (config.class_count, config.head_width)
    shapes["out.bias"] = (config.class_count,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights and kernels, zero biases."""
    g = rngs.stream(seed, "init")
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias") or ".b_" in name:
            data = np.zeros(shape)
        elif name == "conv.weight":
            k2 = config.kernel_size ** 2
            data = _glorot(g, shape, shape[1] * k2, shape[0] * k2)
        else:
            data = _glorot(g, shape, shape[1], shape[0])
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class RfNet:
    """Architecture config plus named parameters (Θ, W_z, b_z, output layer)."""

    def __init__(self, config: ModelConfig, params: Optional[dict[str, Tensor]] = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = parameter_shapes(config)
        if list(self.params) != list(expected):
            raise UsageError(f"parameter names {list(self.params)} do not match the architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"parameter {self.params[name].shape}, expected {shape}", axis=name)

    def gru(self) -> dict[str, Tensor]:
        return {name[len("gru."):]: p for name, p in self.params.items() if name.startswith("gru.")}

    def copy(self) -> "RfNet":
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        return RfNet(self.config, params)


# ----------------------------------------------------------------------
# Forward pass
# ----------------------------------------------------------------------

def _per_sample(rng: Optional[RngArg], count: int) -> Optional[Sequence[np.random.Generator]]:
    if rng is None or not isinstance(rng, np.random.Generator):
        return rng
    if count != 1:
        raise UsageError("a batch forward needs one random stream per sample")
    return [rng]


def extract_features(frames, net: RfNet, mode: str, rng: Optional[RngArg] = None) -> Tensor:
    """Z: final GRU state over per-frame CNN features.

    ``frames`` is ``[T, N, N]`` (one sample, one stream) or ``[S, T, N, N]``
    (one stream per sample). Per frame: conv -> relu -> max-pool -> dropout
    -> flatten -> dense+relu -> dense+relu gives U_t; the GRU consumes U_1..U_T.
    """
    cfg, p = net.config, net.params
    x = as_tensor(frames)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] < 1:
        raise DimensionError(f"frames must be [T, N, N] or [S, T, N, N], got {x.shape}", axis="T")
    if x.shape[2:] != (cfg.grid, cfg.grid):
        raise DimensionError(
            f"frame shape {x.shape[2:]} does not match configured {cfg.grid}x{cfg.grid}", axis="N"
        )
    s, t = x.shape[:2]
    streams = _per_sample(rng, s)

    h = conv2d(reshape(x, (s * t, 1, cfg.grid, cfg.grid)), p["conv.weight"], p["conv.bias"])
    h = max_pool2d(relu(h), cfg.pool)
    h = dropout(reshape(h, (s, t) + h.shape[1:]), cfg.dropout_extractor, streams, mode)
    h = reshape(h, (s, t, cfg.flat_width))
    h = relu(dense(h, p["dense1.weight"], p["dense1.bias"]))
    u = relu(dense(h, p["dense2.weight"], p["dense2.bias"]))

    gru = net.gru()
    state = Tensor(np.zeros((s, cfg.gru_hidden)))
    for step in range(t):
        state = gru_step(take(u, (slice(None), step)), state, gru)
    return take(state, 0) if single else state


def recognize(z: Tensor, net: RfNet, mode: str, rng: Optional[RngArg] = None) -> Tensor:
    """ŷ = softmax(out(softplus(W_z · dropout(Z) + b_z)))."""
    cfg, p = net.config, net.params
    h = dropout(z, cfg.dropout_head, rng, mode)
    h = softplus(dense(h, p["head.weight"], p["head.bias"]))
    return softmax(dense(h, p["out.weight"], p["out.bias"]), axis=-1)


@dataclass
class PredictionBatch:
    """Rows ordered labeled ∥ unlabeled ∥ augmented."""

    probs: Tensor
    labeled_count: int
    unlabeled_count: int

    @property
    def labeled(self) -> Tensor:
        return take(self.probs, slice(0, self.labeled_count))

    @property
    def unlabeled(self) -> Tensor:
        b = self.labeled_count
        return take(self.probs, slice(b, b + self.unlabeled_count))

    @property
    def augmented(self) -> Tensor:
        return take(self.probs, slice(self.labeled_count + self.unlabeled_count, None))


def forward_batch(inputs, net: RfNet, mode: str, rng: Optional[Sequence[np.random.Generator]],
                  labeled_count: int, unlabeled_count: int = 0, per_sample: bool = False) -> PredictionBatch:
    """One pass over ``X_in = X^l ∥ X^u ∥ X^u_aug``; ``rng`` holds one stream per row.

    With ``per_sample`` every row goes through its own single-sample forward
    and the rows are stacked, so each row is bit-identical to a lone call.
    """
    x = np.asarray(inputs, dtype=np.float64)
    expected = labeled_count + 2 * unlabeled_count
    if x.shape[0] != expected:
        raise UsageError(
            f"batch has {x.shape[0]} rows; partitions need {labeled_count} + 2x{unlabeled_count} = {expected}"
        )
    if not per_sample:
        z = extract_features(x, net, mode, rng)
        return PredictionBatch(recognize(z, net, mode, rng), labeled_count, unlabeled_count)
    streams = rng if rng is not None else [None] * len(x)
    if len(streams) != len(x):
        raise DimensionError(f"{len(streams)} random streams for {len(x)} rows", axis="batch")
    rows = [recognize(extract_features(x[i], net, mode, g), net, mode, g) for i, g in enumerate(streams)]
    return PredictionBatch(stack(rows), labeled_count, unlabeled_count)


def predict(net: RfNet, frames: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Eval-mode probabilities ``[S, C]`` for a stack of samples, no tape."""
    frames = np.asarray(frames, dtype=np.float64)
    out = [
        recognize(extract_features(frames[i:i + chunk], net, EVAL), net, EVAL).data
        for i in range(0, len(frames), chunk)
    ]
    return np.concatenate(out) if out else np.zeros((0, net.config.class_count))


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------

def one_hot(labels: Sequence[int], class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def classification_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """L_a = -(1/B) Σ_i Σ_c y_ic ln ŷ_ic, log clamped at ln(1e-12)."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise DimensionError(f"targets {targets.shape} vs predictions {probs.shape}", axis="C")
    is_binary = np.all((targets == 0.0) | (targets == 1.0))
    if not is_binary or not np.all(targets.sum(axis=1) == 1.0):
        raise UsageError("classification targets must be one-hot rows")
    rows = targets.shape[0]
    if rows == 0:
        raise UsageError("classification loss needs at least one labeled row")
    return reduce_sum(log(probs) * targets) * (-1.0 / rows)


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(net: RfNet, path: Union[str, Path]) -> None:
    """One JSON manifest line, then one f64 container record per parameter."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch": net.config.to_dict(),
        "arch_hash": net.config.digest(),
        "params": [[name, list(p.shape)] for name, p in net.params.items()],
    }
    line = json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        for p in net.params.values():
            fh.write(encode_tensor(p.data, VERSION_F64))


def load_checkpoint(path: Union[str, Path]) -> RfNet:
    buf = Path(path).read_bytes()
    newline = buf.find(b"\n")
    if newline < 0:
        raise FormatError("missing manifest line", len(buf), str(path))
    try:
        manifest = json.loads(buf[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest line ({exc})", 0, str(path)) from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"not a checkpoint (format={manifest.get('format')!r})", 0, str(path))
    config = ModelConfig.from_dict(manifest["arch"])
    if config.digest() != manifest.get("arch_hash"):
        raise FormatError("architecture hash does not match the manifest", 0, str(path))

    offset = newline + 1
    params = {}
    for name, shape in manifest["params"]:
        start = offset
        data, offset = decode_tensor(buf, offset, str(path))
        if list(data.shape) != list(shape):
            raise FormatError(f"parameter '{name}' has shape {data.shape}, manifest says {shape}", start, str(path))
        params[name] = Tensor(data, requires_grad=True, name=name)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset, str(path))
    logger.info("loaded checkpoint %s (%d parameters)", path, len(params))
    return RfNet(config, params)
