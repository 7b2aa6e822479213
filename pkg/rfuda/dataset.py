"""Domain-tagged gesture samples, the RFGT tensor container, and leave-one-out splits.

Container layout (all integers little-endian u32)::

    "RFGT" | version | rank | dim_0 .. dim_{rank-1} | payload (row-major)

Version 1 stores an f32 payload (datasets), version 2 an f64 payload
(checkpoints). Sample metadata lives in ``manifest.csv``, never in the
tensor file.
"""

import csv
import dataclasses
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

from rfuda.errors import FormatError, LoadError, UsageError

logger = logging.getLogger(__name__)

MAGIC = b"RFGT"
VERSION_F32 = 1
VERSION_F64 = 2
_PAYLOAD_DTYPES = {VERSION_F32: np.dtype("<f4"), VERSION_F64: np.dtype("<f8")}
_MAX_RANK = 8

UNLABELED = -1
FACTORS = ("environment", "subject", "location", "orientation")
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("id", "file", "label") + FACTORS

PathLike = Union[str, Path]

_SAFE_ID = re.compile(r"^[\w.-]+$", re.ASCII)


@dataclass(frozen=True)
class DomainTag:
    environment: str
    subject: str
    location: str
    orientation: str

    def __post_init__(self):
        for factor in FACTORS:
            if not getattr(self, factor):
                raise UsageError(f"domain factor '{factor}' must be non-empty")

    @classmethod
    def unknown(cls) -> "DomainTag":
        return cls("unknown", "unknown", "unknown", "unknown")

    def value(self, factor: str) -> str:
        if factor not in FACTORS:
            raise UsageError(f"unknown domain factor '{factor}'; expected one of {', '.join(FACTORS)}")
        return getattr(self, factor)

    def __str__(self):
        return "/".join(getattr(self, f) for f in FACTORS)


@dataclass(eq=False)
class GestureSample:
    id: str
    frames: np.ndarray
    label: int = UNLABELED
    domain: DomainTag = field(default_factory=DomainTag.unknown)

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        frames.setflags(write=False)
        self.frames = frames

    @property
    def labeled(self) -> bool:
        return self.label != UNLABELED

    def validate(self, class_count: Optional[int] = None) -> None:
        f = self.frames
        if f.ndim != 3 or f.shape[0] < 1 or f.shape[1] < 2 or f.shape[1] != f.shape[2]:
            raise LoadError(f"sample '{self.id}': frames must be [T, N, N] with T>=1, N>=2, got {f.shape}")
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise LoadError(f"sample '{self.id}': frames must be finite and non-negative")
        if self.label != UNLABELED and (self.label < 0 or (class_count is not None and self.label >= class_count)):
            raise LoadError(f"sample '{self.id}': label {self.label} outside [0, {class_count})")

    def __eq__(self, other):
        if not isinstance(other, GestureSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.domain == other.domain
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class Dataset:
    samples: list[GestureSample]
    class_count: int
    grid: int = 0
    frames: int = 0

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise LoadError(f"duplicate sample id '{s.id}'")
            seen.add(s.id)
            s.validate(self.class_count)
            t, n, _ = s.frames.shape
            if not self.grid:
                self.grid, self.frames = n, t
            elif (n, t) != (self.grid, self.frames):
                raise LoadError(
                    f"sample '{s.id}' has geometry N={n}, T={t}; dataset is N={self.grid}, T={self.frames}"
                )

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[GestureSample]:
        return iter(self.samples)

    def labeled(self) -> list[GestureSample]:
        return [s for s in self.samples if s.labeled]

    def unlabeled(self) -> list[GestureSample]:
        return [s for s in self.samples if not s.labeled]

    def subset(self, samples: Sequence[GestureSample]) -> "Dataset":
        return Dataset(list(samples), self.class_count, self.grid, self.frames)

    def class_counts(self) -> np.ndarray:
        return np.bincount([s.label for s in self.labeled()], minlength=self.class_count)


# ----------------------------------------------------------------------
# Tensor container
# ----------------------------------------------------------------------

def encode_tensor(array: np.ndarray, version: int = VERSION_F32) -> bytes:
    if version not in _PAYLOAD_DTYPES:
        raise UsageError(f"unsupported container version {version}")
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > _MAX_RANK or 0 in array.shape:
        raise UsageError(f"cannot encode tensor of shape {array.shape}")
    header = MAGIC + struct.pack(f"<II{array.ndim}I", version, array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[version]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, path: Optional[str] = None) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns ``(array, end_offset)``."""
    def need(n: int, what: str):
        if len(buf) - offset < n:
            raise FormatError(f"truncated {what}: need {n} bytes, found {len(buf) - offset}", len(buf), path)

    start = offset
    need(4, "magic")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {MAGIC!r}", offset, path)
    offset += 4
    need(4, "version")
    (version,) = struct.unpack_from("<I", buf, offset)
    if version not in _PAYLOAD_DTYPES:
        raise FormatError(f"unsupported version {version}", offset, path)
    offset += 4
    need(4, "rank")
    (rank,) = struct.unpack_from("<I", buf, offset)
    if not 1 <= rank <= _MAX_RANK:
        raise FormatError(f"rank {rank} outside [1, {_MAX_RANK}]", offset, path)
    offset += 4
    need(4 * rank, "dimensions")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError(f"dimension {i} is zero", offset + 4 * i, path)
    offset += 4 * rank
    dtype = _PAYLOAD_DTYPES[version]
    size = int(np.prod(dims)) * dtype.itemsize
    need(size, "payload")
    data = np.frombuffer(buf, dtype=dtype, count=size // dtype.itemsize, offset=offset)
    logger.debug("decoded %s tensor %s at offset %d", dtype, dims, start)
    return data.astype(np.float64).reshape(dims), offset + size


def write_tensor(path: PathLike, array: np.ndarray, version: int = VERSION_F32) -> None:
    Path(path).write_bytes(encode_tensor(array, version))


def read_tensor(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf, path=str(path))
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end, str(path))
    return array


def write_sample(sample: GestureSample, path: PathLike) -> None:
    write_tensor(path, sample.frames, VERSION_F32)


def read_sample(path: PathLike, sample_id: Optional[str] = None, label: int = UNLABELED,
                domain: Optional[DomainTag] = None) -> GestureSample:
    """Frames come from the file; metadata from the arguments (normally a manifest row)."""
    frames = read_tensor(path)
    if frames.ndim != 3:
        raise LoadError(f"expected a rank-3 [T, N, N] tensor, got shape {frames.shape}", str(path))
    return GestureSample(sample_id or Path(path).stem, frames, label, domain or DomainTag.unknown())


# ----------------------------------------------------------------------
# Manifest-backed datasets
# ----------------------------------------------------------------------

def load_dataset(directory: PathLike, class_count: Optional[int] = None) -> Dataset:
    """Load ``manifest.csv`` and the tensor files it references.

    ``class_count`` defaults to one more than the largest label present.
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise LoadError("manifest not found", str(manifest))

    samples = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise LoadError(f"header must be exactly {','.join(MANIFEST_HEADER)}", str(manifest))
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise LoadError(f"line {line_no}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}", str(manifest))
            sample_id, file_name, label_text, *factors = (c.strip() for c in row)
            try:
                label = int(label_text)
            except ValueError:
                raise LoadError(f"line {line_no}: label '{label_text}' is not an integer", str(manifest)) from None
            if label < UNLABELED:
                raise LoadError(f"line {line_no}: label {label} is negative", str(manifest))
            tensor_path = directory / file_name
            if not tensor_path.is_file():
                raise LoadError(f"line {line_no}: tensor file missing", str(tensor_path))
            samples.append(read_sample(tensor_path, sample_id, label, DomainTag(*factors)))

    if class_count is None:
        class_count = max((s.label for s in samples), default=-1) + 1
    dataset = Dataset(samples, class_count)
    logger.info(
        "loaded %d samples (%d labeled) from %s, N=%d T=%d C=%d",
        len(dataset), len(dataset.labeled()), directory, dataset.grid, dataset.frames, class_count,
    )
    return dataset


def _file_name(sample: GestureSample, index: int) -> str:
    stem = sample.id if _SAFE_ID.match(sample.id) else f"sample_{index:06d}"
    return f"tensors/{stem}.rfgt"


def save_dataset(dataset: Dataset, directory: PathLike) -> Path:
    """Write tensors plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for i, s in enumerate(dataset.samples):
            name = _file_name(s, i)
            write_sample(s, directory / name)
            writer.writerow([s.id, name, s.label] + [s.domain.value(f) for f in FACTORS])
    return manifest


# ----------------------------------------------------------------------
# Leave-one-domain-out
# ----------------------------------------------------------------------

class DomainSplit(NamedTuple):
    source: Dataset
    target: Dataset
    target_truth: np.ndarray  # labels aligned with target.samples; evaluation only


def domain_values(dataset: Dataset, factor: str) -> list[str]:
    if factor not in FACTORS:
        raise UsageError(f"unknown domain factor '{factor}'; expected one of {', '.join(FACTORS)}")
    return sorted({s.domain.value(factor) for s in dataset})


def split_leave_one_out(dataset: Dataset, factor: str, held_value: str) -> DomainSplit:
    """Hold out every sample whose ``factor`` equals ``held_value`` as the unlabeled target."""
    values = domain_values(dataset, factor)
    if held_value not in values:
        raise UsageError(
            f"{factor} '{held_value}' does not occur in the dataset; available: {', '.join(values) or 'none'}"
        )
    source, target, truth = [], [], []
    for s in dataset:
        if s.domain.value(factor) == held_value:
            target.append(dataclasses.replace(s, label=UNLABELED))
            truth.append(s.label)
        else:
            source.append(s)
    if any(not s.labeled for s in source):
        logger.warning("source split contains %d unlabeled samples; they are ignored for training",
                       sum(not s.labeled for s in source))
    logger.info("split on %s=%s: %d source, %d target", factor, held_value, len(source), len(target))
    return DomainSplit(dataset.subset(source), dataset.subset(target), np.array(truth, dtype=np.int64))
