import hashlib
import struct

import numpy as np
import pytest

from rfuda import rng as rngs
from rfuda.dataset import (
    MAGIC,
    MANIFEST_HEADER,
    UNLABELED,
    VERSION_F64,
    Dataset,
    DomainTag,
    GestureSample,
    decode_tensor,
    domain_values,
    encode_tensor,
    load_dataset,
    read_sample,
    read_tensor,
    save_dataset,
    split_leave_one_out,
    write_sample,
    write_tensor,
)
from rfuda.errors import FormatError, LoadError, UsageError


def _random_sample(g, sample_id, grid=4, frames=3, label=0, domain=None):
    data = g.random((frames, grid, grid)).astype(np.float32)
    return GestureSample(sample_id, data, label, domain or DomainTag("e1", "s1", "l1", "o1"))


def _write_manifest(directory, rows):
    lines = [",".join(MANIFEST_HEADER)] + [",".join(str(c) for c in row) for row in rows]
    (directory / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _digest(directory):
    h = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(directory)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


# ----------------------------------------------------------------------
# Tensor container
# ----------------------------------------------------------------------

def test_sample_round_trip(tmp_path):
    sample = _random_sample(rngs.stream(0), "a", label=2)
    path = tmp_path / "a.rfgt"
    write_sample(sample, path)
    assert read_sample(path, "a", 2, sample.domain) == sample


def test_hand_built_file(tmp_path):
    path = tmp_path / "one.rfgt"
    path.write_bytes(MAGIC + struct.pack("<IIIII", 1, 3, 1, 1, 1) + struct.pack("<f", 3.5))
    sample = read_sample(path)
    np.testing.assert_array_equal(sample.frames, [[[3.5]]])
    assert sample.id == "one" and sample.label == UNLABELED


def test_missing_payload_is_truncation(tmp_path):
    path = tmp_path / "short.rfgt"
    path.write_bytes(MAGIC + struct.pack("<IIIII", 1, 3, 2, 2, 2))
    with pytest.raises(FormatError, match="truncated payload") as exc:
        read_tensor(path)
    assert exc.value.offset == 24
    assert exc.value.path == str(path)


def test_bad_magic():
    with pytest.raises(FormatError) as exc:
        decode_tensor(b"RFGX" + struct.pack("<III", 1, 1, 1) + b"\0" * 4)
    assert exc.value.offset == 0


def test_bad_version():
    with pytest.raises(FormatError, match="version") as exc:
        decode_tensor(MAGIC + struct.pack("<III", 7, 1, 1) + b"\0" * 4)
    assert exc.value.offset == 4


def test_zero_dimension():
    with pytest.raises(FormatError, match="dimension 1") as exc:
        decode_tensor(MAGIC + struct.pack("<IIII", 1, 2, 3, 0))
    assert exc.value.offset == 16


def test_trailing_bytes(tmp_path):
    path = tmp_path / "t.rfgt"
    path.write_bytes(encode_tensor(np.ones(2)) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(path)


def test_f64_records_are_lossless(tmp_path):
    x = rngs.stream(1).standard_normal((3, 2))
    write_tensor(tmp_path / "x.rfgt", x, VERSION_F64)
    np.testing.assert_array_equal(read_tensor(tmp_path / "x.rfgt"), x)


def test_consecutive_records():
    buf = encode_tensor(np.ones(2)) + encode_tensor(np.zeros((1, 3)))
    first, end = decode_tensor(buf)
    second, end = decode_tensor(buf, end)
    assert first.shape == (2,) and second.shape == (1, 3)
    assert end == len(buf)


def test_sample_frames_are_read_only():
    sample = _random_sample(rngs.stream(2), "a")
    with pytest.raises(ValueError):
        sample.frames[0, 0, 0] = 1.0


# ----------------------------------------------------------------------
# Manifest datasets
# ----------------------------------------------------------------------

def test_empty_manifest(tmp_path):
    _write_manifest(tmp_path, [])
    dataset = load_dataset(tmp_path, class_count=6)
    assert len(dataset) == 0 and dataset.class_count == 6


def test_labeled_and_unlabeled_rows(tmp_path):
    g = rngs.stream(3)
    (tmp_path / "t").mkdir()
    write_sample(_random_sample(g, "a"), tmp_path / "t" / "a.rfgt")
    write_sample(_random_sample(g, "b"), tmp_path / "t" / "b.rfgt")
    _write_manifest(tmp_path, [
        ("a", "t/a.rfgt", 1, "e1", "s1", "l1", "o1"),
        ("b", "t/b.rfgt", -1, "e1", "s1", "l1", "o2"),
    ])
    dataset = load_dataset(tmp_path, class_count=3)
    assert [s.id for s in dataset.labeled()] == ["a"]
    assert [s.id for s in dataset.unlabeled()] == ["b"]
    assert dataset.samples[1].domain.orientation == "o2"


def test_mixed_geometry_rejected(tmp_path):
    g = rngs.stream(4)
    write_sample(_random_sample(g, "a", grid=6), tmp_path / "a.rfgt")
    write_sample(_random_sample(g, "b", grid=5), tmp_path / "b.rfgt")
    _write_manifest(tmp_path, [
        ("a", "a.rfgt", 0, "e1", "s1", "l1", "o1"),
        ("b", "b.rfgt", 0, "e1", "s1", "l1", "o1"),
    ])
    with pytest.raises(LoadError, match="geometry"):
        load_dataset(tmp_path)


def test_duplicate_id_rejected(tmp_path):
    write_sample(_random_sample(rngs.stream(5), "a"), tmp_path / "a.rfgt")
    _write_manifest(tmp_path, [("a", "a.rfgt", 0, "e1", "s1", "l1", "o1")] * 2)
    with pytest.raises(LoadError, match="duplicate"):
        load_dataset(tmp_path)


def test_missing_tensor_file(tmp_path):
    _write_manifest(tmp_path, [("a", "nope.rfgt", 0, "e1", "s1", "l1", "o1")])
    with pytest.raises(LoadError, match="nope.rfgt"):
        load_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(LoadError, match="manifest"):
        load_dataset(tmp_path)


def test_bad_header(tmp_path):
    (tmp_path / "manifest.csv").write_text("id,file,label\n", encoding="utf-8")
    with pytest.raises(LoadError, match="header"):
        load_dataset(tmp_path)


def test_label_outside_class_count(tmp_path):
    write_sample(_random_sample(rngs.stream(6), "a"), tmp_path / "a.rfgt")
    _write_manifest(tmp_path, [("a", "a.rfgt", 4, "e1", "s1", "l1", "o1")])
    with pytest.raises(LoadError, match="label 4"):
        load_dataset(tmp_path, class_count=3)


def test_class_count_inferred(tmp_path):
    write_sample(_random_sample(rngs.stream(7), "a"), tmp_path / "a.rfgt")
    _write_manifest(tmp_path, [("a", "a.rfgt", 4, "e1", "s1", "l1", "o1")])
    assert load_dataset(tmp_path).class_count == 5


def test_hundred_samples_survive_write_read_write(tmp_path):
    g = rngs.stream(8, "io")
    samples = [
        _random_sample(g, f"s{i:03d}", label=i % 6, domain=DomainTag(f"e{i % 2}", f"s{i % 3}", f"l{i % 5}", f"o{i % 4}"))
        for i in range(100)
    ]
    dataset = Dataset(samples, 6)
    save_dataset(dataset, tmp_path / "first")
    loaded = load_dataset(tmp_path / "first", class_count=6)
    assert loaded.samples == dataset.samples
    save_dataset(loaded, tmp_path / "second")
    assert _digest(tmp_path / "first") == _digest(tmp_path / "second")


# ----------------------------------------------------------------------
# Leave-one-domain-out
# ----------------------------------------------------------------------

def _grid_dataset():
    g = rngs.stream(9, "split")
    samples = []
    for o in range(1, 6):
        for label in range(3):
            for rep in range(2):
                domain = DomainTag("e1", f"s{rep}", "l1", f"o{o}")
                samples.append(_random_sample(g, f"o{o}-g{label}-r{rep}", label=label, domain=domain))
    return Dataset(samples, 3)


def test_split_is_a_partition():
    dataset = _grid_dataset()
    source, target, truth = split_leave_one_out(dataset, "orientation", "o5")
    assert {s.domain.orientation for s in source} == {"o1", "o2", "o3", "o4"}
    assert {s.domain.orientation for s in target} == {"o5"}
    assert len(source) + len(target) == len(dataset)
    assert {s.id for s in source}.isdisjoint(s.id for s in target)


def test_split_strips_target_labels_only():
    dataset = _grid_dataset()
    source, target, truth = split_leave_one_out(dataset, "orientation", "o5")
    assert all(s.label == UNLABELED for s in target)
    assert all(s.labeled for s in source)
    assert len(truth) == len(target)
    counts = source.class_counts() + np.bincount(truth, minlength=3)
    np.testing.assert_array_equal(counts, dataset.class_counts())


def test_split_keeps_the_original_intact():
    dataset = _grid_dataset()
    split_leave_one_out(dataset, "orientation", "o2")
    assert all(s.labeled for s in dataset)


def test_split_on_subject():
    source, target, _ = split_leave_one_out(_grid_dataset(), "subject", "s1")
    assert len(source) == len(target) == 15


def test_unknown_held_value():
    with pytest.raises(UsageError, match="o9"):
        split_leave_one_out(_grid_dataset(), "orientation", "o9")


def test_unknown_factor():
    with pytest.raises(UsageError):
        domain_values(_grid_dataset(), "room")


def test_domain_values_sorted():
    assert domain_values(_grid_dataset(), "orientation") == ["o1", "o2", "o3", "o4", "o5"]
