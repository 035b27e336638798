import numpy as np
import pytest

from picl.dataset_io import (
    DatasetFormatError,
    file_hash,
    read_cloud,
    read_dataset,
    read_manifest,
    read_pair,
    write_cloud,
    write_dataset,
    write_pair,
)
from picl.icl_ice import CorruptionOp, build_label_bank, draw_mapping, make_ice_sample
from picl.shapes import gen_shape, part_ids
from picl.taskgen import StaticLabelMap, TaskKind, assemble_sample


def build_samples(n=12, n_points=96):
    samples = []
    label_map = StaticLabelMap.for_parts(part_ids("table") + part_ids("lamp"))
    kinds = ["sphere", "cube", "table", "lamp"]
    for i in range(n):
        q = gen_shape(kinds[i % 4], n_points, seed=100 + i)
        p = gen_shape(kinds[(i + 1) % 4], n_points, seed=200 + i)
        if i % 4 == 2:
            ql = gen_shape("table", n_points, seed=300 + i)
            pl = gen_shape("table", n_points, seed=400 + i)
            samples.append(
                assemble_sample(TaskKind("segmentation"), ql, pl, seed=i, label_map=label_map)
            )
        elif i % 4 == 3:
            samples.append(
                make_ice_sample(q, p, CorruptionOp("drop"), seeds=(i, i + 1), sample_seed=i)
            )
        else:
            task = TaskKind(("reconstruction", "denoising")[i % 2], 1 + i % 5)
            samples.append(assemble_sample(task, q, p, seed=i))
    return samples


def test_round_trip_equality(tmp_path):
    samples = build_samples()
    path = str(tmp_path / "data.pic")
    write_dataset(samples, path)
    loaded = read_dataset(path)
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert a == b


def test_rewrite_is_byte_identical(tmp_path):
    samples = build_samples(6)
    p1, p2 = str(tmp_path / "a.pic"), str(tmp_path / "b.pic")
    write_dataset(samples, p1)
    write_dataset(read_dataset(p1), p2)
    assert file_hash(p1) == file_hash(p2)
    assert open(p1 + ".manifest").read() == open(p2 + ".manifest").read()


def test_manifest_counts(tmp_path):
    samples = build_samples(12)
    path = str(tmp_path / "data.pic")
    write_dataset(samples, path, extra_manifest={"label_mode": "static"})
    manifest = read_manifest(path)
    total = sum(
        int(v) for k, v in manifest.items() if k.startswith("count.task.") and k.count(".") == 2
    )
    assert total == 12
    assert manifest["samples"] == "12"
    assert manifest["label_mode"] == "static"


def test_empty_dataset_valid(tmp_path):
    path = str(tmp_path / "empty.pic")
    write_dataset([], path)
    assert read_dataset(path) == []
    assert read_manifest(path)["samples"] == "0"


def test_truncated_file_parse_error(tmp_path):
    samples = build_samples(3)
    path = str(tmp_path / "data.pic")
    write_dataset(samples, path)
    raw = open(path, "rb").read()
    bad = str(tmp_path / "bad.pic")
    with open(bad, "wb") as fh:
        fh.write(raw[: len(raw) // 2])
    with pytest.raises(DatasetFormatError, match="byte"):
        read_dataset(bad)


def test_bad_magic(tmp_path):
    path = str(tmp_path / "junk.pic")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DatasetFormatError, match="magic"):
        read_dataset(path)


def test_trailing_bytes_rejected(tmp_path):
    samples = build_samples(2)
    path = str(tmp_path / "data.pic")
    write_dataset(samples, path)
    with open(path, "ab") as fh:
        fh.write(b"\x01")
    with pytest.raises(DatasetFormatError, match="trailing"):
        read_dataset(path)


def test_cloud_file_round_trip(tmp_path):
    cloud = gen_shape("chair", 128, seed=5)
    path = str(tmp_path / "c.picc")
    write_cloud(cloud, path)
    loaded = read_cloud(path)
    np.testing.assert_allclose(loaded.points, cloud.points, atol=1e-7)
    np.testing.assert_array_equal(loaded.labels, cloud.labels)
    assert loaded.category == "chair"


def test_pair_file_round_trip_with_mapping(tmp_path):
    cloud = gen_shape("lamp", 128, seed=6)
    bank = build_label_bank(8, seed=1)
    mapping = draw_mapping(bank, part_ids("lamp"), seed=2)
    from picl.icl_ice import encode_labels

    target = encode_labels(cloud, mapping)
    path = str(tmp_path / "p.picp")
    write_pair(TaskKind("segmentation"), cloud, target, path, mapping=mapping, seed=9)
    task, inp, tgt, loaded_mapping, seed = read_pair(path)
    assert task == TaskKind("segmentation")
    assert seed == 9
    np.testing.assert_allclose(inp.points, cloud.points, atol=1e-7)
    assert loaded_mapping is not None
    for part in mapping.parts:
        np.testing.assert_allclose(
            loaded_mapping.part_to_point[part],
            mapping.part_to_point[part].astype(np.float32),
        )
