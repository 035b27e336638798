"""Binary dataset, cloud and pair files, plus the text manifest sidecar.

Dataset layout (little-endian):
  magic "PIC1" | version u16 | sample count u32
  per sample:
    task id u8 | level u8 (0 = none) | N u16
    4 clouds, each N x 3 float32 (prompt input, prompt target,
                                  query input, query target)
    label flag u8: bitmask over the four clouds, ascending bit order,
                   each set bit followed by N x u16 labels
    seed u64

The manifest is a "key = value" UTF-8 sidecar at <path>.manifest holding
per-task/per-level counts and anything the binary format has no field
for (categories, label mode, global seed).
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from .geometry import PointCloud
from .taskgen import InContextSample, TaskKind

__all__ = [
    "DatasetFormatError",
    "write_dataset",
    "read_dataset",
    "read_manifest",
    "manifest_path",
    "write_cloud",
    "read_cloud",
    "write_pair",
    "read_pair",
    "file_hash",
]

_MAGIC = b"PIC1"
_VERSION = 1

_TASK_IDS = {"reconstruction": 0, "denoising": 1, "registration": 2, "segmentation": 3, "ice": 4}
_TASK_FROM_ID = {v: k for k, v in _TASK_IDS.items()}

_CLOUD_MAGIC = b"PICC"
_PAIR_MAGIC = b"PICP"


class DatasetFormatError(ValueError):
    """Raised on malformed files; carries the failing byte offset."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"malformed file at byte {offset}: {message}")
        self.offset = offset


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(self.pos, f"truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()


def _pack_points(points: np.ndarray) -> bytes:
    return points.astype("<f4").tobytes()


def _pack_labels(labels: np.ndarray) -> bytes:
    if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
        raise ValueError("labels must fit in u16 for serialization")
    return labels.astype("<u2").tobytes()


def manifest_path(path: str) -> str:
    return path + ".manifest"


def write_dataset(samples, path: str, extra_manifest: dict | None = None) -> None:
    """Serialize samples and write the manifest sidecar."""
    chunks = [_MAGIC, struct.pack("<HI", _VERSION, len(samples))]
    task_counts: dict = {}
    level_counts: dict = {}
    categories = []
    for sample in samples:
        task_counts[sample.task.kind] = task_counts.get(sample.task.kind, 0) + 1
        if sample.task.level is not None:
            key = (sample.task.kind, sample.task.level)
            level_counts[key] = level_counts.get(key, 0) + 1
        clouds = sample.clouds()
        n = sample.n_points
        chunks.append(
            struct.pack(
                "<BBH", _TASK_IDS[sample.task.kind], sample.task.level or 0, n
            )
        )
        for cloud in clouds:
            chunks.append(_pack_points(cloud.points))
        flag = 0
        blocks = []
        for bit, cloud in enumerate(clouds):
            if cloud.labels is not None:
                flag |= 1 << bit
                blocks.append(_pack_labels(cloud.labels))
        chunks.append(struct.pack("<B", flag))
        chunks.extend(blocks)
        chunks.append(struct.pack("<Q", sample.seed))
        categories.append(
            (sample.prompt_input.category or "", sample.query_input.category or "")
        )
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))

    lines = {
        "format": "PIC1",
        "version": str(_VERSION),
        "samples": str(len(samples)),
    }
    for kind in sorted(task_counts):
        lines[f"count.task.{kind}"] = str(task_counts[kind])
    for kind, level in sorted(level_counts):
        lines[f"count.task.{kind}.level.{level}"] = str(level_counts[(kind, level)])
    for i, (pc, qc) in enumerate(categories):
        if pc or qc:
            lines[f"sample.{i}.category"] = f"{pc},{qc}"
    if extra_manifest:
        for key, value in extra_manifest.items():
            lines[str(key)] = str(value)
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        for key in sorted(lines):
            fh.write(f"{key} = {lines[key]}\n")


def read_manifest(path: str) -> dict:
    """Parse a key/value manifest; returns {} if the sidecar is absent."""
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        return {}
    out = {}
    with open(mpath, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"manifest line without '=': {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def read_dataset(path: str):
    """Read samples back; categories are restored from the manifest."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(4, "magic")
    if magic != _MAGIC:
        raise DatasetFormatError(0, f"bad magic {magic!r}, expected {_MAGIC!r}")
    version, count = reader.unpack("HI", "header")
    if version != _VERSION:
        raise DatasetFormatError(4, f"unsupported version {version}")
    manifest = read_manifest(path)
    samples = []
    for i in range(count):
        task_id, level, n = reader.unpack("BBH", f"sample {i} header")
        if task_id not in _TASK_FROM_ID:
            raise DatasetFormatError(reader.pos - 4, f"unknown task id {task_id}")
        if n == 0:
            raise DatasetFormatError(reader.pos - 2, "sample with zero points")
        points = [
            reader.array("<f4", 3 * n, f"sample {i} cloud {j}").reshape(n, 3).astype(np.float64)
            for j in range(4)
        ]
        (flag,) = reader.unpack("B", f"sample {i} label flag")
        labels: list = [None, None, None, None]
        for bit in range(4):
            if flag & (1 << bit):
                labels[bit] = reader.array("<u2", n, f"sample {i} labels {bit}").astype(np.int64)
        (seed,) = reader.unpack("Q", f"sample {i} seed")
        cats = manifest.get(f"sample.{i}.category", ",").split(",")
        prompt_cat = cats[0] or None
        query_cat = (cats[1] if len(cats) > 1 else "") or None
        cat_by_cloud = (prompt_cat, prompt_cat, query_cat, query_cat)
        clouds = [
            PointCloud(points[j], labels[j], cat_by_cloud[j]) for j in range(4)
        ]
        task = TaskKind(_TASK_FROM_ID[task_id], level or None)
        samples.append(InContextSample(task, *clouds, seed=seed))
    if reader.pos != len(reader.data):
        raise DatasetFormatError(reader.pos, "trailing bytes after last sample")
    return samples


# ---------------------------------------------------------------------------
# Single-cloud and prompt-pair files (used by the inference command)
# ---------------------------------------------------------------------------

def _pack_cloud_block(cloud: PointCloud) -> bytes:
    n = len(cloud)
    parts = [struct.pack("<H", n), _pack_points(cloud.points)]
    if cloud.labels is not None:
        parts.append(struct.pack("<B", 1))
        parts.append(_pack_labels(cloud.labels))
    else:
        parts.append(struct.pack("<B", 0))
    cat = (cloud.category or "").encode("utf-8")
    parts.append(struct.pack("<H", len(cat)))
    parts.append(cat)
    return b"".join(parts)


def _read_cloud_block(reader: _Reader, what: str) -> PointCloud:
    (n,) = reader.unpack("H", f"{what} size")
    if n == 0:
        raise DatasetFormatError(reader.pos - 2, f"{what} with zero points")
    pts = reader.array("<f4", 3 * n, f"{what} points").reshape(n, 3).astype(np.float64)
    (flag,) = reader.unpack("B", f"{what} label flag")
    labels = reader.array("<u2", n, f"{what} labels").astype(np.int64) if flag else None
    (cat_len,) = reader.unpack("H", f"{what} category length")
    cat = reader.take(cat_len, f"{what} category").decode("utf-8") or None
    return PointCloud(pts, labels, cat)


def write_cloud(cloud: PointCloud, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_CLOUD_MAGIC + struct.pack("<H", _VERSION) + _pack_cloud_block(cloud))


def read_cloud(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != _CLOUD_MAGIC:
        raise DatasetFormatError(0, "bad cloud magic")
    (version,) = reader.unpack("H", "version")
    if version != _VERSION:
        raise DatasetFormatError(4, f"unsupported version {version}")
    cloud = _read_cloud_block(reader, "cloud")
    if reader.pos != len(reader.data):
        raise DatasetFormatError(reader.pos, "trailing bytes")
    return cloud


def write_pair(
    task: TaskKind,
    input_cloud: PointCloud,
    target_cloud: PointCloud,
    path: str,
    mapping=None,
    seed: int = 0,
) -> None:
    """Prompt-pair file: one task's (input, target) plus optional mapping."""
    parts = [
        _PAIR_MAGIC,
        struct.pack("<HBB", _VERSION, _TASK_IDS[task.kind], task.level or 0),
        _pack_cloud_block(input_cloud),
        _pack_cloud_block(target_cloud),
    ]
    if mapping is not None:
        items = sorted(mapping.part_to_point.items())
        parts.append(struct.pack("<BH", 1, len(items)))
        bank_idx = {p: int(i) for p, i in zip(mapping.part_to_point, mapping.bank_subset_indices)}
        for part, point in items:
            parts.append(struct.pack("<HH", int(part), bank_idx[part]))
            parts.append(np.asarray(point, dtype="<f4").tobytes())
    else:
        parts.append(struct.pack("<B", 0))
    parts.append(struct.pack("<Q", seed))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_pair(path: str):
    """Returns (task, input_cloud, target_cloud, mapping_or_None, seed)."""
    from .icl_ice import LabelMapping

    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != _PAIR_MAGIC:
        raise DatasetFormatError(0, "bad pair magic")
    version, task_id, level = reader.unpack("HBB", "pair header")
    if version != _VERSION:
        raise DatasetFormatError(4, f"unsupported version {version}")
    if task_id not in _TASK_FROM_ID:
        raise DatasetFormatError(6, f"unknown task id {task_id}")
    input_cloud = _read_cloud_block(reader, "pair input")
    target_cloud = _read_cloud_block(reader, "pair target")
    (has_mapping,) = reader.unpack("B", "mapping flag")
    mapping = None
    if has_mapping:
        (m,) = reader.unpack("H", "mapping size")
        part_to_point = {}
        subset = []
        for _ in range(m):
            part, bank_index = reader.unpack("HH", "mapping entry")
            point = reader.array("<f4", 3, "mapping point").astype(np.float64)
            part_to_point[int(part)] = point
            subset.append(bank_index)
        mapping = LabelMapping(part_to_point, np.array(subset, dtype=np.int64))
    (seed,) = reader.unpack("Q", "pair seed")
    if reader.pos != len(reader.data):
        raise DatasetFormatError(reader.pos, "trailing bytes")
    task = TaskKind(_TASK_FROM_ID[task_id], level or None)
    return task, input_cloud, target_cloud, mapping, seed


def file_hash(path: str) -> str:
    """Content hash (sha256 hex) of a file, for run manifests."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
