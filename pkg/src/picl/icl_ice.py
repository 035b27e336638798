"""Dynamic label points and corruption-pair synthesis.

Instead of a fixed part -> point table, a bank of candidate label points
is drawn once, and every sample gets a fresh random bijection from its
parts onto a bank subset. Prompt and query of one sample always share the
mapping, so the prompt demonstrates which point stands for which part.
Restoration pairs (one corruption applied to prompt and query alike)
complement this with pure coordinate-level context tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .taskgen import InContextSample, TaskKind, round_half_up

__all__ = [
    "LabelBank",
    "LabelMapping",
    "CorruptionOp",
    "build_label_bank",
    "draw_mapping",
    "encode_labels",
    "decode_labels",
    "corrupt",
    "make_ice_sample",
]

_MIN_BANK_SEPARATION = 0.15
_MAX_REJECTIONS = 10_000

CORRUPTION_KINDS = ("local_mask", "jitter", "drop")


@dataclass
class LabelBank:
    """N_B candidate label points in [-1, 1]^3 with guaranteed separation."""

    points: np.ndarray
    seed: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("bank points must be (N_B, 3)")

    @property
    def size(self) -> int:
        return len(self.points)


@dataclass
class LabelMapping:
    """Per-sample bijection from part ids onto a subset of bank points.

    ``part_to_point`` insertion order and ``bank_subset_indices`` are
    positionally aligned: the j-th key maps to the bank point at
    ``bank_subset_indices[j]``.
    """

    part_to_point: dict
    bank_subset_indices: np.ndarray

    def __post_init__(self):
        self.bank_subset_indices = np.asarray(self.bank_subset_indices, dtype=np.int64)
        if len(self.part_to_point) != len(self.bank_subset_indices):
            raise ValueError("mapping must pair each part with one bank index")
        pts = np.array(list(self.part_to_point.values()))
        if len(pts) != len({tuple(p) for p in pts}):
            raise ValueError("mapping must be injective onto distinct points")

    @property
    def parts(self) -> list:
        return sorted(self.part_to_point)

    def ordered_by_bank_index(self):
        """(parts, points) sorted by bank index, the decode tie-break order."""
        order = np.argsort(self.bank_subset_indices, kind="stable")
        parts = list(self.part_to_point)
        parts_sorted = [parts[i] for i in order]
        pts = np.stack([self.part_to_point[p] for p in parts_sorted])
        return parts_sorted, pts


def build_label_bank(n_b: int, seed: int) -> LabelBank:
    """Sample n_b label points uniformly from the cube mapped into [-1,1]^3.

    Rejection resampling enforces pairwise separation >= 0.15 so nearest
    point decoding stays unambiguous; gives up after 10,000 rejections.
    """
    if n_b < 1:
        raise ValueError("bank size must be >= 1")
    rng = np.random.default_rng(seed)
    points = np.empty((n_b, 3))
    count = 0
    rejections = 0
    while count < n_b:
        cand = 2.0 * rng.uniform(0.0, 1.0, 3) - 1.0
        if count and np.min(np.linalg.norm(points[:count] - cand, axis=1)) < _MIN_BANK_SEPARATION:
            rejections += 1
            if rejections >= _MAX_REJECTIONS:
                raise ValueError(
                    f"could not place {n_b} bank points with separation "
                    f"{_MIN_BANK_SEPARATION} after {_MAX_REJECTIONS} rejections"
                )
            continue
        points[count] = cand
        count += 1
    return LabelBank(points, seed)


def draw_mapping(bank: LabelBank, parts, seed: int) -> LabelMapping:
    """Uniformly pick |parts| bank points and match them to parts at random."""
    parts = sorted(int(p) for p in parts)
    m = len(parts)
    if m == 0:
        raise ValueError("parts must be non-empty")
    if m > bank.size:
        raise ValueError(f"bank overflow: {m} parts exceed bank size {bank.size}")
    rng = np.random.default_rng(seed)
    subset = np.sort(rng.choice(bank.size, size=m, replace=False))
    assignment = rng.permutation(m)
    part_to_point = {
        part: bank.points[subset[assignment[j]]].copy() for j, part in enumerate(parts)
    }
    return LabelMapping(part_to_point, subset[assignment])


def encode_labels(cloud: PointCloud, mapping: LabelMapping) -> PointCloud:
    """Replace each point with its part's mapped label point, order kept."""
    if cloud.labels is None:
        raise ValueError("encode_labels requires a labeled cloud")
    try:
        pts = np.stack([mapping.part_to_point[int(l)] for l in cloud.labels])
    except KeyError as exc:
        raise KeyError(f"label {exc.args[0]} missing from mapping") from None
    return PointCloud(pts, cloud.labels.copy(), cloud.category)


def decode_labels(pred: PointCloud | np.ndarray, mapping: LabelMapping) -> np.ndarray:
    """Assign each predicted point the part with the nearest mapped point.

    Ties go to the lower bank index. Only the sample's own mapping is
    consulted, never the full bank.
    """
    pts = pred.points if isinstance(pred, PointCloud) else np.asarray(pred, dtype=np.float64)
    parts_sorted, ref = mapping.ordered_by_bank_index()
    d2 = np.sum((pts[:, None, :] - ref[None]) ** 2, axis=-1)
    nearest = np.argmin(d2, axis=1)  # first minimum = lowest bank index
    return np.array(parts_sorted, dtype=np.int64)[nearest]


# ---------------------------------------------------------------------------
# In-context enhancing: corruption pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionOp:
    """One corruption operation; magnitude fields apply per kind."""

    kind: str
    radius: float = 0.4       # local_mask: zero-fill ball radius
    sigma: float = 0.02       # jitter: per-coordinate noise scale
    drop_fraction: float = 0.3  # drop: zero-filled fraction
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind: {self.kind!r}")


def corrupt(cloud: PointCloud, op: CorruptionOp, seed: int | None = None) -> PointCloud:
    """Apply one corruption; cloud length is always preserved.

    Removed points are zero-filled, matching the task-pair convention.
    """
    rng = np.random.default_rng(op.seed if seed is None else seed)
    pts = cloud.points.copy()
    n = len(pts)
    if op.kind == "local_mask":
        center = pts[int(rng.integers(n))]
        within = np.sum((pts - center) ** 2, axis=1) <= op.radius**2
        pts[within] = 0.0
    elif op.kind == "jitter":
        if op.sigma > 0.0:
            pts = np.clip(pts + rng.normal(0.0, op.sigma, pts.shape), -1.0, 1.0)
    elif op.kind == "drop":
        k = round_half_up(n * op.drop_fraction)
        idx = rng.choice(n, size=k, replace=False)
        pts[idx] = 0.0
    return cloud.with_points(pts)


def make_ice_sample(
    cloud_q: PointCloud,
    cloud_p: PointCloud,
    op: CorruptionOp,
    seeds: tuple[int, int],
    sample_seed: int = 0,
) -> InContextSample:
    """Restoration sample: the same op corrupts prompt and query inputs.

    Randomness is fresh per cloud; op kind and magnitudes are shared, so
    the prompt demonstrates exactly the degradation the query suffers.
    Labels never enter ICE samples (coordinates only).
    """
    if len(cloud_q) != len(cloud_p):
        raise ValueError("prompt and query clouds must share one point count")
    seed_p, seed_q = seeds
    cloud_p = PointCloud(cloud_p.points.copy(), None, cloud_p.category)
    cloud_q = PointCloud(cloud_q.points.copy(), None, cloud_q.category)
    prompt_input = corrupt(cloud_p, op, seed=seed_p)
    query_input = corrupt(cloud_q, op, seed=seed_q)
    return InContextSample(
        TaskKind("ice"),
        prompt_input,
        cloud_p,
        query_input,
        cloud_q,
        seed=sample_seed,
    )
