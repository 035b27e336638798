"""Task-pair construction: turns clean clouds into (input, target) pairs
for the four standard tasks and assembles prompt+query samples.

Corruption levels 1..5 map to keep ratio (reconstruction), noise fraction
(denoising) or rotation angle (registration). Counts derived from a
fractional rate use round-half-up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, rotate

__all__ = [
    "TASK_NAMES",
    "LEVELED_TASKS",
    "KEEP_RATIOS",
    "NOISE_FRACTIONS",
    "ROTATION_ANGLES_DEG",
    "TaskKind",
    "InContextSample",
    "StaticLabelMap",
    "round_half_up",
    "make_reconstruction_pair",
    "make_denoising_pair",
    "make_registration_pair",
    "make_segmentation_pair_static",
    "assemble_sample",
]

TASK_NAMES = ("reconstruction", "denoising", "registration", "segmentation", "ice")
LEVELED_TASKS = ("reconstruction", "denoising", "registration")

KEEP_RATIOS = {1: 0.03, 2: 0.06, 3: 0.12, 4: 0.25, 5: 0.50}
NOISE_FRACTIONS = {1: 0.10, 2: 0.20, 3: 0.30, 4: 0.40, 5: 0.50}
ROTATION_ANGLES_DEG = {1: 15.0, 2: 30.0, 3: 45.0, 4: 60.0, 5: 90.0}


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class TaskKind:
    """Task identity: kind plus corruption level where applicable."""

    kind: str
    level: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_NAMES:
            raise ValueError(f"unknown task kind: {self.kind!r}")
        if self.kind in LEVELED_TASKS:
            if self.level not in (1, 2, 3, 4, 5):
                raise ValueError(f"{self.kind} requires level in 1..5, got {self.level}")
        elif self.level is not None:
            raise ValueError(f"{self.kind} does not take a corruption level")


def _f32_grid(points: np.ndarray) -> np.ndarray:
    """Snap coordinates to the float32 grid used by the dataset format."""
    return points.astype("<f4").astype(np.float64)


@dataclass
class InContextSample:
    """Prompt pair plus query pair performing one task.

    All four clouds share the same point count; coordinates are snapped to
    float32 so serialization round trips are lossless.
    """

    task: TaskKind
    prompt_input: PointCloud
    prompt_target: PointCloud
    query_input: PointCloud
    query_target: PointCloud
    seed: int = 0

    def __post_init__(self):
        n = len(self.prompt_input)
        for cloud in (self.prompt_target, self.query_input, self.query_target):
            if len(cloud) != n:
                raise ValueError("all four clouds of a sample must share one point count")
        for name in ("prompt_input", "prompt_target", "query_input", "query_target"):
            cloud = getattr(self, name)
            setattr(self, name, cloud.with_points(_f32_grid(cloud.points)))

    @property
    def n_points(self) -> int:
        return len(self.prompt_input)

    def clouds(self):
        return (self.prompt_input, self.prompt_target, self.query_input, self.query_target)

    def __eq__(self, other):
        if not isinstance(other, InContextSample):
            return NotImplemented
        if self.task != other.task or self.seed != other.seed:
            return False
        for a, b in zip(self.clouds(), other.clouds()):
            if not np.array_equal(a.points, b.points):
                return False
            if (a.labels is None) != (b.labels is None):
                return False
            if a.labels is not None and not np.array_equal(a.labels, b.labels):
                return False
            if a.category != b.category:
                return False
        return True


# ---------------------------------------------------------------------------
# Static label map (fixed part -> point assignment)
# ---------------------------------------------------------------------------

_GRID = (-0.8, -0.4, 0.0, 0.4, 0.8)
_AXIS_PERM = (0, 2, 4, 1, 3)  # scrambles the lattice walk so nearby ids spread out


def _lattice_point(i: int) -> np.ndarray:
    d0, d1, d2 = i % 5, (i // 5) % 5, (i // 25) % 5
    return np.array(
        [_GRID[_AXIS_PERM[d0]], _GRID[_AXIS_PERM[d1]], _GRID[_AXIS_PERM[d2]]]
    )


@dataclass
class StaticLabelMap:
    """Fixed association from global part ids to label points in [-1,1]^3.

    Points come from a scrambled 5x5x5 lattice, so any two parts are at
    least 0.4 apart and the assignment never depends on which categories a
    dataset happens to contain.
    """

    part_to_point: dict

    def __post_init__(self):
        pts = np.array(list(self.part_to_point.values()))
        if len(pts) == 0:
            raise ValueError("label map must not be empty")
        if len(pts) > 1:
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
            d[np.diag_indices(len(pts))] = np.inf
            if d.min() < 0.2:
                raise ValueError("label map points closer than minimum separation 0.2")

    @classmethod
    def for_parts(cls, parts) -> "StaticLabelMap":
        parts = sorted(int(p) for p in parts)
        if not parts:
            raise ValueError("parts must be non-empty")
        if parts[-1] >= 125 or parts[0] < 0:
            raise ValueError("static map supports part ids in [0, 125)")
        return cls({p: _lattice_point(p) for p in parts})

    @property
    def parts(self) -> list:
        return sorted(self.part_to_point)

    def points_for(self, labels: np.ndarray) -> np.ndarray:
        try:
            return np.stack([self.part_to_point[int(l)] for l in labels])
        except KeyError as exc:
            raise KeyError(f"label {exc.args[0]} missing from static label map") from None

    def decode(self, points: np.ndarray) -> np.ndarray:
        """Nearest-map-point labels for each predicted point."""
        parts = self.parts
        ref = np.stack([self.part_to_point[p] for p in parts])
        d2 = np.sum((points[:, None, :] - ref[None]) ** 2, axis=-1)
        return np.array(parts, dtype=np.int64)[np.argmin(d2, axis=1)]


# ---------------------------------------------------------------------------
# Pair constructors
# ---------------------------------------------------------------------------

def make_reconstruction_pair(cloud: PointCloud, level: int, seed: int):
    """Zero out all but a keep-ratio fraction of points; target is the clean cloud."""
    if level not in KEEP_RATIOS:
        raise ValueError(f"reconstruction level must be 1..5, got {level}")
    keep = KEEP_RATIOS[level]
    n = len(cloud)
    n_zero = round_half_up(n * (1.0 - keep))
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_zero, replace=False)
    pts = cloud.points.copy()
    pts[idx] = 0.0
    return cloud.with_points(pts), cloud.copy()


def make_denoising_pair(cloud: PointCloud, level: int, seed: int):
    """Replace a fraction of points with clamped standard-normal noise."""
    if level not in NOISE_FRACTIONS:
        raise ValueError(f"denoising level must be 1..5, got {level}")
    n = len(cloud)
    n_noise = round_half_up(n * NOISE_FRACTIONS[level])
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_noise, replace=False)
    pts = cloud.points.copy()
    pts[idx] = np.clip(rng.standard_normal((n_noise, 3)), -1.0, 1.0)
    return cloud.with_points(pts), cloud.copy()


def _flip_upside_down(points: np.ndarray) -> np.ndarray:
    # 180 degrees about the x-axis
    flipped = points.copy()
    flipped[:, 1] *= -1.0
    flipped[:, 2] *= -1.0
    return flipped


def make_registration_pair(
    cloud: PointCloud,
    level: int,
    seed: int,
    axis: np.ndarray | None = None,
    dual_orientation: bool = False,
):
    """Rotate the cloud by the level's angle; target restores orientation.

    ``axis`` may be supplied so a prompt can reuse its query's rotation;
    otherwise a unit axis is drawn from the seed. With ``dual_orientation``
    the target splits its points between the upright cloud and an
    upside-down copy.
    """
    if level not in ROTATION_ANGLES_DEG:
        raise ValueError(f"registration level must be 1..5, got {level}")
    if axis is None:
        rng = np.random.default_rng(seed)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
    angle = np.deg2rad(ROTATION_ANGLES_DEG[level])
    inp = rotate(cloud, axis, angle)
    if dual_orientation:
        half = len(cloud) // 2
        pts = cloud.points.copy()
        pts[half:] = _flip_upside_down(pts[half:])
        target = cloud.with_points(pts)
    else:
        target = cloud.copy()
    return inp, target


def make_segmentation_pair_static(cloud: PointCloud, label_map: StaticLabelMap):
    """Replace each point with its part's fixed label point; input unchanged."""
    if cloud.labels is None:
        raise ValueError("segmentation requires a labeled cloud")
    target_pts = label_map.points_for(cloud.labels)
    return cloud.copy(), PointCloud(target_pts, cloud.labels.copy(), cloud.category)


# ---------------------------------------------------------------------------
# Sample assembly
# ---------------------------------------------------------------------------

def _sub_seeds(seed: int, count: int) -> list[int]:
    state = np.random.SeedSequence(seed).generate_state(count, np.uint64)
    return [int(s) for s in state]


def assemble_sample(
    task: TaskKind,
    query_cloud: PointCloud,
    prompt_cloud: PointCloud,
    seed: int,
    *,
    label_map: StaticLabelMap | None = None,
    label_mapping=None,
    dual_orientation: bool = False,
) -> InContextSample:
    """Build the four clouds of an in-context sample for one task.

    Prompt and query always perform the same task; for registration they
    share the same (axis, angle). Segmentation needs either a static label
    map or a dynamic label mapping (the same object encodes both clouds).
    ICE samples are assembled by :func:`picl.icl_ice.make_ice_sample`.
    """
    if len(query_cloud) != len(prompt_cloud):
        raise ValueError("prompt and query clouds must share one point count")
    s_prompt, s_query, s_shared = _sub_seeds(seed, 3)

    if task.kind == "reconstruction":
        pi, pt = make_reconstruction_pair(prompt_cloud, task.level, s_prompt)
        qi, qt = make_reconstruction_pair(query_cloud, task.level, s_query)
    elif task.kind == "denoising":
        pi, pt = make_denoising_pair(prompt_cloud, task.level, s_prompt)
        qi, qt = make_denoising_pair(query_cloud, task.level, s_query)
    elif task.kind == "registration":
        rng = np.random.default_rng(s_shared)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        pi, pt = make_registration_pair(
            prompt_cloud, task.level, s_prompt, axis=axis, dual_orientation=dual_orientation
        )
        qi, qt = make_registration_pair(
            query_cloud, task.level, s_query, axis=axis, dual_orientation=dual_orientation
        )
    elif task.kind == "segmentation":
        if label_mapping is not None:
            from .icl_ice import encode_labels

            pi, pt = prompt_cloud.copy(), encode_labels(prompt_cloud, label_mapping)
            qi, qt = query_cloud.copy(), encode_labels(query_cloud, label_mapping)
        elif label_map is not None:
            pi, pt = make_segmentation_pair_static(prompt_cloud, label_map)
            qi, qt = make_segmentation_pair_static(query_cloud, label_map)
        else:
            raise ValueError("segmentation requires label_map or label_mapping")
    else:
        raise ValueError(f"assemble_sample does not handle task kind {task.kind!r}")

    return InContextSample(task, pi, pt, qi, qt, seed=seed)
