"""Geometric and metric kernels shared by the whole pipeline.

Everything here is a pure function of its inputs and brute-force at desk
scale (N <= 4096): no spatial indices, no approximations. Tie-breaking is
always by smallest point index so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "PointCloud",
    "Metric",
    "normalize",
    "farthest_point_sample",
    "knn",
    "chamfer_l2",
    "smooth_l1",
    "rotate",
    "rotation_matrix",
    "instance_miou",
]


@dataclass
class PointCloud:
    """N points with XYZ coordinates, optional per-point part labels.

    points: (N, 3) float array; normalized clouds live in [-1, 1]^3.
    labels: optional (N,) int array of part identifiers.
    category: optional shape-category tag.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    category: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise ValueError("point cloud must contain at least one point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match "
                    f"{len(self.points)} points"
                )

    def __len__(self) -> int:
        return len(self.points)

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.points.copy(),
            None if self.labels is None else self.labels.copy(),
            self.category,
        )

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=np.asarray(points, dtype=np.float64))


@dataclass
class Metric:
    """Evaluation scalars: Chamfer distance x1000 and mIoU in percent."""

    chamfer_x1000: float = 0.0
    miou_percent: float = 0.0

    def __post_init__(self):
        if self.chamfer_x1000 < 0:
            raise ValueError("chamfer_x1000 must be non-negative")
        if not 0.0 <= self.miou_percent <= 100.0:
            raise ValueError("miou_percent must lie in [0, 100]")


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the bounding-box midpoint and scale so max |coord| = 1.

    Degenerate clouds (all points identical) are centered only; the scale
    factor defaults to 1 so no division by zero occurs. Idempotent up to
    float rounding on already-normalized clouds.
    """
    pts = cloud.points
    mid = 0.5 * (pts.max(axis=0) + pts.min(axis=0))
    centered = pts - mid
    scale = np.abs(centered).max()
    if scale == 0.0:
        scale = 1.0
    return cloud.with_points(centered / scale)


def _fps_indices(points: np.ndarray, count: int, start: int) -> np.ndarray:
    """Iterative farthest point sampling from a fixed start index.

    Each new index maximizes the minimum squared distance to the points
    already chosen; np.argmax breaks ties by smallest index. Chosen
    indices are excluded outright, so the result stays distinct even on
    clouds with many coincident points (e.g. zero-filled inputs).
    """
    n = len(points)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    min_d2 = np.sum((points - points[start]) ** 2, axis=1)
    min_d2[start] = -np.inf
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -np.inf
    return chosen


def farthest_point_sample(cloud: PointCloud, count: int, seed: int) -> np.ndarray:
    """Select ``count`` distinct point indices by farthest point sampling.

    The first index is drawn uniformly from the seed; the rest greedily
    maximize coverage. Raises on count > N ("insufficient points").
    """
    n = len(cloud)
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > n:
        raise ValueError(f"insufficient points: requested {count} of {n}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    return _fps_indices(cloud.points, count, start)


def knn(cloud: PointCloud, center_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest points to ``center_index``, self included.

    Sorted by ascending squared distance, ties broken by smallest index.
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    d2 = np.sum((cloud.points - cloud.points[center_index]) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k].astype(np.int64)


def knn_grouped(points: np.ndarray, center_indices: np.ndarray, k: int) -> np.ndarray:
    """Vectorized k-NN for several centers of the same cloud.

    Returns (len(center_indices), k) index array with the same ordering
    contract as :func:`knn` (stable sort on squared distance).
    """
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    diff = points[center_indices, None, :] - points[None, :, :]
    d2 = np.einsum("cnk,cnk->cn", diff, diff)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def chamfer_l2(pred: PointCloud | np.ndarray, gt: PointCloud | np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances (no square root).

    chamfer(P, G) = mean_p min_g |p-g|^2 + mean_g min_p |g-p|^2
    """
    p = pred.points if isinstance(pred, PointCloud) else np.asarray(pred, dtype=np.float64)
    g = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("chamfer_l2 requires non-empty clouds")
    diff = p[:, None, :] - g[None, :, :]
    d2 = np.einsum("pgk,pgk->pg", diff, diff)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def smooth_l1(
    pred: PointCloud | np.ndarray,
    gt: PointCloud | np.ndarray,
    beta: float = 1.0,
) -> float:
    """Smooth-L1 over the 3N index-aligned coordinate residuals.

    Per residual r: 0.5 r^2 / beta where |r| < beta, else |r| - 0.5 beta;
    returns the mean. Correspondence must be established upstream (the
    clouds are compared coordinate by coordinate, index by index).
    """
    p = pred.points if isinstance(pred, PointCloud) else np.asarray(pred, dtype=np.float64)
    g = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"smooth_l1 requires aligned clouds, got {p.shape} vs {g.shape}")
    r = np.abs(p - g)
    vals = np.where(r < beta, 0.5 * r * r / beta, r - 0.5 * beta)
    return float(vals.mean())


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and angle in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("rotation axis must be non-zero")
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"rotation axis must be unit length, |axis| = {norm:.8f}")
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotate(cloud: PointCloud, axis: np.ndarray, angle: float) -> PointCloud:
    """Rotate every point about ``axis`` by ``angle`` radians; labels kept."""
    r = rotation_matrix(axis, angle)
    return cloud.with_points(cloud.points @ r.T)


def instance_miou(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    parts: "set[int] | np.ndarray | list[int]",
) -> float:
    """Mean intersection-over-union across ``parts``, in percent.

    A part absent from both prediction and ground truth counts as IoU 1.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"label length mismatch: {pred.shape} vs {gt.shape}")
    part_list = sorted(int(p) for p in parts)
    if not part_list:
        raise ValueError("parts must be non-empty")
    ious = []
    for part in part_list:
        in_pred = pred == part
        in_gt = gt == part
        union = np.count_nonzero(in_pred | in_gt)
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(np.count_nonzero(in_pred & in_gt) / union)
    return float(np.mean(ious) * 100.0)
