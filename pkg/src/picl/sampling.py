"""Joint sampling and masking: aligned patch sequences for cloud pairs.

Farthest point sampling runs once, on the input cloud; its center indices
are reused verbatim for the target, so patch c of the input and patch c
of the target describe the same region of the underlying object. Each
cloud then runs k-NN around its own centers. That index consistency is
what lets the target track skip coordinate positional embeddings without
leaking masked content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, farthest_point_sample, knn_grouped
from .taskgen import round_half_up

__all__ = [
    "PatchSequence",
    "MaskSpec",
    "joint_sample",
    "build_mask",
    "apply_mask_sep",
    "inference_track_mask",
    "training_track_mask",
]

SOURCES = ("prompt-input", "prompt-target", "query-input", "query-target")


@dataclass
class PatchSequence:
    """Index-aligned centers and k-NN patches of one cloud.

    center_indices: (N_C,) distinct point indices (shared across the pair)
    centers:        (N_C, 3) this cloud's points at those indices
    patches:        (N_C, M, 3) k-NN groups, distance-sorted
    neighbor_indices: (N_C, M) the point indices behind ``patches``
    source: which of the four sample clouds this sequence came from
    """

    center_indices: np.ndarray
    centers: np.ndarray
    patches: np.ndarray
    neighbor_indices: np.ndarray
    source: str = ""

    def __post_init__(self):
        if len(np.unique(self.center_indices)) != len(self.center_indices):
            raise ValueError("center indices must be distinct")

    @property
    def n_centers(self) -> int:
        return len(self.center_indices)


def _sequence(cloud: PointCloud, center_indices: np.ndarray, m: int, source: str) -> PatchSequence:
    neighbor_indices = knn_grouped(cloud.points, center_indices, m)
    return PatchSequence(
        center_indices=center_indices.copy(),
        centers=cloud.points[center_indices].copy(),
        patches=cloud.points[neighbor_indices].copy(),
        neighbor_indices=neighbor_indices,
        source=source,
    )


def joint_sample(
    input_cloud: PointCloud,
    target_cloud: PointCloud,
    n_c: int,
    m: int,
    seed: int,
    sources: tuple[str, str] = ("prompt-input", "prompt-target"),
    method: str = "fps",
):
    """Patch sequences for an (input, target) pair with shared center indices.

    FPS (or uniform random sampling, for the ablation) runs on the input
    cloud only; the target reuses the indices and looks up its own points
    there, then both clouds group neighborhoods independently. The two
    returned sequences always report identical center_indices.
    """
    if len(input_cloud) != len(target_cloud):
        raise ValueError("joint sampling requires aligned clouds")
    if method == "fps":
        centers = farthest_point_sample(input_cloud, n_c, seed)
    elif method == "random":
        rng = np.random.default_rng(seed)
        centers = rng.choice(len(input_cloud), size=n_c, replace=False).astype(np.int64)
    else:
        raise ValueError(f"unknown sampling method: {method!r}")
    return (
        _sequence(input_cloud, centers, m, sources[0]),
        _sequence(target_cloud, centers, m, sources[1]),
    )


@dataclass
class MaskSpec:
    """Boolean mask over patch positions with an exact true-count."""

    flags: np.ndarray
    ratio: float
    seed: int

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        expected = round_half_up(len(self.flags) * self.ratio)
        if int(self.flags.sum()) != expected:
            raise ValueError(
                f"mask has {int(self.flags.sum())} set flags, expected {expected}"
            )

    @property
    def n_masked(self) -> int:
        return int(self.flags.sum())

    def __len__(self) -> int:
        return len(self.flags)


def build_mask(n_c: int, ratio: float, seed: int) -> MaskSpec:
    """Uniform subset of exactly round-half-up(n_c * ratio) masked positions."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    k = round_half_up(n_c * ratio)
    rng = np.random.default_rng(seed)
    flags = np.zeros(n_c, dtype=bool)
    flags[rng.choice(n_c, size=k, replace=False)] = True
    return MaskSpec(flags, ratio, seed)


def apply_mask_sep(query_target_seq: PatchSequence, mask: MaskSpec) -> np.ndarray:
    """Target-track mask for the parallel-track layout at inference time.

    The prompt target stays fully visible; the query target is masked per
    ``mask``. Returns flags over [prompt-target || query-target].
    """
    n_c = query_target_seq.n_centers
    if len(mask) != n_c:
        raise ValueError(f"mask length {len(mask)} != sequence length {n_c}")
    return np.concatenate([np.zeros(n_c, dtype=bool), mask.flags])


def inference_track_mask(n_c: int, variant: str) -> np.ndarray:
    """All-masked query target, everything else visible."""
    if variant == "sep":
        return np.concatenate([np.zeros(n_c, dtype=bool), np.ones(n_c, dtype=bool)])
    if variant == "cat":
        return np.concatenate(
            [np.zeros(3 * n_c, dtype=bool), np.ones(n_c, dtype=bool)]
        )
    raise ValueError(f"unknown variant: {variant!r}")


def training_track_mask(n_c: int, variant: str, ratio: float, seed: int) -> np.ndarray:
    """Random mask over the whole maskable track with the global ratio.

    Sep masks across the concatenated target track (prompt-target ||
    query-target); Cat masks globally across all four segments.
    """
    if variant == "sep":
        return build_mask(2 * n_c, ratio, seed).flags
    if variant == "cat":
        return build_mask(4 * n_c, ratio, seed).flags
    raise ValueError(f"unknown variant: {variant!r}")
