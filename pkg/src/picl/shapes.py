"""Procedural shape suite: simple solids plus labeled composite objects.

Composite categories own disjoint blocks of global part identifiers, the
way multi-category part-segmentation corpora assign each category its own
label range. Every generator is deterministic in (kind, n_points, seed).
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, normalize

__all__ = [
    "SHAPE_KINDS",
    "COMPOSITE_KINDS",
    "SIMPLE_KINDS",
    "part_ids",
    "gen_shape",
]

SIMPLE_KINDS = ("sphere", "cube", "cylinder", "torus")
COMPOSITE_KINDS = ("lamp", "table", "chair", "rocket")
SHAPE_KINDS = SIMPLE_KINDS + COMPOSITE_KINDS

# global part-id blocks, one contiguous range per labeled category
_PART_BLOCKS = {
    "lamp": (0, 1, 2),        # base, pole, shade
    "table": (3, 4),          # top, legs
    "chair": (5, 6, 7, 8),    # seat, back, legs, arms
    "rocket": (9, 10, 11),    # body, nose, fins
}

_MIN_PART_POINTS = 16


def part_ids(kind: str) -> tuple[int, ...]:
    """Global part identifiers for a shape category (empty if unlabeled)."""
    return _PART_BLOCKS.get(kind, ())


def _split_counts(n: int, fractions, n_parts: int) -> list[int]:
    if n < _MIN_PART_POINTS * n_parts:
        raise ValueError(
            f"need at least {_MIN_PART_POINTS * n_parts} points for {n_parts} parts, got {n}"
        )
    counts = [max(_MIN_PART_POINTS, int(np.floor(f * n))) for f in fractions]
    counts[int(np.argmax(counts))] += n - sum(counts)
    if min(counts) < _MIN_PART_POINTS:
        raise ValueError("part allocation underflow")
    return counts


def _box(rng, n, lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return rng.uniform(lo, hi, size=(n, 3))


def _cylinder_volume(rng, n, radius, z_lo, z_hi):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    z = rng.uniform(z_lo, z_hi, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _cone_volume(rng, n, r_lo, r_hi, z_lo, z_hi):
    """Frustum with radius interpolating r_lo at z_lo to r_hi at z_hi."""
    z = rng.uniform(z_lo, z_hi, n)
    t = (z - z_lo) / (z_hi - z_lo)
    rmax = r_lo + t * (r_hi - r_lo)
    r = rmax * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(n):
        a = axis[i]
        others = [j for j in range(3) if j != a]
        pts[i, a] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _cylinder_shell(rng, n):
    radius, half_h = 0.6, 0.8
    side_area = 2.0 * np.pi * radius * (2.0 * half_h)
    cap_area = 2.0 * np.pi * radius**2
    p_side = side_area / (side_area + cap_area)
    on_side = rng.uniform(size=n) < p_side
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.empty((n, 3))
    z_side = rng.uniform(-half_h, half_h, n)
    r_cap = radius * np.sqrt(rng.uniform(size=n))
    cap_sign = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    pts[:, 0] = np.where(on_side, radius, r_cap) * np.cos(theta)
    pts[:, 1] = np.where(on_side, radius, r_cap) * np.sin(theta)
    pts[:, 2] = np.where(on_side, z_side, cap_sign * half_h)
    return pts


def _torus(rng, n):
    big_r, small_r = 0.7, 0.3
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = 2 * (n - filled)
        u = rng.uniform(0.0, 2.0 * np.pi, m)
        v = rng.uniform(0.0, 2.0 * np.pi, m)
        # rejection keeps surface-area uniformity
        keep = rng.uniform(size=m) < (big_r + small_r * np.cos(v)) / (big_r + small_r)
        u, v = u[keep], v[keep]
        take = min(len(u), n - filled)
        u, v = u[:take], v[:take]
        w = big_r + small_r * np.cos(v)
        pts[filled : filled + take] = np.stack(
            [w * np.cos(u), w * np.sin(u), small_r * np.sin(v)], axis=1
        )
        filled += take
    return pts


def _table(rng, n):
    counts = _split_counts(n, (0.5, 0.5), 2)
    top = _box(rng, counts[0], (-1.0, -1.0, 0.6), (1.0, 1.0, 0.8))
    leg_centers = [(-0.8, -0.8), (-0.8, 0.8), (0.8, -0.8), (0.8, 0.8)]
    which = rng.integers(0, 4, counts[1])
    legs = np.empty((counts[1], 3))
    for i, w in enumerate(which):
        cx, cy = leg_centers[w]
        legs[i] = [
            rng.uniform(cx - 0.08, cx + 0.08),
            rng.uniform(cy - 0.08, cy + 0.08),
            rng.uniform(-1.0, 0.6),
        ]
    return [top, legs]


def _lamp(rng, n):
    counts = _split_counts(n, (0.25, 0.35, 0.40), 3)
    base = _cylinder_volume(rng, counts[0], 0.5, -1.0, -0.85)
    pole = _cylinder_volume(rng, counts[1], 0.06, -0.85, 0.5)
    shade = _cone_volume(rng, counts[2], 0.55, 0.15, 0.5, 1.0)
    return [base, pole, shade]


def _chair(rng, n):
    counts = _split_counts(n, (0.30, 0.30, 0.25, 0.15), 4)
    seat = _box(rng, counts[0], (-0.8, -0.8, -0.1), (0.8, 0.8, 0.1))
    back = _box(rng, counts[1], (-0.8, 0.65, 0.1), (0.8, 0.8, 1.0))
    leg_centers = [(-0.7, -0.7), (-0.7, 0.7), (0.7, -0.7), (0.7, 0.7)]
    which = rng.integers(0, 4, counts[2])
    legs = np.empty((counts[2], 3))
    for i, w in enumerate(which):
        cx, cy = leg_centers[w]
        legs[i] = [
            rng.uniform(cx - 0.07, cx + 0.07),
            rng.uniform(cy - 0.07, cy + 0.07),
            rng.uniform(-1.0, -0.1),
        ]
    side = np.where(rng.uniform(size=counts[3]) < 0.5, -0.8, 0.8)
    arms = np.stack(
        [
            side + rng.uniform(-0.06, 0.06, counts[3]),
            rng.uniform(-0.6, 0.6, counts[3]),
            rng.uniform(0.25, 0.4, counts[3]),
        ],
        axis=1,
    )
    return [seat, back, legs, arms]


def _rocket(rng, n):
    counts = _split_counts(n, (0.5, 0.25, 0.25), 3)
    body = _cylinder_volume(rng, counts[0], 0.3, -0.6, 0.6)
    nose = _cone_volume(rng, counts[1], 0.3, 0.0, 0.6, 1.0)
    n_fins = counts[2]
    fin_angle = rng.integers(0, 3, n_fins) * (2.0 * np.pi / 3.0)
    radial = rng.uniform(0.3, 0.65, n_fins)
    z = rng.uniform(-1.0, -0.4, n_fins)
    # taper: fins reach further out near the bottom
    reach = 0.3 + (radial - 0.3) * (-0.4 - z) / 0.6
    fins = np.stack(
        [
            reach * np.cos(fin_angle) + rng.normal(0.0, 0.01, n_fins),
            reach * np.sin(fin_angle) + rng.normal(0.0, 0.01, n_fins),
            z,
        ],
        axis=1,
    )
    return [body, nose, fins]


_COMPOSITE_BUILDERS = {
    "lamp": _lamp,
    "table": _table,
    "chair": _chair,
    "rocket": _rocket,
}

_SIMPLE_BUILDERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder_shell,
    "torus": _torus,
}


def gen_shape(kind: str, n_points: int = 1024, seed: int = 0) -> PointCloud:
    """Generate a normalized point cloud of the given category.

    Composite kinds carry per-point global part labels with at least 16
    points per part; point order is shuffled so labels are not contiguous.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, SHAPE_KINDS.index(kind) if kind in SHAPE_KINDS else 0)))
    if kind in _SIMPLE_BUILDERS:
        pts = _SIMPLE_BUILDERS[kind](rng, n_points)
        labels = None
    elif kind in _COMPOSITE_BUILDERS:
        parts = _COMPOSITE_BUILDERS[kind](rng, n_points)
        ids = _PART_BLOCKS[kind]
        pts = np.concatenate(parts, axis=0)
        labels = np.concatenate(
            [np.full(len(p), pid, dtype=np.int64) for p, pid in zip(parts, ids)]
        )
    else:
        raise ValueError(f"unknown shape kind: {kind!r}")
    order = rng.permutation(n_points)
    pts = pts[order]
    if labels is not None:
        labels = labels[order]
    return normalize(PointCloud(pts, labels, category=kind))
