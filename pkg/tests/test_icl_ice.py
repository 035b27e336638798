import numpy as np
import pytest

from picl.geometry import PointCloud, rotation_matrix
from picl.icl_ice import (
    CorruptionOp,
    LabelMapping,
    build_label_bank,
    corrupt,
    decode_labels,
    draw_mapping,
    encode_labels,
    make_ice_sample,
)
from picl.shapes import gen_shape, part_ids


def decode_oracle(points, mapping):
    """Brute-force nearest mapped point, ties to lower bank index."""
    order = np.argsort(mapping.bank_subset_indices, kind="stable")
    parts = list(mapping.part_to_point)
    parts = [parts[i] for i in order]
    out = []
    for p in points:
        best_part, best_d = None, np.inf
        for part in parts:
            d = float(np.sum((p - mapping.part_to_point[part]) ** 2))
            if d < best_d:
                best_part, best_d = part, d
        out.append(best_part)
    return np.array(out)


# ---------------------------------------------------------------------------
# label bank
# ---------------------------------------------------------------------------

def test_bank_default_size_and_separation():
    bank = build_label_bank(8, seed=0)
    assert bank.size == 8
    d = np.linalg.norm(bank.points[:, None] - bank.points[None], axis=-1)
    d[np.diag_indices(8)] = np.inf
    assert d.min() >= 0.15
    assert np.abs(bank.points).max() <= 1.0


def test_bank_single_point():
    bank = build_label_bank(1, seed=5)
    assert bank.size == 1


def test_bank_deterministic():
    np.testing.assert_array_equal(build_label_bank(20, 3).points, build_label_bank(20, 3).points)


def test_bank_rejection_budget_exhausted():
    # the cube cannot host thousands of points 0.15 apart
    with pytest.raises(ValueError, match="separation"):
        build_label_bank(4000, seed=0)


# ---------------------------------------------------------------------------
# mapping draws
# ---------------------------------------------------------------------------

def test_mapping_uses_whole_bank_when_parts_fill_it():
    bank = build_label_bank(4, seed=1)
    mapping = draw_mapping(bank, [0, 1, 2, 3], seed=2)
    assert sorted(mapping.bank_subset_indices.tolist()) == [0, 1, 2, 3]


def test_mapping_single_part():
    bank = build_label_bank(8, seed=1)
    mapping = draw_mapping(bank, [7], seed=3)
    assert mapping.parts == [7]
    assert len(mapping.bank_subset_indices) == 1


def test_mapping_overflow_errors():
    bank = build_label_bank(2, seed=1)
    with pytest.raises(ValueError, match="bank overflow"):
        draw_mapping(bank, [0, 1, 2], seed=0)


def test_mapping_selection_uniform_within_3_sigma():
    bank = build_label_bank(8, seed=4)
    draws = 10_000
    counts = np.zeros(8)
    for s in range(draws):
        mapping = draw_mapping(bank, [0, 1], seed=s)
        for idx in mapping.bank_subset_indices:
            counts[idx] += 1
    p = 2.0 / 8.0
    expected = draws * p
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - expected) <= 3.0 * sigma)


def test_mapping_injective():
    bank = build_label_bank(8, seed=9)
    mapping = draw_mapping(bank, [3, 4, 5], seed=11)
    pts = [tuple(v) for v in mapping.part_to_point.values()]
    assert len(set(pts)) == 3


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def test_encode_two_parts_two_distinct_points():
    cloud = gen_shape("table", 128, seed=0)
    bank = build_label_bank(8, seed=1)
    mapping = draw_mapping(bank, part_ids("table"), seed=2)
    encoded = encode_labels(cloud, mapping)
    assert len({tuple(p) for p in encoded.points}) == 2
    assert len(encoded) == len(cloud)


def test_encode_decode_round_trip_exact():
    cloud = gen_shape("chair", 256, seed=1)
    bank = build_label_bank(8, seed=2)
    mapping = draw_mapping(bank, part_ids("chair"), seed=3)
    decoded = decode_labels(encode_labels(cloud, mapping), mapping)
    np.testing.assert_array_equal(decoded, cloud.labels)


def test_encode_unmapped_label_errors():
    cloud = gen_shape("table", 128, seed=2)
    bank = build_label_bank(8, seed=0)
    mapping = draw_mapping(bank, [0, 1], seed=1)  # table ids are 3, 4
    with pytest.raises(KeyError):
        encode_labels(cloud, mapping)


def test_two_mappings_differ_on_same_cloud():
    cloud = gen_shape("lamp", 128, seed=3)
    bank = build_label_bank(8, seed=1)
    m1 = draw_mapping(bank, part_ids("lamp"), seed=10)
    m2 = draw_mapping(bank, part_ids("lamp"), seed=11)
    e1, e2 = encode_labels(cloud, m1), encode_labels(cloud, m2)
    assert not np.array_equal(e1.points, e2.points)


def test_decode_simple_nearest():
    mapping = LabelMapping(
        {0: np.zeros(3), 1: np.ones(3)}, np.array([0, 1])
    )
    labels = decode_labels(np.array([[0.1, 0.0, 0.0]]), mapping)
    assert labels.tolist() == [0]


def test_decode_exact_bank_points():
    bank = build_label_bank(6, seed=7)
    mapping = draw_mapping(bank, [1, 2, 3], seed=8)
    parts = mapping.parts
    pts = np.stack([mapping.part_to_point[p] for p in parts])
    np.testing.assert_array_equal(decode_labels(pts, mapping), parts)


def test_decode_matches_bruteforce_oracle():
    rng = np.random.default_rng(12)
    bank = build_label_bank(10, seed=5)
    mapping = draw_mapping(bank, [0, 1, 2, 3, 4, 5], seed=6)
    pts = rng.uniform(-1, 1, (1000, 3))
    np.testing.assert_array_equal(decode_labels(pts, mapping), decode_oracle(pts, mapping))


def test_decode_invariant_under_common_rotation():
    rng = np.random.default_rng(21)
    bank = build_label_bank(8, seed=2)
    mapping = draw_mapping(bank, [0, 1, 2], seed=3)
    pts = rng.uniform(-1, 1, (200, 3))
    base = decode_labels(pts, mapping)
    axis = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    r = rotation_matrix(axis, 0.9)
    rotated_mapping = LabelMapping(
        {p: r @ v for p, v in mapping.part_to_point.items()},
        mapping.bank_subset_indices.copy(),
    )
    np.testing.assert_array_equal(decode_labels(pts @ r.T, rotated_mapping), base)


# ---------------------------------------------------------------------------
# corruption ops and ICE samples
# ---------------------------------------------------------------------------

def test_jitter_sigma_zero_identity():
    cloud = gen_shape("sphere", 128, seed=0)
    out = corrupt(cloud, CorruptionOp("jitter", sigma=0.0), seed=1)
    np.testing.assert_array_equal(out.points, cloud.points)


def test_drop_fraction_one_zeroes_everything():
    cloud = gen_shape("cube", 128, seed=1)
    out = corrupt(cloud, CorruptionOp("drop", drop_fraction=1.0), seed=2)
    assert np.all(out.points == 0.0)


def test_local_mask_leaves_far_points():
    cloud = gen_shape("sphere", 256, seed=2)
    op = CorruptionOp("local_mask", radius=0.4)
    out = corrupt(cloud, op, seed=3)
    moved = np.any(out.points != cloud.points, axis=1)
    assert np.all(np.all(out.points[moved] == 0.0, axis=1))
    # find the zero-filled ball: every surviving point is outside it
    zeroed_src = cloud.points[moved]
    if len(zeroed_src):
        survivors = cloud.points[~moved]
        d = np.linalg.norm(survivors[:, None] - zeroed_src[None], axis=-1)
        assert d.size  # sanity: ball non-trivial on a sphere


def test_corruption_preserves_length():
    cloud = gen_shape("torus", 200, seed=4)
    for kind in ("local_mask", "jitter", "drop"):
        assert len(corrupt(cloud, CorruptionOp(kind), seed=5)) == 200


def test_unknown_corruption_kind():
    with pytest.raises(ValueError):
        CorruptionOp("shear")


def test_ice_sample_same_op_separate_randomness():
    p = gen_shape("lamp", 128, seed=1)
    q = gen_shape("rocket", 128, seed=2)
    op = CorruptionOp("jitter", sigma=0.05)
    sample = make_ice_sample(q, p, op, seeds=(10, 11), sample_seed=3)
    assert sample.task.kind == "ice"
    # targets are the clean clouds; inputs are corrupted copies
    assert not np.array_equal(sample.query_input.points, sample.query_target.points)
    assert not np.array_equal(sample.prompt_input.points, sample.prompt_target.points)
    # labels never enter ICE samples
    assert all(c.labels is None for c in sample.clouds())


def test_ice_sigma_zero_identity_pairs():
    p = gen_shape("sphere", 64, seed=5)
    q = gen_shape("cube", 64, seed=6)
    sample = make_ice_sample(q, p, CorruptionOp("jitter", sigma=0.0), seeds=(0, 1))
    np.testing.assert_array_equal(sample.query_input.points, sample.query_target.points)
