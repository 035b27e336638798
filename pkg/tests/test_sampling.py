import numpy as np
import pytest

from picl.geometry import PointCloud, rotate
from picl.icl_ice import build_label_bank, draw_mapping, encode_labels
from picl.sampling import (
    MaskSpec,
    apply_mask_sep,
    build_mask,
    inference_track_mask,
    joint_sample,
    training_track_mask,
)
from picl.shapes import gen_shape
from picl.taskgen import round_half_up

from conftest import random_cloud


def knn_oracle(points, center, k):
    keyed = sorted(
        (float(np.sum((points[i] - points[center]) ** 2)), i) for i in range(len(points))
    )
    return [i for _, i in keyed[:k]]


# ---------------------------------------------------------------------------
# joint_sample
# ---------------------------------------------------------------------------

def test_identical_pair_gives_identical_sequences(rng):
    c = random_cloud(rng, 128)
    a, b = joint_sample(c, c, 16, 8, seed=0)
    np.testing.assert_array_equal(a.center_indices, b.center_indices)
    np.testing.assert_array_equal(a.patches, b.patches)
    np.testing.assert_array_equal(a.neighbor_indices, b.neighbor_indices)


def test_rotated_target_shares_indices(rng):
    c = random_cloud(rng, 256)
    axis = np.array([0.0, 1.0, 0.0])
    t = rotate(c, axis, 0.7)
    inp_seq, tgt_seq = joint_sample(c, t, 32, 8, seed=1)
    np.testing.assert_array_equal(inp_seq.center_indices, tgt_seq.center_indices)
    rotated_centers = rotate(PointCloud(inp_seq.centers), axis, 0.7).points
    np.testing.assert_allclose(tgt_seq.centers, rotated_centers, atol=1e-6)


def test_patches_match_per_cloud_knn_oracle(rng):
    inp = random_cloud(rng, 100)
    tgt = random_cloud(rng, 100)
    inp_seq, tgt_seq = joint_sample(inp, tgt, 10, 6, seed=2)
    np.testing.assert_array_equal(inp_seq.center_indices, tgt_seq.center_indices)
    for seq, cloud in ((inp_seq, inp), (tgt_seq, tgt)):
        for c, center in enumerate(seq.center_indices):
            want = knn_oracle(cloud.points, int(center), 6)
            np.testing.assert_array_equal(seq.neighbor_indices[c], want)
            np.testing.assert_array_equal(seq.patches[c], cloud.points[want])


def test_length_mismatch_rejected(rng):
    with pytest.raises(ValueError, match="aligned clouds"):
        joint_sample(random_cloud(rng, 64), random_cloud(rng, 63), 8, 4, seed=0)


def test_random_sampling_method_still_aligned(rng):
    inp = random_cloud(rng, 128)
    tgt = random_cloud(rng, 128)
    a, b = joint_sample(inp, tgt, 16, 4, seed=3, method="random")
    np.testing.assert_array_equal(a.center_indices, b.center_indices)
    assert len(np.unique(a.center_indices)) == 16


def test_segmentation_within_patch_correspondence_on_separated_parts():
    """With spatially separable parts, target patch points are exactly the
    label points of the corresponding input patch points."""
    rng = np.random.default_rng(5)
    blob_a = rng.normal(0, 0.05, (64, 3)) + np.array([0.7, 0.0, 0.0])
    blob_b = rng.normal(0, 0.05, (64, 3)) - np.array([0.7, 0.0, 0.0])
    pts = np.concatenate([blob_a, blob_b])
    labels = np.array([0] * 64 + [1] * 64)
    perm = rng.permutation(128)
    cloud = PointCloud(pts[perm], labels[perm])
    bank = build_label_bank(8, seed=0)
    mapping = draw_mapping(bank, [0, 1], seed=1)
    target = encode_labels(cloud, mapping)
    inp_seq, tgt_seq = joint_sample(cloud, target, 16, 8, seed=2)
    label_points = target.points  # label point of point i
    for c in range(16):
        np.testing.assert_array_equal(
            tgt_seq.patches[c], label_points[inp_seq.neighbor_indices[c]]
        )


def test_independent_sampling_breaks_correspondence():
    """Mirror of the joint-sampling ablation: running FPS separately per
    cloud destroys the center alignment the loss relies on."""
    rng = np.random.default_rng(9)
    inp = PointCloud(rng.uniform(-1, 1, (128, 3)))
    tgt = PointCloud(rng.uniform(-1, 1, (128, 3)))
    joint_inp, joint_tgt = joint_sample(inp, tgt, 16, 8, seed=4)
    np.testing.assert_array_equal(joint_inp.center_indices, joint_tgt.center_indices)
    # independent FPS per cloud: different point sets, different centers
    indep_inp, _ = joint_sample(inp, inp, 16, 8, seed=4)
    indep_tgt, _ = joint_sample(tgt, tgt, 16, 8, seed=4)
    assert not np.array_equal(indep_inp.center_indices, indep_tgt.center_indices)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def test_mask_64_at_070_is_exactly_45():
    for seed in range(10):
        mask = build_mask(64, 0.7, seed)
        assert mask.n_masked == 45


def test_mask_ratio_zero_and_one():
    assert build_mask(64, 0.0, 1).n_masked == 0
    assert build_mask(64, 1.0, 1).n_masked == 64


@pytest.mark.parametrize("ratio", [0.0, 0.1, 0.25, 1 / 3, 0.5, 0.7, 0.9, 1.0])
@pytest.mark.parametrize("n", [1, 7, 64, 128])
def test_mask_count_exact_across_ratios(n, ratio):
    mask = build_mask(n, ratio, seed=3)
    assert mask.n_masked == round_half_up(n * ratio)


def test_mask_deterministic():
    np.testing.assert_array_equal(build_mask(64, 0.7, 5).flags, build_mask(64, 0.7, 5).flags)


def test_mask_spec_validates_count():
    with pytest.raises(ValueError):
        MaskSpec(np.ones(10, dtype=bool), ratio=0.5, seed=0)


def test_out_of_range_ratio():
    with pytest.raises(ValueError):
        build_mask(10, 1.5, 0)


# ---------------------------------------------------------------------------
# track masks
# ---------------------------------------------------------------------------

def test_apply_mask_sep_inference_layout():
    cloud = gen_shape("sphere", 128, seed=0)
    _, tgt_seq = joint_sample(cloud, cloud, 16, 8, seed=0)
    track = apply_mask_sep(tgt_seq, build_mask(16, 1.0, seed=1))
    assert not track[:16].any()  # prompt target fully visible
    assert track[16:].all()      # query target fully masked


def test_apply_mask_sep_length_check():
    cloud = gen_shape("sphere", 128, seed=0)
    _, tgt_seq = joint_sample(cloud, cloud, 16, 8, seed=0)
    with pytest.raises(ValueError):
        apply_mask_sep(tgt_seq, build_mask(8, 0.5, seed=0))


def test_training_track_mask_counts():
    assert training_track_mask(64, "sep", 0.7, 0).sum() == 90  # 128 * 0.7 -> 90
    assert training_track_mask(64, "cat", 0.7, 0).sum() == round_half_up(256 * 0.7)


def test_inference_track_mask_layouts():
    sep = inference_track_mask(16, "sep")
    assert sep.sum() == 16 and len(sep) == 32 and sep[16:].all()
    cat = inference_track_mask(16, "cat")
    assert cat.sum() == 16 and len(cat) == 64 and cat[48:].all()
