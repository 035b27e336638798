import numpy as np
import pytest

from picl.geometry import PointCloud, chamfer_l2
from picl.icl_ice import build_label_bank
from picl.model import ModelConfig, init_params
from picl.shapes import gen_shape, part_ids
from picl.taskgen import InContextSample, StaticLabelMap, TaskKind, assemble_sample
from picl.train_eval import (
    AdamW,
    TrainConfig,
    compute_loss,
    cosine_lr,
    evaluate,
    evaluate_generalization,
    infer,
    inference_mask,
    matched_vs_swapped_cd,
    select_prompt,
    shape_descriptor,
    train,
    write_loss_log,
    write_metrics_tsv,
)


def tiny_model(**kw):
    base = dict(feature_dim=32, encoder_depth=2, decoder_depth=1, heads=2,
                n_c=8, m=8, n_points=64, embed_hidden=16, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def small_dataset(n=8, n_points=64, kinds=("sphere", "cube"), seed0=0):
    samples = []
    tasks = [TaskKind("reconstruction", 5), TaskKind("denoising", 3)]
    for i in range(n):
        q = gen_shape(kinds[i % len(kinds)], n_points, seed=seed0 + i)
        p = gen_shape(kinds[(i + 1) % len(kinds)], n_points, seed=seed0 + 100 + i)
        samples.append(assemble_sample(tasks[i % 2], q, p, seed=seed0 + i))
    return samples


def seg_dataset(n=6, n_points=96, kind="table", seed0=0, icl=True):
    samples = []
    bank = build_label_bank(8, seed=1)
    label_map = StaticLabelMap.for_parts(part_ids(kind))
    for i in range(n):
        q = gen_shape(kind, n_points, seed=seed0 + i)
        p = gen_shape(kind, n_points, seed=seed0 + 50 + i)
        if icl:
            from picl.icl_ice import draw_mapping

            mapping = draw_mapping(bank, part_ids(kind), seed=i)
            samples.append(
                assemble_sample(TaskKind("segmentation"), q, p, seed=seed0 + i,
                                label_mapping=mapping)
            )
        else:
            samples.append(
                assemble_sample(TaskKind("segmentation"), q, p, seed=seed0 + i,
                                label_map=label_map)
            )
    return samples


# ---------------------------------------------------------------------------
# loss, schedule, optimizer
# ---------------------------------------------------------------------------

def test_compute_loss_zero_on_perfect():
    rng = np.random.default_rng(0)
    patches = rng.uniform(-1, 1, (3, 4, 3))
    for mode in ("cd", "sl1", "cd+sl1"):
        assert compute_loss(patches, patches, mode) == 0.0


def test_compute_loss_single_point_values():
    pred = np.array([[[[1.0, 0.0, 0.0]]]])
    gt = np.zeros((1, 1, 1, 3))
    assert compute_loss(pred, gt, "cd") == pytest.approx(2.0)
    assert compute_loss(pred, gt, "sl1") == pytest.approx(0.5 / 3.0)
    assert compute_loss(pred, gt, "cd+sl1") == pytest.approx(2.0 + 0.5 / 3.0)


def test_compute_loss_mode_validation():
    with pytest.raises(ValueError):
        compute_loss(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), "l2")
    with pytest.raises(ValueError):
        compute_loss(np.zeros((1, 2, 3)), np.zeros((1, 3, 3)), "cd")


def test_cosine_schedule_decays_to_zero():
    lrs = [cosine_lr(s, 100, 1e-3) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-3)
    assert lrs[-1] < 1e-6
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_zero_lr_keeps_params_bit_identical():
    state = init_params(tiny_model())
    before = {k: v.copy() for k, v in state.params.items()}
    opt = AdamW(state.params)
    grads = {k: np.ones_like(v) for k, v in state.params.items()}
    # weight decay is scaled by the step size, so lr 0 freezes everything
    opt.step(state.params, grads, lr=0.0, weight_decay=0.05)
    for name in before:
        np.testing.assert_array_equal(state.params[name], before[name])


def test_adamw_moves_params():
    state = init_params(tiny_model())
    before = {k: v.copy() for k, v in state.params.items()}
    opt = AdamW(state.params)
    grads = {k: np.ones_like(v) for k, v in state.params.items()}
    opt.step(state.params, grads, lr=1e-3, weight_decay=0.0)
    assert any(not np.array_equal(state.params[n], before[n]) for n in before)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_deterministic_bit_identical():
    samples = small_dataset()

    def run():
        state = init_params(tiny_model())
        result = train(samples, state, TrainConfig(epochs=4, batch_size=4, seed=3))
        return result

    a, b = run(), run()
    assert a.loss_curve == b.loss_curve
    for name in a.state.params:
        np.testing.assert_array_equal(a.state.params[name], b.state.params[name])


def test_train_loss_decreases():
    samples = small_dataset()
    state = init_params(tiny_model())
    result = train(samples, state, TrainConfig(epochs=15, batch_size=4, seed=0))
    first = np.mean([l for _, _, l in result.loss_curve[:2]])
    last = np.mean([l for _, _, l in result.loss_curve[-2:]])
    assert last < 0.7 * first


def test_train_empty_dataset_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        train([], init_params(tiny_model()), TrainConfig())


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_train_aborts_on_non_finite_loss():
    huge = PointCloud(np.full((64, 3), 1e25))
    sample = InContextSample(
        TaskKind("denoising", 1), huge, huge, huge, huge, seed=0
    )
    state = init_params(tiny_model())
    with pytest.raises(RuntimeError, match="step 0"):
        train([sample], state, TrainConfig(epochs=1, batch_size=1, seed=0))


def test_train_resume_matches_uninterrupted():
    samples = small_dataset()
    full_state = init_params(tiny_model())
    full = train(samples, full_state, TrainConfig(epochs=6, batch_size=4, seed=5))

    part_state = init_params(tiny_model())
    cfg = TrainConfig(epochs=6, batch_size=4, seed=5)
    first = train(samples, part_state, cfg, stop_epoch=3)
    second = train(
        samples, first.state, cfg,
        start_epoch=first.epochs_done, optimizer=first.optimizer,
    )
    resumed_curve = first.loss_curve + second.loss_curve
    assert resumed_curve == full.loss_curve
    for name in full.state.params:
        np.testing.assert_array_equal(second.state.params[name], full.state.params[name])


def test_train_icl_refreshes_targets_and_checks_bank():
    samples = seg_dataset(icl=True)
    state = init_params(tiny_model(n_points=96))
    cfg = TrainConfig(epochs=2, batch_size=3, seed=2, label_mode="icl", n_b=8)
    result = train(samples, state, cfg)
    assert result.bank is not None and result.bank.size == 8
    assert all(np.isfinite(l) for _, _, l in result.loss_curve)

    tiny_bank = build_label_bank(1, seed=0)
    with pytest.raises(ValueError, match="bank overflow"):
        train(samples, init_params(tiny_model(n_points=96)),
              TrainConfig(epochs=1, label_mode="icl", n_b=1, seed=0), bank=tiny_bank)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def test_infer_output_full_cloud():
    samples = small_dataset()
    state = init_params(tiny_model())
    s = samples[0]
    pred = infer(state, (s.prompt_input, s.prompt_target), s.query_input, s.task)
    assert len(pred) == len(s.query_input)
    assert np.all(np.isfinite(pred.points))


def test_infer_deterministic():
    samples = small_dataset()
    state = init_params(tiny_model())
    s = samples[1]
    a = infer(state, (s.prompt_input, s.prompt_target), s.query_input, s.task, seed=4)
    b = infer(state, (s.prompt_input, s.prompt_target), s.query_input, s.task, seed=4)
    np.testing.assert_array_equal(a.points, b.points)


def test_infer_segmentation_requires_mapping():
    samples = seg_dataset(icl=True)
    state = init_params(tiny_model(n_points=96))
    s = samples[0]
    with pytest.raises(ValueError, match="mapping"):
        infer(state, (s.prompt_input, s.prompt_target), s.query_input, s.task)


def test_inference_mask_respects_prompt_position():
    for variant in ("sep", "cat"):
        cfg_before = tiny_model(variant=variant, prompt_position="before")
        cfg_behind = tiny_model(variant=variant, prompt_position="behind")
        m_before = inference_mask(cfg_before)
        m_behind = inference_mask(cfg_behind)
        assert m_before.sum() == m_behind.sum() == cfg_before.n_c
        assert not np.array_equal(m_before, m_behind)
        # masked segment is the query target in both layouts
        assert m_before[-cfg_before.n_c:].all() if variant == "sep" else True


# ---------------------------------------------------------------------------
# prompt selection
# ---------------------------------------------------------------------------

def test_select_prompt_cd_finds_ideal():
    samples = small_dataset(6)
    query = samples[0]
    # craft a pool sample whose prompt half IS the query pair
    ideal = InContextSample(
        query.task, query.query_input, query.query_target,
        samples[1].query_input, samples[1].query_target, seed=99,
    )
    pool = samples[1:] + [ideal]
    chosen = select_prompt("cd", query, pool)
    assert chosen is ideal


def test_select_prompt_pool_of_one():
    samples = small_dataset(2)
    for strategy in ("random", "class", "cd", "fea"):
        assert select_prompt(strategy, samples[0], [samples[1]]) is samples[1]


def test_select_prompt_cd_matches_bruteforce():
    samples = small_dataset(8)
    query = samples[0]
    pool = samples[1:]
    chosen = select_prompt("cd", query, pool)
    scores = [chamfer_l2(s.prompt_input, query.query_input) for s in pool]
    assert chosen is pool[int(np.argmin(scores))]


def test_select_prompt_class_aware():
    samples = small_dataset(8, kinds=("sphere", "cube"))
    query = samples[0]  # query category "sphere"
    chosen = select_prompt("class", query, samples[1:], seed=3)
    assert chosen.prompt_input.category == query.query_input.category


def test_select_prompt_errors():
    samples = small_dataset(2)
    with pytest.raises(ValueError, match="empty"):
        select_prompt("random", samples[0], [])
    with pytest.raises(ValueError, match="strategy"):
        select_prompt("best", samples[0], samples)


def test_shape_descriptor_dim_and_determinism():
    c = gen_shape("chair", 256, seed=0)
    d = shape_descriptor(c)
    assert d.shape == (16,)
    np.testing.assert_array_equal(d, shape_descriptor(c))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_evaluate_rows_deterministic():
    samples = small_dataset()
    state = init_params(tiny_model())
    a = evaluate(state, samples, strategy="random", seed=11)
    b = evaluate(state, samples, strategy="random", seed=11)
    assert a == b
    metrics = {r["metric"] for r in a}
    assert "cd_x1000" in metrics and "cd_x1000_copy" in metrics


def test_evaluate_static_segmentation():
    samples = seg_dataset(icl=False)
    state = init_params(tiny_model(n_points=96))
    rows = evaluate(state, samples, strategy="random", label_mode="static", seed=0)
    miou = [r for r in rows if r["metric"] == "miou_percent"]
    assert len(miou) == 1 and 0.0 <= miou[0]["value"] <= 100.0


def test_evaluate_static_refuses_novel_parts():
    samples = seg_dataset(icl=False, kind="table")
    state = init_params(tiny_model(n_points=96))
    lamp_map = StaticLabelMap.for_parts(part_ids("lamp"))
    with pytest.raises(ValueError, match="novel parts"):
        evaluate(state, samples, label_mode="static", static_map=lamp_map, seed=0)


def test_evaluate_icl_segmentation():
    samples = seg_dataset(icl=True)
    state = init_params(tiny_model(n_points=96))
    bank = build_label_bank(8, seed=2)
    rows = evaluate(state, samples, strategy="random", label_mode="icl", bank=bank, seed=0)
    assert any(r["metric"] == "miou_percent" for r in rows)
    with pytest.raises(ValueError, match="bank"):
        evaluate(state, samples, label_mode="icl", bank=None, seed=0)


def test_evaluate_ideal_prompt_uses_query_pair():
    samples = small_dataset(4)
    state = init_params(tiny_model())
    rows = evaluate(state, samples, ideal_prompt=True, include_copy=True, seed=0)
    # copy baseline under the ideal prompt is the query target itself -> CD 0
    copies = [r for r in rows if r["metric"] == "cd_x1000_copy"]
    assert copies and all(r["value"] == pytest.approx(0.0, abs=1e-9) for r in copies)


def test_evaluate_generalization_contracts():
    samples = seg_dataset(icl=True, kind="table")
    state = init_params(tiny_model(n_points=96))
    bank = build_label_bank(8, seed=3)
    miou, baseline = evaluate_generalization(
        state, samples, bank=bank, label_mode="icl", seed=1
    )
    assert 0.0 <= miou <= 100.0
    assert baseline == pytest.approx(50.0)  # two-part family
    with pytest.raises(ValueError, match="static"):
        evaluate_generalization(state, samples, bank=bank, label_mode="static", seed=1)
    with pytest.raises(ValueError, match="overflow"):
        evaluate_generalization(
            state, samples, bank=build_label_bank(1, seed=0), label_mode="icl", seed=1
        )


def test_matched_vs_swapped_returns_means():
    samples = []
    for i in range(4):
        q = gen_shape("sphere", 64, seed=i)
        p = gen_shape("cube", 64, seed=50 + i)
        task = TaskKind("denoising", 3) if i % 2 else TaskKind("registration", 3)
        samples.append(assemble_sample(task, q, p, seed=i))
    state = init_params(tiny_model())
    matched, swapped = matched_vs_swapped_cd(state, samples, seed=0)
    assert np.isfinite(matched) and np.isfinite(swapped)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def test_metrics_tsv_format(tmp_path):
    rows = [
        {"task": "denoising", "level": 3, "metric": "cd_x1000", "value": 1.234567,
         "n_samples": 5, "seed": 0},
    ]
    path = str(tmp_path / "m.tsv")
    write_metrics_tsv(rows, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "task\tlevel\tmetric\tvalue\tn_samples\tseed"
    assert lines[1] == "denoising\t3\tcd_x1000\t1.234567\t5\t0"


def test_loss_log_format(tmp_path):
    path = str(tmp_path / "l.tsv")
    write_loss_log([(0, 1e-3, 2.5), (1, 9e-4, 2.25)], path)
    lines = open(path).read().splitlines()
    assert lines[0] == "step\tlr\tloss"
    assert lines[1].startswith("0\t0.001\t2.5")
