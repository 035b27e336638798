"""Training loop, inference with reassembly, prompt selection, metrics.

Training is deterministic end to end: batch order, masks and per-sample
label mappings are all derived from (seed, epoch, sample index), so an
interrupted run resumed from a checkpoint reproduces the uninterrupted
loss curve bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset_io import file_hash
from .geometry import PointCloud, chamfer_l2, instance_miou, knn_grouped
from .icl_ice import LabelBank, LabelMapping, build_label_bank, decode_labels, draw_mapping, encode_labels
from .model import ModelConfig, ModelState, _track_layout, backward, forward_batch
from .sampling import joint_sample, training_track_mask
from .taskgen import InContextSample, StaticLabelMap

__all__ = [
    "TrainConfig",
    "PROMPT_STRATEGIES",
    "compute_loss",
    "cosine_lr",
    "AdamW",
    "train",
    "TrainResult",
    "infer",
    "inference_mask",
    "select_prompt",
    "shape_descriptor",
    "evaluate",
    "evaluate_generalization",
    "matched_vs_swapped_cd",
    "write_metrics_tsv",
    "write_run_manifest",
    "write_loss_log",
    "sample_parts",
]

PROMPT_STRATEGIES = ("random", "class", "cd", "fea")

LOSS_MODES = ("cd", "sl1", "cd+sl1")

# fixed stream tags so every random draw has its own derived seed
_STREAM_ORDER, _STREAM_MASK, _STREAM_MAP, _STREAM_JS, _STREAM_EVAL = 1, 2, 3, 4, 5


def stream_seed(*keys: int) -> int:
    """Deterministic u64 from a tuple of integer keys."""
    return int(np.random.SeedSequence(tuple(int(k) for k in keys)).generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.05
    epochs: int = 100
    batch_size: int = 16
    loss_mode: str = "cd"
    smooth_l1_beta: float = 1.0
    label_mode: str = "static"  # "static" | "icl"
    n_b: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.label_mode not in ("static", "icl"):
            raise ValueError("label_mode must be 'static' or 'icl'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to exactly 0 at the final step."""
    if total_steps <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * step / (total_steps - 1))))


def compute_loss(pred, gt, mode: str = "cd", beta: float = 1.0):
    """Loss over masked patches: Chamfer, smooth-L1 or their unweighted sum.

    ``pred`` may be a recorded Tensor (training) or a plain array; the
    return type follows the input.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    is_tensor = isinstance(pred, Tensor)
    t = pred if is_tensor else Tensor(np.asarray(pred))
    gt = np.asarray(gt, dtype=t.dtype)
    if t.shape != gt.shape:
        raise ValueError(f"prediction/target shape mismatch: {t.shape} vs {gt.shape}")
    terms = []
    if mode in ("cd", "cd+sl1"):
        terms.append(ad.chamfer_patches(t, gt))
    if mode in ("sl1", "cd+sl1"):
        terms.append(ad.smooth_l1_elems(t, gt, beta=beta))
    loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return loss if is_tensor else loss.item()


class AdamW:
    """Decoupled weight decay Adam; decay is scaled by the step size."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float, weight_decay: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in params:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            params[name] = params[name] - lr * (
                mhat / (np.sqrt(vhat) + self.eps) + weight_decay * params[name]
            )

    def tensors(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_tensors(cls, params: dict, tensors: dict, t: int, dtype) -> "AdamW":
        opt = cls(params)
        opt.t = t
        for name in params:
            opt.m[name] = tensors[f"opt.m.{name}"].astype(dtype)
            opt.v[name] = tensors[f"opt.v.{name}"].astype(dtype)
        return opt


def sample_parts(sample: InContextSample):
    """Part ids present in a segmentation sample (from the query's labels)."""
    if sample.query_input.labels is None:
        return None
    return sorted(int(p) for p in np.unique(sample.query_input.labels))


# ---------------------------------------------------------------------------
# per-sample preprocessing cache
# ---------------------------------------------------------------------------

@dataclass
class _Prepared:
    """Joint-sampled arrays for one sample; ICL targets refresh per epoch."""

    patches: np.ndarray  # (4, n_c, m, 3) float32
    centers: np.ndarray  # (4, n_c, 3) float32
    center_idx: np.ndarray  # (2, n_c): prompt / query center indices
    icl_seg: bool = False
    prompt_labels: np.ndarray | None = None
    query_labels: np.ndarray | None = None
    parts: list | None = None


def _prepare_sample(sample: InContextSample, config: ModelConfig, icl: bool) -> _Prepared:
    js_seed_p = stream_seed(sample.seed, _STREAM_JS, 0)
    js_seed_q = stream_seed(sample.seed, _STREAM_JS, 1)
    pi, pt = joint_sample(sample.prompt_input, sample.prompt_target, config.n_c, config.m,
                          js_seed_p, sources=("prompt-input", "prompt-target"))
    qi, qt = joint_sample(sample.query_input, sample.query_target, config.n_c, config.m,
                          js_seed_q, sources=("query-input", "query-target"))
    patches = np.stack([s.patches for s in (pi, pt, qi, qt)]).astype(np.float32)
    centers = np.stack([s.centers for s in (pi, pt, qi, qt)]).astype(np.float32)
    icl_seg = icl and sample.task.kind == "segmentation"
    prepared = _Prepared(
        patches,
        centers,
        np.stack([pi.center_indices, qi.center_indices]),
        icl_seg=icl_seg,
    )
    if icl_seg:
        if sample.prompt_input.labels is None or sample.query_input.labels is None:
            raise ValueError("dynamic labeling requires labeled segmentation samples")
        prepared.prompt_labels = sample.prompt_input.labels
        prepared.query_labels = sample.query_input.labels
        prepared.parts = sorted(
            set(np.unique(prepared.prompt_labels)) | set(np.unique(prepared.query_labels))
        )
    return prepared


def _refresh_icl_targets(
    prep: _Prepared,
    sample: InContextSample,
    bank: LabelBank,
    config: ModelConfig,
    map_seed: int,
) -> None:
    """Re-draw the sample's mapping and rebuild both target tracks."""
    mapping = draw_mapping(bank, prep.parts, map_seed)
    for role, labels, cloud in (
        (1, prep.prompt_labels, sample.prompt_input),
        (3, prep.query_labels, sample.query_input),
    ):
        encoded = encode_labels(PointCloud(cloud.points, labels), mapping)
        centers_idx = prep.center_idx[0 if role == 1 else 1]
        neigh = knn_grouped(encoded.points, centers_idx, config.m)
        prep.patches[role] = encoded.points[neigh].astype(np.float32)
        prep.centers[role] = encoded.points[centers_idx].astype(np.float32)


@dataclass
class TrainResult:
    state: ModelState
    loss_curve: list  # (step, lr, loss) tuples
    optimizer: AdamW
    epochs_done: int
    bank: LabelBank | None = None


def train(
    samples,
    state: ModelState,
    train_config: TrainConfig,
    bank: LabelBank | None = None,
    start_epoch: int = 0,
    optimizer: AdamW | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Run the masked-point training loop over mixed-task samples.

    The cosine horizon always spans ``train_config.epochs``;
    ``stop_epoch`` ends the run early (for later resumption) and
    ``start_epoch``/``optimizer`` continue one exactly: all stochastic
    choices are keyed by absolute epoch index, so the spliced loss curve
    matches an uninterrupted run bit for bit.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    config = state.config
    icl = train_config.label_mode == "icl"
    if icl and bank is None:
        bank = build_label_bank(train_config.n_b, stream_seed(train_config.seed, _STREAM_MAP))
    if icl:
        max_parts = max(
            (len(np.unique(s.query_input.labels)) for s in samples
             if s.task.kind == "segmentation" and s.query_input.labels is not None),
            default=0,
        )
        if max_parts > bank.size:
            raise ValueError(
                f"bank overflow: dataset has samples with {max_parts} parts, bank size {bank.size}"
            )

    prepared = [_prepare_sample(s, config, icl) for s in samples]
    n = len(samples)
    end_epoch = train_config.epochs if stop_epoch is None else min(stop_epoch, train_config.epochs)
    batches_per_epoch = (n + train_config.batch_size - 1) // train_config.batch_size
    total_steps = train_config.epochs * batches_per_epoch
    optimizer = optimizer or AdamW(state.params)
    loss_curve = []
    step = start_epoch * batches_per_epoch

    for epoch in range(start_epoch, end_epoch):
        order = np.random.default_rng(
            stream_seed(train_config.seed, _STREAM_ORDER, epoch)
        ).permutation(n)
        for idx in order:
            if prepared[idx].icl_seg:
                _refresh_icl_targets(
                    prepared[idx], samples[idx], bank, config,
                    stream_seed(train_config.seed, _STREAM_MAP, epoch, idx),
                )
        for b0 in range(0, n, train_config.batch_size):
            batch_idx = order[b0 : b0 + train_config.batch_size]
            patches = np.stack([prepared[i].patches for i in batch_idx])
            centers = np.stack([prepared[i].centers for i in batch_idx])
            masks = np.stack(
                [
                    training_track_mask(
                        config.n_c, config.variant, config.mask_ratio,
                        stream_seed(train_config.seed, _STREAM_MASK, epoch, i),
                    )
                    for i in batch_idx
                ]
            )
            result = forward_batch(state, patches, centers, masks, record=True)
            loss = compute_loss(
                result.patches, result.gt_patches, train_config.loss_mode,
                beta=train_config.smooth_l1_beta,
            )
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise RuntimeError(f"non-finite loss {loss_val} at step {step}")
            grads = backward(loss, result)
            lr = cosine_lr(step, total_steps, train_config.learning_rate)
            optimizer.step(state.params, grads, lr, train_config.weight_decay)
            loss_curve.append((step, lr, loss_val))
            step += 1

    return TrainResult(state, loss_curve, optimizer, end_epoch, bank)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def inference_mask(config: ModelConfig) -> np.ndarray:
    """Track mask with exactly the query-target segment masked."""
    if config.variant == "sep":
        _, target_roles = _track_layout(config)
        roles = target_roles
    else:
        roles, _ = _track_layout(config)
    flags = np.zeros(len(roles) * config.n_c, dtype=bool)
    seg = roles.index(3)
    flags[seg * config.n_c : (seg + 1) * config.n_c] = True
    return flags


def infer(
    state: ModelState,
    prompt_pair: "tuple[PointCloud, PointCloud]",
    query_input: PointCloud,
    task,
    mapping: LabelMapping | None = None,
    seed: int = 0,
) -> PointCloud:
    """Predict the query target given a fully visible prompt pair.

    The model predicts patches at every masked query-target position;
    patch points land at the query input's neighborhood indices, multiple
    predictions per point are averaged, and never-covered points borrow
    the prediction of their nearest covered neighbor.
    """
    if task.kind == "segmentation" and mapping is None:
        raise ValueError("segmentation inference requires the prompt's label mapping")
    config = state.config
    prompt_input, prompt_target = prompt_pair
    pi, pt = joint_sample(prompt_input, prompt_target, config.n_c, config.m,
                          stream_seed(seed, _STREAM_JS, 0),
                          sources=("prompt-input", "prompt-target"))
    # the query target is unknown; its patch content is fully masked, so any
    # stand-in works - the leakage contract guarantees it cannot influence
    # the output
    qi, qt = joint_sample(query_input, query_input, config.n_c, config.m,
                          stream_seed(seed, _STREAM_JS, 1),
                          sources=("query-input", "query-target"))
    patches = np.stack([s.patches for s in (pi, pt, qi, qt)]).astype(np.float32)[None]
    centers = np.stack([s.centers for s in (pi, pt, qi, qt)]).astype(np.float32)[None]
    mask = inference_mask(config)[None]
    result = forward_batch(state, patches, centers, mask)
    preds = result.numpy_patches()[0]  # (n_c, m, 3) in query-target segment order

    if config.variant == "sep":
        _, roles = _track_layout(config)
    else:
        roles, _ = _track_layout(config)
    seg_offset = roles.index(3) * config.n_c
    ranks = result.masked_positions[0] - seg_offset

    n = len(query_input)
    sums = np.zeros((n, 3))
    counts = np.zeros(n)
    for rank, patch in zip(ranks, preds):
        idx = qi.neighbor_indices[rank]
        np.add.at(sums, idx, patch.astype(np.float64))
        np.add.at(counts, idx, 1.0)
    covered = counts > 0
    out = np.zeros((n, 3))
    out[covered] = sums[covered] / counts[covered, None]
    if not covered.all():
        src = np.flatnonzero(covered)
        for p in np.flatnonzero(~covered):
            d2 = np.sum((query_input.points[src] - query_input.points[p]) ** 2, axis=1)
            out[p] = out[src[int(np.argmin(d2))]]
    return PointCloud(out, category=query_input.category)


# ---------------------------------------------------------------------------
# prompt selection
# ---------------------------------------------------------------------------

def shape_descriptor(cloud: PointCloud) -> np.ndarray:
    """16-dim handcrafted descriptor: centroid, sorted covariance
    eigenvalues, and a 10-bin radial histogram."""
    pts = cloud.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    eigvals = np.sort(np.linalg.eigvalsh(cov))
    radii = np.linalg.norm(centered, axis=1)
    hist, _ = np.histogram(radii, bins=10, range=(0.0, np.sqrt(3.0)))
    hist = hist / len(pts)
    return np.concatenate([centroid, eigvals, hist])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def select_prompt(strategy: str, query: InContextSample, pool, seed: int = 0) -> InContextSample:
    """Pick the pool sample whose prompt pair conditions the query.

    random: uniform; class: uniform within the query's category;
    cd: minimum Chamfer distance between prompt input and query input;
    fea: maximum cosine similarity of the handcrafted descriptor.
    """
    if strategy not in PROMPT_STRATEGIES:
        raise ValueError(f"unknown prompt strategy {strategy!r}")
    pool = list(pool)
    if not pool:
        raise ValueError("prompt pool is empty")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return pool[int(rng.integers(len(pool)))]
    if strategy == "class":
        same = [s for s in pool if s.prompt_input.category == query.query_input.category]
        candidates = same or pool
        rng = np.random.default_rng(seed)
        return candidates[int(rng.integers(len(candidates)))]
    if strategy == "cd":
        scores = [chamfer_l2(s.prompt_input, query.query_input) for s in pool]
        return pool[int(np.argmin(scores))]
    desc_q = shape_descriptor(query.query_input)
    scores = [_cosine(shape_descriptor(s.prompt_input), desc_q) for s in pool]
    return pool[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _static_map_for(samples) -> StaticLabelMap:
    parts = set()
    for s in samples:
        sp = sample_parts(s)
        if sp:
            parts.update(sp)
    return StaticLabelMap.for_parts(sorted(parts))


def _prompt_for(
    sample: InContextSample,
    pool,
    strategy: str,
    ideal_prompt: bool,
    seed: int,
):
    if ideal_prompt:
        return sample, (sample.query_input, sample.query_target)
    task_pool = [s for s in pool if s.task == sample.task]
    chosen = select_prompt(strategy, sample, task_pool or [sample], seed=seed)
    return chosen, (chosen.prompt_input, chosen.prompt_target)


def evaluate(
    state: ModelState,
    samples,
    strategy: str = "random",
    *,
    pool=None,
    bank: LabelBank | None = None,
    label_mode: str = "static",
    static_map: StaticLabelMap | None = None,
    ideal_prompt: bool = False,
    include_copy: bool = True,
    seed: int = 0,
):
    """Per-task metric rows: CD x1000 by corruption level, mIoU for
    segmentation, plus the copy-the-prompt floor baseline.

    Returns a list of row dicts with keys task, level, metric, value,
    n_samples, seed.
    """
    if label_mode == "icl" and bank is None:
        raise ValueError("dynamic-label evaluation requires the checkpoint's bank")
    pool = list(pool) if pool is not None else list(samples)
    if label_mode == "static" and static_map is None:
        seg = [s for s in samples if s.task.kind == "segmentation"]
        static_map = _static_map_for(seg + [s for s in pool if s.task.kind == "segmentation"]) if seg else None

    groups: dict = {}
    for i, sample in enumerate(samples):
        groups.setdefault((sample.task.kind, sample.task.level), []).append((i, sample))

    rows = []
    for (kind, level), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        cd_vals, copy_cd_vals = [], []
        miou_vals, copy_miou_vals = [], []
        for i, sample in members:
            sel_seed = stream_seed(seed, _STREAM_EVAL, i)
            chosen, (p_in, p_tg) = _prompt_for(sample, pool, strategy, ideal_prompt, sel_seed)
            mapping = None
            if kind == "segmentation":
                gt_labels = sample.query_input.labels
                parts = sample_parts(sample)
                if gt_labels is None or parts is None:
                    raise ValueError("segmentation sample without labels")
                if label_mode == "icl":
                    all_parts = sorted(set(parts) | set(sample_parts(chosen) or parts))
                    mapping = draw_mapping(bank, all_parts, stream_seed(seed, _STREAM_MAP, i))
                    prompt_labels = (
                        sample.query_input.labels if ideal_prompt else chosen.prompt_input.labels
                    )
                    if prompt_labels is None:
                        raise ValueError("dynamic labeling requires labeled prompts")
                    p_tg = encode_labels(PointCloud(p_in.points, prompt_labels), mapping)
                else:
                    missing = [p for p in parts if p not in static_map.part_to_point]
                    if missing:
                        raise ValueError(
                            f"static label map cannot host novel parts {missing}; "
                            "re-train with dynamic labels to segment new categories"
                        )
                    mapping = LabelMapping(
                        {p: static_map.part_to_point[p] for p in parts},
                        np.array(parts, dtype=np.int64),
                    )
            pred = infer(state, (p_in, p_tg), sample.query_input, sample.task,
                         mapping=mapping, seed=stream_seed(seed, _STREAM_EVAL, i, 1))
            if kind == "segmentation":
                if label_mode == "icl":
                    pred_labels = decode_labels(pred, mapping)
                    copy_labels = decode_labels(p_tg, mapping) if include_copy else None
                else:
                    pred_labels = static_map.decode(pred.points)
                    copy_labels = static_map.decode(p_tg.points) if include_copy else None
                miou_vals.append(instance_miou(pred_labels, gt_labels, parts))
                if include_copy:
                    copy_miou_vals.append(instance_miou(copy_labels, gt_labels, parts))
            else:
                cd_vals.append(1000.0 * chamfer_l2(pred, sample.query_target))
                if include_copy:
                    copy_cd_vals.append(1000.0 * chamfer_l2(p_tg, sample.query_target))
        base = {"task": kind, "level": level if level is not None else "", "n_samples": len(members), "seed": seed}
        if miou_vals:
            rows.append({**base, "metric": "miou_percent", "value": float(np.mean(miou_vals))})
            if include_copy:
                rows.append({**base, "metric": "miou_percent_copy", "value": float(np.mean(copy_miou_vals))})
        if cd_vals:
            rows.append({**base, "metric": "cd_x1000", "value": float(np.mean(cd_vals))})
            if include_copy:
                rows.append({**base, "metric": "cd_x1000_copy", "value": float(np.mean(copy_cd_vals))})
    return rows


def evaluate_generalization(
    state: ModelState,
    held_out,
    *,
    bank: LabelBank | None,
    label_mode: str,
    seed: int = 0,
    ideal_prompt: bool = False,
):
    """One-shot segmentation on categories absent from training.

    Every query gets a fresh mapping and one prompt from its own category
    in the held-out pool. Only dynamic-label models can do this; static
    maps have no points for novel parts and are refused.

    Returns (mean mIoU, analytic random-assignment baseline in percent).
    """
    if label_mode != "icl":
        raise ValueError(
            "static label map cannot host novel parts; generalization "
            "evaluation requires a dynamic-label (icl) checkpoint"
        )
    if bank is None:
        raise ValueError("generalization evaluation requires the checkpoint's bank")
    held_out = list(held_out)
    if not held_out:
        raise ValueError("held-out dataset is empty")
    by_cat: dict = {}
    for s in held_out:
        by_cat.setdefault(s.query_input.category, []).append(s)

    mious, baselines = [], []
    for i, sample in enumerate(held_out):
        parts = sample_parts(sample)
        if parts is None:
            raise ValueError("generalization samples must be labeled")
        if len(parts) > bank.size:
            raise ValueError(
                f"bank overflow: held-out sample has {len(parts)} parts, bank size {bank.size}"
            )
        if ideal_prompt:
            prompt_sample = sample
        else:
            candidates = by_cat[sample.query_input.category]
            rng = np.random.default_rng(stream_seed(seed, _STREAM_EVAL, i))
            prompt_sample = candidates[int(rng.integers(len(candidates)))]
        prompt_labels = (
            sample.query_input.labels if ideal_prompt else prompt_sample.prompt_input.labels
        )
        prompt_cloud = (
            sample.query_input if ideal_prompt else prompt_sample.prompt_input
        )
        all_parts = sorted(set(parts) | set(int(p) for p in np.unique(prompt_labels)))
        mapping = draw_mapping(bank, all_parts, stream_seed(seed, _STREAM_MAP, i))
        p_tg = encode_labels(PointCloud(prompt_cloud.points, prompt_labels), mapping)
        pred = infer(state, (prompt_cloud, p_tg), sample.query_input, sample.task,
                     mapping=mapping, seed=stream_seed(seed, _STREAM_EVAL, i, 1))
        pred_labels = decode_labels(pred, mapping)
        mious.append(instance_miou(pred_labels, sample.query_input.labels, parts))
        baselines.append(100.0 / len(parts))
    return float(np.mean(mious)), float(np.mean(baselines))


def matched_vs_swapped_cd(state: ModelState, samples, seed: int = 0):
    """Mean prediction CD with task-matching prompts vs prompts swapped in
    from the other task. Needs a two-task evaluation set."""
    samples = list(samples)
    tasks = sorted({s.task for s in samples}, key=lambda t: (t.kind, t.level or 0))
    if len(tasks) != 2:
        raise ValueError("matched/swapped comparison needs exactly two tasks")
    by_task = {t: [s for s in samples if s.task == t] for t in tasks}
    matched, swapped = [], []
    for t_i, task in enumerate(tasks):
        other = tasks[1 - t_i]
        rng = np.random.default_rng(stream_seed(seed, _STREAM_EVAL, t_i))
        for sample in by_task[task]:
            pred = infer(state, (sample.prompt_input, sample.prompt_target),
                         sample.query_input, sample.task, seed=seed)
            matched.append(1000.0 * chamfer_l2(pred, sample.query_target))
            donor = by_task[other][int(rng.integers(len(by_task[other])))]
            pred = infer(state, (donor.prompt_input, donor.prompt_target),
                         sample.query_input, sample.task, seed=seed)
            swapped.append(1000.0 * chamfer_l2(pred, sample.query_target))
    return float(np.mean(matched)), float(np.mean(swapped))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def write_metrics_tsv(rows, path: str) -> None:
    columns = ("task", "level", "metric", "value", "n_samples", "seed")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write(
                "\t".join(
                    f"{row[c]:.6f}" if c == "value" else str(row[c]) for c in columns
                )
                + "\n"
            )


def write_run_manifest(path: str, config_echo: dict, files: dict) -> None:
    """Machine-readable run record: config echo plus content hashes."""
    manifest = {
        "config": config_echo,
        "hashes": {name: file_hash(p) for name, p in sorted(files.items()) if os.path.exists(p)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_loss_log(loss_curve, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tlr\tloss\n")
        for step, lr, loss in loss_curve:
            fh.write(f"{step}\t{lr:.10g}\t{loss:.10g}\n")
