"""Dataset assembly: spreads a sample budget over tasks, levels and shapes.

Every sample owns an independent seeded stream derived from (global seed,
sample index), so generation is order-independent and a thread pool
produces byte-identical files to a serial run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .icl_ice import CORRUPTION_KINDS, CorruptionOp, build_label_bank, draw_mapping, make_ice_sample
from .shapes import COMPOSITE_KINDS, SHAPE_KINDS, gen_shape, part_ids
from .taskgen import (
    LEVELED_TASKS,
    StaticLabelMap,
    TaskKind,
    assemble_sample,
    round_half_up,
)
from .train_eval import stream_seed

__all__ = ["DatasetSpec", "generate_dataset"]

STANDARD_TASKS = ("reconstruction", "denoising", "registration", "segmentation")


@dataclass
class DatasetSpec:
    count: int = 100
    tasks: tuple = STANDARD_TASKS
    levels: tuple = (1, 2, 3, 4, 5)
    shapes: tuple = SHAPE_KINDS
    n_points: int = 1024
    seed: int = 0
    label_mode: str = "static"  # "static" | "icl"
    ice_mix: float = 0.0
    dual_orientation: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        unknown = [t for t in self.tasks if t not in STANDARD_TASKS]
        if unknown:
            raise ValueError(f"unknown tasks: {unknown}")
        if not all(l in (1, 2, 3, 4, 5) for l in self.levels):
            raise ValueError("levels must be within 1..5")
        unknown = [s for s in self.shapes if s not in SHAPE_KINDS]
        if unknown:
            raise ValueError(f"unknown shapes: {unknown}")
        if not 0.0 <= self.ice_mix <= 1.0:
            raise ValueError("ice_mix must lie in [0, 1]")
        if self.label_mode not in ("static", "icl"):
            raise ValueError("label_mode must be 'static' or 'icl'")
        if "segmentation" in self.tasks and not any(s in COMPOSITE_KINDS for s in self.shapes):
            raise ValueError("segmentation requires at least one labeled shape kind")


def _assign_task(spec: DatasetSpec, i: int) -> TaskKind:
    """Round-robin across tasks first, then levels, so any budget spreads
    evenly over tasks."""
    task = spec.tasks[i % len(spec.tasks)]
    if task in LEVELED_TASKS:
        occurrence = i // len(spec.tasks)
        return TaskKind(task, spec.levels[occurrence % len(spec.levels)])
    return TaskKind(task)


def generate_dataset(spec: DatasetSpec):
    """Build the sample list plus manifest entries describing the dataset."""
    n_ice = round_half_up(spec.count * spec.ice_mix)
    n_std = spec.count - n_ice
    assignments = [_assign_task(spec, i) for i in range(n_std)]
    assignments += [TaskKind("ice")] * n_ice

    composite = [s for s in spec.shapes if s in COMPOSITE_KINDS]
    all_parts = sorted({p for s in composite for p in part_ids(s)})
    static_map = StaticLabelMap.for_parts(all_parts) if all_parts else None
    gen_bank = (
        build_label_bank(max(8, max((len(part_ids(s)) for s in composite), default=1)),
                         stream_seed(spec.seed, 7))
        if spec.label_mode == "icl" and composite
        else None
    )

    def build(i: int):
        task = assignments[i]
        sample_seed = stream_seed(spec.seed, 11, i)
        rng = np.random.default_rng(sample_seed)
        if task.kind == "segmentation":
            kind = composite[int(rng.integers(len(composite)))]
            query = gen_shape(kind, spec.n_points, seed=int(rng.integers(2**31)))
            prompt = gen_shape(kind, spec.n_points, seed=int(rng.integers(2**31)))
            if spec.label_mode == "icl":
                mapping = draw_mapping(gen_bank, part_ids(kind), int(rng.integers(2**31)))
                return assemble_sample(task, query, prompt, sample_seed, label_mapping=mapping)
            return assemble_sample(task, query, prompt, sample_seed, label_map=static_map)
        if task.kind == "ice":
            kinds = spec.shapes
            kq = kinds[int(rng.integers(len(kinds)))]
            kp = kinds[int(rng.integers(len(kinds)))]
            query = gen_shape(kq, spec.n_points, seed=int(rng.integers(2**31)))
            prompt = gen_shape(kp, spec.n_points, seed=int(rng.integers(2**31)))
            op = CorruptionOp(CORRUPTION_KINDS[int(rng.integers(len(CORRUPTION_KINDS)))])
            seeds = (int(rng.integers(2**31)), int(rng.integers(2**31)))
            return make_ice_sample(query, prompt, op, seeds, sample_seed)
        kq = spec.shapes[int(rng.integers(len(spec.shapes)))]
        kp = spec.shapes[int(rng.integers(len(spec.shapes)))]
        query = gen_shape(kq, spec.n_points, seed=int(rng.integers(2**31)))
        prompt = gen_shape(kp, spec.n_points, seed=int(rng.integers(2**31)))
        return assemble_sample(
            task, query, prompt, sample_seed, dual_orientation=spec.dual_orientation
        )

    indices = range(spec.count)
    if spec.threads > 1 and spec.count > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            samples = list(pool.map(build, indices))
    else:
        samples = [build(i) for i in indices]

    manifest = {
        "label_mode": spec.label_mode if composite and "segmentation" in spec.tasks else "none",
        "n_points": spec.n_points,
        "global_seed": spec.seed,
        "shapes": ",".join(spec.shapes),
        "parts": ",".join(str(p) for p in all_parts),
    }
    return samples, manifest
