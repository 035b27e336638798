"""Command-line entry point: gen-data, train, eval, infer, export-pair,
inspect. Every command is deterministic given its flags and seed, reads a
flat key=value config file with flag overrides, and never mutates inputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .dataset_io import (
    read_cloud,
    read_dataset,
    read_manifest,
    read_pair,
    write_cloud,
    write_dataset,
    write_pair,
)
from .datagen import DatasetSpec, generate_dataset
from .icl_ice import LabelMapping, build_label_bank, draw_mapping, decode_labels, encode_labels
from .geometry import PointCloud
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .shapes import SHAPE_KINDS
from .taskgen import StaticLabelMap
from .train_eval import (
    AdamW,
    TrainConfig,
    evaluate,
    evaluate_generalization,
    infer,
    sample_parts,
    stream_seed,
    train,
    write_loss_log,
    write_metrics_tsv,
    write_run_manifest,
)

_SEED_ENV = "PIC_SEED"


def _env_seed() -> int:
    raw = os.environ.get(_SEED_ENV, "")
    try:
        return int(raw) if raw else 0
    except ValueError:
        raise SystemExit(f"invalid {_SEED_ENV} value: {raw!r}")


def _read_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """Fill unset flags from the config file; unknown keys are usage errors."""
    if not getattr(args, "config", None):
        return
    values = _read_config_file(args.config)
    known = vars(args)
    for key, raw in values.items():
        if key == "config" or key not in known:
            parser.error(f"unknown config key {key!r} in {args.config}")
        current = getattr(args, key)
        if isinstance(current, bool):
            if current is False:  # an explicit flag already set it True
                setattr(args, key, raw.lower() in ("1", "true", "yes"))
            continue
        if current is not None:
            continue  # explicit flag wins
        setattr(args, key, raw)


def _resolve(args, name, cast, default):
    value = getattr(args, name, None)
    if value is None:
        return default
    return cast(value)


def _csv(value: str) -> tuple:
    return tuple(x.strip() for x in str(value).split(",") if x.strip())


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _cmd_gen_data(parser, args) -> int:
    if args.icl and args.static_labels:
        parser.error("--icl and --static-labels are mutually exclusive")
    seed = _resolve(args, "seed", int, _env_seed())
    tasks = _csv(args.tasks or "all")
    if tasks == ("all",):
        tasks = ("reconstruction", "denoising", "registration", "segmentation")
    levels = tuple(int(x) for x in _csv(args.levels or "1,2,3,4,5"))
    shapes = _csv(args.shapes or ",".join(SHAPE_KINDS))
    spec = DatasetSpec(
        count=_resolve(args, "count", int, 100),
        tasks=tasks,
        levels=levels,
        shapes=shapes,
        n_points=_resolve(args, "n_points", int, 1024),
        seed=seed,
        label_mode="icl" if args.icl else "static",
        ice_mix=_resolve(args, "ice_mix", float, 0.0),
        dual_orientation=bool(args.dual_orientation),
        threads=_resolve(args, "threads", int, 1),
    )
    samples, manifest = generate_dataset(spec)
    write_dataset(samples, args.out, extra_manifest=manifest)
    counts = {}
    for s in samples:
        counts[s.task.kind] = counts.get(s.task.kind, 0) + 1
    print(f"wrote {len(samples)} samples to {args.out}")
    for kind in sorted(counts):
        print(f"  {kind}: {counts[kind]}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _model_config_from_args(args, seed: int, label_mode: str) -> ModelConfig:
    return ModelConfig(
        feature_dim=_resolve(args, "feature_dim", int, 96),
        encoder_depth=_resolve(args, "encoder_depth", int, 4),
        decoder_depth=_resolve(args, "decoder_depth", int, 2),
        heads=_resolve(args, "heads", int, 4),
        variant=_resolve(args, "variant", str, "sep"),
        n_c=_resolve(args, "n_c", int, 64),
        m=_resolve(args, "m", int, 32),
        mask_ratio=_resolve(args, "mask_ratio", float, 0.7),
        n_points=_resolve(args, "n_points", int, 1024),
        prompt_position=_resolve(args, "prompt_position", str, "before"),
        seed=seed,
    )


def _cmd_train(parser, args) -> int:
    seed = _resolve(args, "seed", int, _env_seed())
    samples = read_dataset(args.dataset)
    manifest = read_manifest(args.dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    label_mode = manifest.get("label_mode", "static")
    if label_mode == "none":
        label_mode = "static"
    train_config = TrainConfig(
        learning_rate=_resolve(args, "lr", float, 0.001),
        weight_decay=_resolve(args, "weight_decay", float, 0.05),
        epochs=_resolve(args, "epochs", int, 100),
        batch_size=_resolve(args, "batch_size", int, 16),
        loss_mode=_resolve(args, "loss", str, "cd"),
        label_mode=label_mode,
        n_b=_resolve(args, "nb", int, 8),
        seed=seed,
    )

    bank = None
    start_epoch = 0
    optimizer = None
    if args.resume:
        state, meta, extra = load_checkpoint(args.resume)
        train_config = TrainConfig.from_dict(meta["train"])
        train_config.epochs = _resolve(args, "epochs", int, train_config.epochs)
        start_epoch = meta["progress"]["epochs_done"]
        optimizer = AdamW.from_tensors(
            state.params, extra, meta["progress"]["opt_steps"], state.config.np_dtype
        )
        if "bank.points" in extra:
            bank = _bank_from_tensors(extra, meta)
    elif args.init_from:
        state, meta, extra = load_checkpoint(args.init_from)
    else:
        n_points = samples[0].n_points
        model_config = _model_config_from_args(args, seed, label_mode)
        if model_config.n_points != n_points:
            model_config = ModelConfig(**{**model_config.to_dict(), "n_points": n_points})
        state = init_params(model_config)

    if train_config.label_mode == "icl":
        max_parts = max(
            (len(np.unique(s.query_input.labels))
             for s in samples
             if s.task.kind == "segmentation" and s.query_input.labels is not None),
            default=0,
        )
        if max_parts > train_config.n_b:
            raise ValueError(
                f"pre-flight: dataset needs {max_parts} label points per sample "
                f"but bank size is {train_config.n_b}; raise --nb"
            )
        if bank is None:
            bank = build_label_bank(train_config.n_b, stream_seed(train_config.seed, 3))

    stop_epoch = _resolve(args, "stop_after", int, None) if getattr(args, "stop_after", None) else None
    result = train(
        samples, state, train_config, bank=bank,
        start_epoch=start_epoch, optimizer=optimizer, stop_epoch=stop_epoch,
    )
    extra_tensors = result.optimizer.tensors()
    extra_config = {
        "train": train_config.to_dict(),
        "label_mode": train_config.label_mode,
        "progress": {
            "epochs_done": result.epochs_done,
            "opt_steps": result.optimizer.t,
        },
        "dataset_parts": manifest.get("parts", ""),
    }
    if result.bank is not None:
        extra_tensors["bank.points"] = result.bank.points
        extra_config["bank_seed"] = result.bank.seed
    save_checkpoint(args.out, result.state, extra_config, extra_tensors)
    loss_path = args.out + ".loss.tsv"
    if args.resume and os.path.exists(args.resume + ".loss.tsv"):
        # splice: keep the prefix from the first run, append the new steps
        with open(args.resume + ".loss.tsv", encoding="utf-8") as fh:
            prior = fh.read().rstrip("\n").split("\n")
        first_new = result.loss_curve[0][0] if result.loss_curve else None
        kept = [prior[0]] + [
            ln for ln in prior[1:] if first_new is None or int(ln.split("\t")[0]) < first_new
        ]
        with open(loss_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(kept) + "\n")
            for step, lr, loss in result.loss_curve:
                fh.write(f"{step}\t{lr:.10g}\t{loss:.10g}\n")
    else:
        write_loss_log(result.loss_curve, loss_path)
    write_run_manifest(
        args.out + ".run.json",
        {"train": train_config.to_dict(), "model": result.state.config.to_dict()},
        {"dataset": args.dataset, "checkpoint": args.out},
    )
    final = result.loss_curve[-1][2] if result.loss_curve else float("nan")
    print(f"trained {train_config.epochs} epochs; final loss {final:.6f}")
    print(f"checkpoint: {args.out}")
    return 0


def _bank_from_tensors(extra: dict, meta: dict):
    from .icl_ice import LabelBank

    return LabelBank(extra["bank.points"].astype(np.float64), int(meta.get("bank_seed", 0)))


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _static_map_from_meta(meta: dict) -> StaticLabelMap | None:
    parts = meta.get("dataset_parts", "")
    if not parts:
        return None
    return StaticLabelMap.for_parts(int(p) for p in parts.split(","))


def _cmd_eval(parser, args) -> int:
    seed = _resolve(args, "seed", int, _env_seed())
    state, meta, extra = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.dataset)
    label_mode = meta.get("label_mode", "static")
    bank = _bank_from_tensors(extra, meta) if "bank.points" in extra else None

    if args.generalization:
        seg = [s for s in samples if s.task.kind == "segmentation"]
        miou, baseline = evaluate_generalization(
            state, seg, bank=bank, label_mode=label_mode, seed=seed,
            ideal_prompt=bool(args.ideal_prompt),
        )
        rows = [
            {"task": "segmentation", "level": "", "metric": "miou_percent",
             "value": miou, "n_samples": len(seg), "seed": seed},
            {"task": "segmentation", "level": "", "metric": "miou_random_baseline",
             "value": baseline, "n_samples": len(seg), "seed": seed},
        ]
    else:
        rows = evaluate(
            state, samples,
            strategy=_resolve(args, "strategy", str, "random"),
            bank=bank,
            label_mode=label_mode,
            static_map=_static_map_from_meta(meta),
            ideal_prompt=bool(args.ideal_prompt),
            seed=seed,
        )
    if not rows:
        raise ValueError("evaluation produced no metric rows (empty dataset?)")
    write_metrics_tsv(rows, args.out)
    write_run_manifest(
        args.out + ".run.json",
        {"eval": {"strategy": getattr(args, "strategy", None) or "random",
                  "ideal_prompt": bool(args.ideal_prompt),
                  "generalization": bool(args.generalization), "seed": seed},
         "model": state.config.to_dict()},
        {"dataset": args.dataset, "checkpoint": args.checkpoint, "metrics": args.out},
    )
    for row in rows:
        level = f" L{row['level']}" if row["level"] != "" else ""
        print(f"{row['task']}{level} {row['metric']} = {row['value']:.4f} (n={row['n_samples']})")
    return 0


# ---------------------------------------------------------------------------
# infer / export-pair / inspect
# ---------------------------------------------------------------------------

def _cmd_infer(parser, args) -> int:
    seed = _resolve(args, "seed", int, _env_seed())
    state, meta, extra = load_checkpoint(args.checkpoint)
    task, p_in, p_tg, mapping, pair_seed = read_pair(args.prompt)
    query = read_cloud(args.query)
    if task.kind == "segmentation" and mapping is None:
        raise ValueError("prompt pair file has no label mapping; segmentation needs one")
    pred = infer(state, (p_in, p_tg), query, task, mapping=mapping, seed=seed)
    pred_snapped = PointCloud(
        np.clip(pred.points, -1.0, 1.0), category=query.category
    )
    write_cloud(pred_snapped, args.out)
    print(f"wrote prediction ({len(pred_snapped)} points) to {args.out}")
    if task.kind == "segmentation":
        labels = decode_labels(pred_snapped, mapping)
        labels_path = args.labels_out or (args.out + ".labels.tsv")
        with open(labels_path, "w", encoding="utf-8") as fh:
            fh.write("index\tlabel\n")
            for i, l in enumerate(labels):
                fh.write(f"{i}\t{int(l)}\n")
        print(f"wrote decoded labels to {labels_path}")
    return 0


def _cmd_export_pair(parser, args) -> int:
    samples = read_dataset(args.dataset)
    manifest = read_manifest(args.dataset)
    index = _resolve(args, "index", int, 0)
    if not 0 <= index < len(samples):
        raise ValueError(f"index {index} out of range ({len(samples)} samples)")
    sample = samples[index]
    mapping = None
    p_tg = sample.prompt_target
    if sample.task.kind == "segmentation":
        label_mode = manifest.get("label_mode", "static")
        if label_mode == "icl":
            seed = _resolve(args, "seed", int, _env_seed())
            parts = sorted(
                set(sample_parts(sample))
                | set(int(p) for p in np.unique(sample.prompt_input.labels))
            )
            bank = build_label_bank(max(8, len(parts)), stream_seed(seed, 3))
            mapping = draw_mapping(bank, parts, stream_seed(seed, 5, index))
            p_tg = encode_labels(
                PointCloud(sample.prompt_input.points, sample.prompt_input.labels), mapping
            )
        else:
            parts = sample_parts(sample)
            static_map = StaticLabelMap.for_parts(
                int(p) for p in manifest.get("parts", "").split(",") if p
            )
            mapping = LabelMapping(
                {p: static_map.part_to_point[p] for p in parts},
                np.array(parts, dtype=np.int64),
            )
    write_pair(sample.task, sample.prompt_input, p_tg, args.out_pair,
               mapping=mapping, seed=sample.seed)
    write_cloud(sample.query_input, args.out_query)
    if args.out_target:
        write_cloud(sample.query_target, args.out_target)
    print(f"exported sample {index} ({sample.task.kind}) to {args.out_pair} / {args.out_query}")
    return 0


def _cmd_inspect(parser, args) -> int:
    if args.dataset:
        samples = read_dataset(args.dataset)
        manifest = read_manifest(args.dataset)
        print(f"dataset: {args.dataset}")
        print(f"samples: {len(samples)}")
        for key in sorted(manifest):
            if key.startswith("count.") or key in ("label_mode", "n_points", "parts"):
                print(f"  {key} = {manifest[key]}")
    if args.checkpoint:
        state, meta, extra = load_checkpoint(args.checkpoint)
        print(f"checkpoint: {args.checkpoint}")
        for key, value in sorted(meta.get("model", {}).items()):
            print(f"  model.{key} = {value}")
        if "train" in meta:
            for key, value in sorted(meta["train"].items()):
                print(f"  train.{key} = {value}")
        n_params = sum(int(np.prod(v.shape)) for v in state.params.values())
        print(f"  parameters = {n_params}")
        if extra:
            print(f"  extra tensors = {len(extra)}")
    if not args.dataset and not args.checkpoint:
        parser.error("inspect needs --dataset and/or --checkpoint")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="picl",
        description="In-context point cloud learning: datasets, training, "
        "evaluation and inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an in-context task dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--tasks", help="'all' or csv of task names")
    g.add_argument("--levels", help="csv of corruption levels (default 1..5)")
    g.add_argument("--shapes", help="csv of shape kinds")
    g.add_argument("--count")
    g.add_argument("--n-points", dest="n_points")
    g.add_argument("--seed")
    g.add_argument("--icl", action="store_true",
                   help="dynamic-label segmentation format")
    g.add_argument("--static-labels", action="store_true",
                   help="fixed label-point segmentation format (default)")
    g.add_argument("--ice-mix", dest="ice_mix",
                   help="fraction of restoration-pair samples")
    g.add_argument("--dual-orientation", dest="dual_orientation", action="store_true")
    g.add_argument("--threads")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", choices=("sep", "cat"))
    t.add_argument("--mask-ratio", dest="mask_ratio")
    t.add_argument("--epochs")
    t.add_argument("--batch-size", dest="batch_size")
    t.add_argument("--lr")
    t.add_argument("--weight-decay", dest="weight_decay")
    t.add_argument("--loss", choices=("cd", "sl1", "cd+sl1"))
    t.add_argument("--nb")
    t.add_argument("--seed")
    t.add_argument("--feature-dim", dest="feature_dim")
    t.add_argument("--encoder-depth", dest="encoder_depth")
    t.add_argument("--decoder-depth", dest="decoder_depth")
    t.add_argument("--heads")
    t.add_argument("--n-c", dest="n_c")
    t.add_argument("--m", dest="m")
    t.add_argument("--prompt-position", dest="prompt_position", choices=("before", "behind"))
    t.add_argument("--init-from", dest="init_from",
                   help="initialize parameters from an existing checkpoint")
    t.add_argument("--resume", help="continue an interrupted run exactly")
    t.add_argument("--stop-after", dest="stop_after",
                   help="stop after this many epochs (schedule still spans --epochs)")
    t.add_argument("--threads")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--strategy", choices=("random", "class", "cd", "fea"))
    e.add_argument("--ideal-prompt", dest="ideal_prompt", action="store_true")
    e.add_argument("--generalization", action="store_true")
    e.add_argument("--seed")
    e.add_argument("--threads")
    e.set_defaults(func=_cmd_eval)

    i = sub.add_parser("infer", help="predict one query target from a prompt pair")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--prompt", required=True, help="prompt pair file")
    i.add_argument("--query", required=True, help="query input cloud file")
    i.add_argument("--out", required=True)
    i.add_argument("--labels-out", dest="labels_out")
    i.add_argument("--config")
    i.add_argument("--seed")
    i.set_defaults(func=_cmd_infer)

    x = sub.add_parser("export-pair", help="extract a prompt pair + query from a dataset")
    x.add_argument("--dataset", required=True)
    x.add_argument("--index")
    x.add_argument("--out-pair", dest="out_pair", required=True)
    x.add_argument("--out-query", dest="out_query", required=True)
    x.add_argument("--out-target", dest="out_target")
    x.add_argument("--config")
    x.add_argument("--seed")
    x.set_defaults(func=_cmd_export_pair)

    n = sub.add_parser("inspect", help="summarize a dataset or checkpoint")
    n.add_argument("--dataset")
    n.add_argument("--checkpoint")
    n.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(parser, args)
    try:
        return args.func(parser, args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
