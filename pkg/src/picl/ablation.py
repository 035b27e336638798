"""Ablation harness: sweeps over mask ratio, loss mode and bank size.

Each sweep trains a fresh model per setting at the caller's (typically
toy) scale, evaluates it, and returns TSV-ready rows. Directional claims
are reported, never asserted; at desk scale they are capacity-dependent.
"""

from __future__ import annotations

from dataclasses import replace

from .model import ModelConfig, init_params
from .train_eval import TrainConfig, evaluate, train

__all__ = [
    "run_mask_ratio_sweep",
    "run_loss_mode_sweep",
    "run_bank_size_sweep",
    "write_sweep_tsv",
]

MASK_RATIOS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
LOSS_MODES = ("cd", "sl1", "cd+sl1")
BANK_SIZES = (8, 20, 50)


def _train_and_eval(samples, eval_samples, model_config, train_config, bank_size=None):
    tc = train_config if bank_size is None else replace(train_config, n_b=bank_size)
    state = init_params(model_config)
    result = train(samples, state, tc)
    rows = evaluate(
        result.state,
        eval_samples,
        strategy="random",
        pool=samples,
        bank=result.bank,
        label_mode=tc.label_mode,
        include_copy=False,
        seed=tc.seed,
    )
    final_loss = result.loss_curve[-1][2]
    return rows, final_loss


def run_mask_ratio_sweep(samples, eval_samples, model_config, train_config, ratios=MASK_RATIOS):
    out = []
    for ratio in ratios:
        cfg = replace(model_config, mask_ratio=ratio)
        rows, final_loss = _train_and_eval(samples, eval_samples, cfg, train_config)
        for row in rows:
            out.append({"setting": f"mask_ratio={ratio}", **row})
        out.append(
            {"setting": f"mask_ratio={ratio}", "task": "train", "level": "",
             "metric": "final_loss", "value": final_loss,
             "n_samples": len(samples), "seed": train_config.seed}
        )
    return out


def run_loss_mode_sweep(samples, eval_samples, model_config, train_config, modes=LOSS_MODES):
    out = []
    for mode in modes:
        tc = replace(train_config, loss_mode=mode)
        rows, final_loss = _train_and_eval(samples, eval_samples, model_config, tc)
        for row in rows:
            out.append({"setting": f"loss={mode}", **row})
        out.append(
            {"setting": f"loss={mode}", "task": "train", "level": "",
             "metric": "final_loss", "value": final_loss,
             "n_samples": len(samples), "seed": tc.seed}
        )
    return out


def run_bank_size_sweep(samples, eval_samples, model_config, train_config, sizes=BANK_SIZES):
    if train_config.label_mode != "icl":
        raise ValueError("bank size sweep requires dynamic labels (label_mode='icl')")
    out = []
    for n_b in sizes:
        rows, final_loss = _train_and_eval(
            samples, eval_samples, model_config, train_config, bank_size=n_b
        )
        for row in rows:
            out.append({"setting": f"n_b={n_b}", **row})
        out.append(
            {"setting": f"n_b={n_b}", "task": "train", "level": "",
             "metric": "final_loss", "value": final_loss,
             "n_samples": len(samples), "seed": train_config.seed}
        )
    return out


def write_sweep_tsv(rows, path: str) -> None:
    columns = ("setting", "task", "level", "metric", "value", "n_samples", "seed")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write(
                "\t".join(
                    f"{row[c]:.6f}" if c == "value" else str(row[c]) for c in columns
                )
                + "\n"
            )
