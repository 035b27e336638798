import os

import numpy as np
import pytest

from picl.cli import main
from picl.dataset_io import file_hash, read_cloud, read_dataset, read_manifest


TINY_MODEL = [
    "--feature-dim", "32", "--encoder-depth", "2", "--decoder-depth", "1",
    "--heads", "2", "--n-c", "8", "--m", "8",
]


def gen(tmp_path, name="data.pic", extra=(), count=12, seed=3):
    path = str(tmp_path / name)
    rc = main([
        "gen-data", "--out", path, "--tasks", "all", "--count", str(count),
        "--n-points", "96", "--shapes", "sphere,cube,table,lamp",
        "--seed", str(seed), *extra,
    ])
    assert rc == 0
    return path


def train(tmp_path, data, name="model.ckpt", extra=()):
    ckpt = str(tmp_path / name)
    rc = main([
        "train", "--dataset", data, "--out", ckpt, "--epochs", "3",
        "--batch-size", "4", "--seed", "5", *TINY_MODEL, *extra,
    ])
    assert rc == 0
    return ckpt


def test_gen_data_counts_and_rerun_identical(tmp_path, capsys):
    p1 = gen(tmp_path, "a.pic")
    out = capsys.readouterr().out
    assert "wrote 12 samples" in out
    p2 = gen(tmp_path, "b.pic")
    assert file_hash(p1) == file_hash(p2)
    assert open(p1 + ".manifest").read() == open(p2 + ".manifest").read()
    manifest = read_manifest(p1)
    total = sum(
        int(v) for k, v in manifest.items()
        if k.startswith("count.task.") and k.count(".") == 2
    )
    assert total == 12


def test_gen_data_count_zero_valid(tmp_path):
    path = str(tmp_path / "empty.pic")
    assert main(["gen-data", "--out", path, "--count", "0", "--seed", "1"]) == 0
    assert read_dataset(path) == []


def test_icl_and_static_labels_conflict(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path / "x.pic"), "--icl", "--static-labels"])
    assert exc.value.code == 2


def test_train_eval_infer_round_trip(tmp_path, capsys):
    data = gen(tmp_path)
    ckpt = train(tmp_path, data)
    assert os.path.exists(ckpt + ".loss.tsv")
    assert os.path.exists(ckpt + ".run.json")

    metrics = str(tmp_path / "metrics.tsv")
    rc = main(["eval", "--checkpoint", ckpt, "--dataset", data,
               "--out", metrics, "--strategy", "cd", "--seed", "7"])
    assert rc == 0
    lines = open(metrics).read().splitlines()
    assert lines[0].split("\t") == ["task", "level", "metric", "value", "n_samples", "seed"]
    assert len(lines) > 1

    pair = str(tmp_path / "pair.picp")
    query = str(tmp_path / "query.picc")
    rc = main(["export-pair", "--dataset", data, "--index", "0",
               "--out-pair", pair, "--out-query", query])
    assert rc == 0
    pred = str(tmp_path / "pred.picc")
    rc = main(["infer", "--checkpoint", ckpt, "--prompt", pair,
               "--query", query, "--out", pred, "--seed", "2"])
    assert rc == 0
    cloud = read_cloud(pred)
    assert len(cloud) == 96
    assert np.abs(cloud.points).max() <= 1.0

    capsys.readouterr()
    rc = main(["inspect", "--dataset", data, "--checkpoint", ckpt])
    assert rc == 0
    out = capsys.readouterr().out
    assert "samples: 12" in out and "parameters" in out


def test_infer_deterministic_bytes(tmp_path):
    data = gen(tmp_path)
    ckpt = train(tmp_path, data)
    pair = str(tmp_path / "pair.picp")
    query = str(tmp_path / "query.picc")
    main(["export-pair", "--dataset", data, "--index", "1",
          "--out-pair", pair, "--out-query", query])
    p1, p2 = str(tmp_path / "p1.picc"), str(tmp_path / "p2.picc")
    for out in (p1, p2):
        rc = main(["infer", "--checkpoint", ckpt, "--prompt", pair,
                   "--query", query, "--out", out, "--seed", "9"])
        assert rc == 0
    assert file_hash(p1) == file_hash(p2)


def test_train_rerun_byte_identical(tmp_path):
    data = gen(tmp_path)
    c1 = train(tmp_path, data, "m1.ckpt")
    c2 = train(tmp_path, data, "m2.ckpt")
    assert file_hash(c1) == file_hash(c2)
    assert open(c1 + ".loss.tsv").read() == open(c2 + ".loss.tsv").read()


def test_train_resume_reproduces_loss_log(tmp_path):
    data = gen(tmp_path)
    full = str(tmp_path / "full.ckpt")
    rc = main(["train", "--dataset", data, "--out", full, "--epochs", "6",
               "--batch-size", "4", "--seed", "5", *TINY_MODEL])
    assert rc == 0

    half = str(tmp_path / "half.ckpt")
    rc = main(["train", "--dataset", data, "--out", half, "--epochs", "6",
               "--stop-after", "3", "--batch-size", "4", "--seed", "5", *TINY_MODEL])
    assert rc == 0
    resumed = str(tmp_path / "resumed.ckpt")
    rc = main(["train", "--dataset", data, "--out", resumed, "--resume", half])
    assert rc == 0
    assert open(resumed + ".loss.tsv").read() == open(full + ".loss.tsv").read()
    assert file_hash(resumed) == file_hash(full)


def test_icl_dataset_trains_and_evaluates(tmp_path):
    data = gen(tmp_path, "icl.pic", extra=["--icl"], count=8)
    assert read_manifest(data)["label_mode"] == "icl"
    ckpt = train(tmp_path, data, "icl.ckpt", extra=["--nb", "8", "--loss", "cd+sl1"])
    metrics = str(tmp_path / "icl_metrics.tsv")
    rc = main(["eval", "--checkpoint", ckpt, "--dataset", data,
               "--out", metrics, "--seed", "1"])
    assert rc == 0
    content = open(metrics).read()
    assert "miou_percent" in content

    gmetrics = str(tmp_path / "gen_metrics.tsv")
    rc = main(["eval", "--checkpoint", ckpt, "--dataset", data,
               "--out", gmetrics, "--generalization", "--seed", "1"])
    assert rc == 0
    assert "miou_random_baseline" in open(gmetrics).read()


def test_nb_preflight_error(tmp_path):
    data = gen(tmp_path, "icl.pic", extra=["--icl"], count=8)
    rc = main(["train", "--dataset", data, "--out", str(tmp_path / "x.ckpt"),
               "--epochs", "1", "--nb", "1", "--seed", "0", *TINY_MODEL])
    assert rc == 1  # runtime pre-flight failure, not a usage error


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "count = 6\nn_points = 96\nshapes = sphere,cube\ntasks = denoising\nseed = 4\n"
    )
    path = str(tmp_path / "cfg.pic")
    rc = main(["gen-data", "--out", path, "--config", str(cfg), "--count", "10"])
    assert rc == 0
    assert len(read_dataset(path)) == 10  # flag overrides file


def test_config_file_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("warp_speed = 9\n")
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path / "x.pic"), "--config", str(cfg)])
    assert exc.value.code == 2


def test_env_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("PIC_SEED", "21")
    p1 = str(tmp_path / "env.pic")
    rc = main(["gen-data", "--out", p1, "--count", "4", "--n-points", "96",
               "--shapes", "sphere,cube", "--tasks", "denoising"])
    assert rc == 0
    monkeypatch.delenv("PIC_SEED")
    p2 = str(tmp_path / "explicit.pic")
    rc = main(["gen-data", "--out", p2, "--count", "4", "--n-points", "96",
               "--shapes", "sphere,cube", "--tasks", "denoising", "--seed", "21"])
    assert rc == 0
    assert file_hash(p1) == file_hash(p2)


def test_runtime_error_exit_code(tmp_path):
    rc = main(["train", "--dataset", str(tmp_path / "missing.pic"),
               "--out", str(tmp_path / "x.ckpt")])
    assert rc == 1


def test_gen_threads_match_serial(tmp_path):
    p1 = gen(tmp_path, "serial.pic")
    p2 = gen(tmp_path, "parallel.pic", extra=["--threads", "4"])
    assert file_hash(p1) == file_hash(p2)
