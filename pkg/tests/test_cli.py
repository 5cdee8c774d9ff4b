import os
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY_WORLD
from xmcat.cli import main
from xmcat.data import generate_dataset, load_gold, load_manifest
from xmcat.text import CooccurrenceTable, save_counts
from xmcat.vision import EncoderConfig, Network, save_checkpoint

TRAIN_CONFIG_TEXT = """\
n_clusters=8
image_size=16
conv_channels=4,8
batch_size=10
epochs=2
seed=5
"""


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("clidata")
    generate_dataset(TINY_WORLD, 40, 8, 21, out)
    return out


@pytest.fixture(scope="module")
def cli_run(cli_data, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("clirun")
    config_path = run_dir / "train.cfg"
    config_path.write_text(TRAIN_CONFIG_TEXT, encoding="utf-8")
    code = main(
        [
            "train",
            "--data",
            str(cli_data),
            "--config",
            str(config_path),
            "--ckpt-dir",
            str(run_dir / "ckpt"),
        ]
    )
    assert code == 0
    return run_dir / "ckpt"


@pytest.fixture(scope="module")
def pure_counts_dir(tmp_path_factory, cli_data):
    """Counts crafted so every taxonomy word lands in its shape's cluster."""
    out = tmp_path_factory.mktemp("pure")
    gold = load_gold(cli_data)
    shapes = sorted(set(gold.taxonomy.values()))
    table = CooccurrenceTable(8)
    for word, shape in sorted(gold.taxonomy.items()):
        bits = np.zeros(8, dtype=np.int64)
        bits[shapes.index(shape)] = 1
        for _ in range(4):
            table.observe([word], bits)
    save_counts(table, out / "counts.xmct")
    net = Network(EncoderConfig(n_clusters=8, image_size=16, conv_channels=(4,)), seed=0)
    save_checkpoint(net, out / "network.xmck")
    return out


def read_report(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        key, value = line.split("=", 1)
        values[key] = value
    return values


# ----------------------------------------------------------- exit codes


def test_no_command_is_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == 2


def test_unknown_task_is_usage_error(cli_data, tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["eval", "--data", str(cli_data), "--task", "nope", "--out", str(tmp_path)])
    assert excinfo.value.code == 2


def test_gen_rejects_bad_counts(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--train", "0"]) == 2
    assert "error:" in capsys.readouterr().err


def test_gen_rejects_bad_theme_split(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--themes", "5"]) == 2
    assert "divide" in capsys.readouterr().err


def test_eval_requires_model_files(cli_data, tmp_path, capsys):
    code = main(
        ["eval", "--data", str(cli_data), "--task", "clustering", "--out", str(tmp_path)]
    )
    assert code == 2
    assert "--ckpt" in capsys.readouterr().err


def test_train_unknown_config_key(cli_data, tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("epohcs=2\n", encoding="utf-8")
    code = main(
        [
            "train",
            "--data",
            str(cli_data),
            "--config",
            str(config),
            "--ckpt-dir",
            str(tmp_path / "ckpt"),
        ]
    )
    assert code == 2
    assert "epohcs" in capsys.readouterr().err


def test_missing_data_dir_is_runtime_error(tmp_path, capsys):
    code = main(
        [
            "train",
            "--data",
            str(tmp_path / "nowhere"),
            "--ckpt-dir",
            str(tmp_path / "ckpt"),
        ]
    )
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cluster_count_mismatch(cli_run, tmp_path, cli_data, capsys):
    table = CooccurrenceTable(5)
    save_counts(table, tmp_path / "other.xmct")
    code = main(
        [
            "eval",
            "--data",
            str(cli_data),
            "--task",
            "clustering",
            "--ckpt",
            str(cli_run / "network.xmck"),
            "--counts",
            str(tmp_path / "other.xmct"),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == 1
    assert "mismatch" in capsys.readouterr().err


def test_thread_cap_applies(monkeypatch, pure_counts_dir, capsys):
    monkeypatch.setenv("XMC_THREADS", "2")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert main(["dump-clusters", "--counts", str(pure_counts_dir / "counts.xmct")]) == 0
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"
    assert os.environ["OMP_NUM_THREADS"] == "2"
    capsys.readouterr()


def test_thread_cap_rejects_garbage(monkeypatch, capsys):
    monkeypatch.setenv("XMC_THREADS", "many")
    assert main(["dump-clusters", "--counts", "whatever.xmct"]) == 2
    assert "XMC_THREADS" in capsys.readouterr().err


# ------------------------------------------------------------------ gen


def test_gen_writes_dataset(tmp_path, capsys):
    out = tmp_path / "world"
    code = main(["gen", "--out", str(out), "--train", "8", "--test", "3", "--seed", "7"])
    assert code == 0
    assert "wrote 11 samples" in capsys.readouterr().out
    for name in ("run_manifest.txt", "manifest.tsv", "taxonomy.tsv", "assoc.tsv", "concreteness.tsv"):
        assert (out / name).is_file()
    assert len(list((out / "images").glob("*.ppm"))) == 11
    samples = load_manifest(out / "manifest.tsv")
    assert sum(s.split == "train" for s in samples) == 8


def test_gen_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["gen", "--out", str(a), "--train", "6", "--test", "2", "--seed", "3"]) == 0
    assert main(["gen", "--out", str(b), "--train", "6", "--test", "2", "--seed", "3"]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_gen_run_manifest_contents(tmp_path):
    out = tmp_path / "world"
    assert main(["gen", "--out", str(out), "--train", "5", "--test", "1", "--seed", "9"]) == 0
    manifest = read_report(out / "run_manifest.txt")
    assert manifest["command"] == "gen"
    assert manifest["seed"] == "9"
    assert manifest["config.n_train"] == "5"
    assert manifest["output.manifest"] == "manifest.tsv"
    assert len(manifest["config_digest"]) == 64


# ---------------------------------------------------------------- train


def test_train_outputs(cli_run, capsys):
    for name in ("run_manifest.txt", "network.xmck", "counts.xmct", "trainlog.csv", "loss_curve.png"):
        assert (cli_run / name).is_file()
    lines = (cli_run / "trainlog.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,loss"
    # 40 train samples / batch 10 * 2 epochs
    assert len(lines) == 1 + 8
    manifest = read_report(cli_run / "run_manifest.txt")
    assert manifest["command"] == "train"
    assert manifest["config.epochs"] == "2"
    assert manifest["config.n_clusters"] == "8"


def test_train_epoch_override_and_determinism(cli_data, cli_run, tmp_path, capsys):
    config_path = tmp_path / "train.cfg"
    config_path.write_text(TRAIN_CONFIG_TEXT, encoding="utf-8")
    base = [
        "train",
        "--data",
        str(cli_data),
        "--config",
        str(config_path),
    ]
    assert main(base + ["--ckpt-dir", str(tmp_path / "r1"), "--epochs", "1"]) == 0
    assert main(base + ["--ckpt-dir", str(tmp_path / "r2"), "--epochs", "1"]) == 0
    capsys.readouterr()
    assert read_report(tmp_path / "r1" / "run_manifest.txt")["config.epochs"] == "1"
    r1 = (tmp_path / "r1" / "network.xmck").read_bytes()
    r2 = (tmp_path / "r2" / "network.xmck").read_bytes()
    assert r1 == r2
    # one epoch diverges from the two-epoch reference run
    assert r1 != (cli_run / "network.xmck").read_bytes()


def test_train_requires_train_split(tmp_path, capsys):
    data = tmp_path / "testonly"
    generate_dataset(TINY_WORLD, 0, 3, 2, data)
    code = main(["train", "--data", str(data), "--ckpt-dir", str(tmp_path / "ckpt")])
    assert code == 1
    assert "no train-split samples" in capsys.readouterr().err


# ----------------------------------------------------------------- eval


def run_eval(task, model_dir, cli_data, out, extra=()):
    return main(
        [
            "eval",
            "--data",
            str(cli_data),
            "--task",
            task,
            "--ckpt",
            str(Path(model_dir) / "network.xmck"),
            "--counts",
            str(Path(model_dir) / "counts.xmct"),
            "--out",
            str(out),
            *extra,
        ]
    )


def test_eval_clustering_pure_counts(pure_counts_dir, cli_data, tmp_path, capsys):
    assert run_eval("clustering", pure_counts_dir, cli_data, tmp_path / "out") == 0
    out = capsys.readouterr().out
    report = read_report(tmp_path / "out" / "report.txt")
    assert report["task"] == "clustering"
    assert report["fscore"] == "1"
    assert report["words_assigned"] == "12"
    assert report["clusters_used"] == "4"
    assert "fscore=1" in out
    assert (tmp_path / "out" / "report.csv").is_file()
    assert (tmp_path / "out" / "clustering.png").is_file()
    assert (tmp_path / "out" / "run_manifest.txt").is_file()


def test_eval_threshold_monotone_in_assignments(pure_counts_dir, cli_data, tmp_path, capsys):
    assert run_eval(
        "clustering", pure_counts_dir, cli_data, tmp_path / "lo", extra=("--theta-t", "0.01")
    ) == 0
    assert run_eval(
        "clustering", pure_counts_dir, cli_data, tmp_path / "hi", extra=("--theta-t", "0.99")
    ) == 0
    capsys.readouterr()
    lo = float(read_report(tmp_path / "lo" / "report.txt")["words_assigned"])
    hi = float(read_report(tmp_path / "hi" / "report.txt")["words_assigned"])
    assert lo >= hi


def test_eval_association_pure_counts(pure_counts_dir, cli_data, tmp_path, capsys):
    assert run_eval("association", pure_counts_dir, cli_data, tmp_path / "out") == 0
    capsys.readouterr()
    report = read_report(tmp_path / "out" / "report.txt")
    # pure shape clusters contain within-theme companion pairs
    assert float(report["same_cluster_pairs"]) > 0
    assert "mas" in report
    assert (tmp_path / "out" / "association.png").is_file()


def test_eval_concreteness(cli_run, cli_data, tmp_path, capsys):
    assert run_eval("concreteness", cli_run, cli_data, tmp_path / "out") == 0
    capsys.readouterr()
    report = read_report(tmp_path / "out" / "report.txt")
    assert "bucket_1_words" in report
    assert (tmp_path / "out" / "concreteness.png").is_file()


def test_eval_classification_matches_library(cli_run, cli_data, tmp_path, capsys):
    assert run_eval("classification", cli_run, cli_data, tmp_path / "out") == 0
    capsys.readouterr()
    report = read_report(tmp_path / "out" / "report.txt")

    from xmcat.metrics import build_class_map, multilabel_eval
    from xmcat.text import load_counts
    from xmcat.vision import load_checkpoint

    net = load_checkpoint(cli_run / "network.xmck", image_size=16)
    table = load_counts(cli_run / "counts.xmct")
    gold = load_gold(cli_data)
    class_map = build_class_map(sorted(gold.taxonomy), table, 0.08)
    samples = [s for s in load_manifest(cli_data / "manifest.tsv") if s.split == "test"]
    expected = multilabel_eval(samples, net, class_map, 0.5)
    for key in ("precision", "recall", "f1", "tp", "fp", "fn"):
        assert float(report[key]) == pytest.approx(expected.metrics[key], abs=1e-9)


def test_eval_localization(cli_run, cli_data, tmp_path, capsys):
    assert run_eval("localization", cli_run, cli_data, tmp_path / "out") == 0
    capsys.readouterr()
    report = read_report(tmp_path / "out" / "report.txt")
    assert 0.0 <= float(report["precision"]) <= 1.0
    assert "predicted_boxes" in report
    assert (tmp_path / "out" / "localization.png").is_file()


def test_eval_baselines(cli_data, tmp_path, capsys):
    code = main(
        ["eval", "--data", str(cli_data), "--task", "baselines", "--out", str(tmp_path / "out")]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "task=baseline_random" in out
    random_report = read_report(tmp_path / "out" / "baseline_random.txt")
    assert 0.0 < float(random_report["fscore_mean"]) < 1.0
    assert float(random_report["restarts"]) == 5
    kmeans_report = read_report(tmp_path / "out" / "baseline_kmeans.txt")
    assert "fscore" in kmeans_report
    boxes_report = read_report(tmp_path / "out" / "baseline_boxes.txt")
    assert 0.0 <= float(boxes_report["precision"]) <= 1.0
    for name in ("baseline_random.csv", "baseline_kmeans.csv", "baseline_boxes.csv", "baselines.png"):
        assert (tmp_path / "out" / name).is_file()


# ------------------------------------------------------------------ cam


def test_cam_outputs(cli_run, cli_data, tmp_path, capsys):
    image = sorted((cli_data / "images").glob("*.ppm"))[0]
    out = tmp_path / "cam"
    code = main(
        [
            "cam",
            "--ckpt",
            str(cli_run / "network.xmck"),
            "--image",
            str(image),
            "--out",
            str(out),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert (out / "boxes.txt").is_file()
    pgms = sorted(out.glob("cam_cluster_*.pgm"))
    pngs = sorted(out.glob("cam_cluster_*.png"))
    assert len(pgms) == len(pngs)
    assert len(pgms) == len((out / "boxes.txt").read_text().splitlines())
    for pgm in pgms:
        payload = pgm.read_bytes()
        assert payload.startswith(b"P5\n16 16\n255\n")
        gray = np.frombuffer(payload.split(b"255\n", 1)[1], dtype=np.uint8)
        assert gray.size == 256
    if pgms:
        assert "cluster" in stdout
    else:
        assert "no clusters predicted" in stdout


def test_cam_high_threshold_predicts_nothing(cli_run, cli_data, tmp_path, capsys):
    image = sorted((cli_data / "images").glob("*.ppm"))[0]
    out = tmp_path / "cam"
    code = main(
        [
            "cam",
            "--ckpt",
            str(cli_run / "network.xmck"),
            "--image",
            str(image),
            "--out",
            str(out),
            "--theta-v",
            "0.999",
        ]
    )
    assert code == 0
    assert "no clusters predicted" in capsys.readouterr().out
    assert (out / "boxes.txt").read_text() == ""


# -------------------------------------------------------- dump-clusters


def test_dump_clusters_listing(pure_counts_dir, tmp_path, capsys):
    out = tmp_path / "dump"
    code = main(
        [
            "dump-clusters",
            "--counts",
            str(pure_counts_dir / "counts.xmct"),
            "--out",
            str(out),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    lines = stdout.splitlines()
    assert len(lines) == 4
    assert all(line.startswith("Cluster ") for line in lines)
    # every shape cluster lists its three member words
    assert all(len(line.split(": ", 1)[1].split("; ")) == 3 for line in lines)
    assert (out / "clusters.txt").read_text() == stdout
    assert (out / "run_manifest.txt").is_file()


def test_dump_clusters_empty_table(tmp_path, capsys):
    table = CooccurrenceTable(4)
    save_counts(table, tmp_path / "empty.xmct")
    assert main(["dump-clusters", "--counts", str(tmp_path / "empty.xmct")]) == 0
    assert capsys.readouterr().out == ""
