"""Tokenizer, mutual-supervision step, fit loop, and run configuration."""

import copy

import numpy as np
import pytest

from conftest import TINY_WORLD, tiny_train_config
from xmcat.data import generate_dataset, load_manifest
from xmcat.grad import AdamState
from xmcat.text import CooccurrenceTable
from xmcat.trainer import (
    ConfigError,
    TrainConfig,
    TrainLog,
    config_text,
    fit,
    load_config_file,
    parse_config_text,
    tokenize,
    train_step,
)
from xmcat.vision import EncoderConfig, Network


def test_tokenize_examples():
    assert tokenize("A red Circle.") == ["a", "red", "circle"]
    assert tokenize("") == []
    assert tokenize("don't stop") == ["don't", "stop"]


def test_tokenize_edge_rules():
    assert tokenize("--hello--") == ["hello"]
    assert tokenize("e-mail stays") == ["e-mail", "stays"]
    assert tokenize("... !!") == []
    assert tokenize("42nd St.") == ["42nd", "st"]
    assert tokenize("tabs\tand\nnewlines") == ["tabs", "and", "newlines"]
    assert tokenize("MiXeD CaSe") == ["mixed", "case"]


def fresh_setup(n_clusters=8, batch=4, seed=1):
    cfg = EncoderConfig(n_clusters=n_clusters, image_size=16, conv_channels=(4, 8))
    net = Network(cfg, seed=seed)
    table = CooccurrenceTable(n_clusters)
    adam = AdamState(learning_rate=1e-3)
    rng = np.random.Generator(np.random.PCG64(seed + 100))
    images = rng.random((batch, 3, 16, 16))
    return net, table, adam, images


def test_first_step_bootstrap_trace():
    net, table, adam, images = fresh_setup()
    captions = [
        ["a", "red", "circle"],
        ["a", "blue", "square"],
        ["the", "red", "square"],
        ["very", "blue"],
    ]
    result = train_step(images, captions, net, table, 0.08, adam)
    assert result.visual.shape == (4, 8)
    assert (result.visual == 1).all()
    assert (result.targets == 0).all()
    # every caption word co-occurred with every cluster exactly once per caption
    assert table.count_cluster == {c: 4 for c in range(8)}
    for caption in captions:
        for w in caption:
            appearances = sum(1 for cap in captions if w in cap)
            assert table.count_joint[w] == {c: appearances for c in range(8)}


def test_novel_vocabulary_updates_counts_but_zero_targets():
    net, table, adam, images = fresh_setup()
    known = [["red", "circle"]] * 4
    train_step(images, known, net, table, 0.08, adam)
    novel = [["zig"], ["zag"], ["zig", "zag"], ["quux"]]
    result = train_step(images, novel, net, table, 0.08, adam)
    assert (result.targets == 0).all()
    assert {"zig", "zag", "quux"} <= table.vocabulary
    assert "zig" in table.count_joint


def test_step_rejects_bad_batches():
    net, table, adam, images = fresh_setup()
    with pytest.raises(ValueError, match="batch mismatch"):
        train_step(images, [["a"]], net, table, 0.08, adam)
    with pytest.raises(ValueError, match="empty batch"):
        train_step(images[:0], [], net, table, 0.08, adam)


def test_targets_computable_from_prestep_table():
    # text supervision must come from the counts as they stood before observe
    net, table, adam, images = fresh_setup(seed=3)
    rng = np.random.Generator(np.random.PCG64(9))
    vocab = ["red", "blue", "circle", "square", "the"]
    for _ in range(6):
        captions = [list(rng.choice(vocab, size=3)) for _ in range(4)]
        before = copy.deepcopy(table)
        result = train_step(images, captions, net, table, 0.08, adam)
        want = np.stack([before.encode_sentence(c, 0.08) for c in captions])
        assert np.array_equal(result.targets, want)


def test_visual_predictions_use_prestep_parameters():
    net, table, adam, images = fresh_setup(seed=5)
    captions = [["red"], ["blue"], ["red"], ["blue"]]
    from xmcat.vision import predict_clusters

    want = predict_clusters(net.forward(images), net.config.visual_threshold)
    result = train_step(images, captions, net, table, 0.08, adam)
    assert np.array_equal(result.visual, want)


def test_fit_config_validation(tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"]
    with pytest.raises(ConfigError, match="epochs"):
        fit(train, tiny_train_config(epochs=0))
    with pytest.raises(ConfigError, match="batch_size"):
        fit(train, tiny_train_config(batch_size=0))
    with pytest.raises(ValueError, match="no samples"):
        fit([], tiny_train_config())


def test_fit_step_arithmetic(tmp_path):
    generate_dataset(TINY_WORLD, 100, 0, 23, tmp_path)
    samples = load_manifest(tmp_path / "manifest.tsv")
    config = tiny_train_config(batch_size=50, epochs=1)
    _net, _table, log = fit(samples, config)
    assert len(log.steps) == 2
    assert [r.step for r in log.steps] == [1, 2]
    assert len(log.epochs) == 1


def test_fit_uneven_last_batch(tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"][:25]
    config = tiny_train_config(batch_size=10, epochs=2)
    _net, _table, log = fit(train, config)
    # 3 steps per epoch, last batch holds 5 samples
    assert len(log.steps) == 6
    assert [r.epoch for r in log.steps] == [0, 0, 0, 1, 1, 1]


def test_fit_deterministic(tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"]
    runs = []
    for _ in range(2):
        net, table, log = fit(train, tiny_train_config())
        runs.append(
            (
                [(r.step, r.epoch, r.loss) for r in log.steps],
                [(e.epoch, e.mean_loss, e.table_entries) for e in log.epochs],
                {name: node.data.copy() for name, node in net.params()},
                (dict(table.count_cluster), copy.deepcopy(table.count_joint)),
            )
        )
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][2][k], runs[1][2][k]) for k in runs[0][2])
    assert runs[0][3] == runs[1][3]


def test_fit_seed_changes_losses(tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"]
    _n1, _t1, log1 = fit(train, tiny_train_config(seed=5))
    _n2, _t2, log2 = fit(train, tiny_train_config(seed=6))
    assert [r.loss for r in log1.steps] != [r.loss for r in log2.steps]


def test_fit_replay_oracle(tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"]
    config = tiny_train_config()
    _net, table, log = fit(train, config, record_observations=True)
    assert len(log.observations) == config.epochs * len(train)
    replay = CooccurrenceTable(config.encoder.n_clusters)
    for tokens, bits in log.observations:
        replay.observe(tokens, np.array(bits, dtype=np.uint8))
    assert replay.count_cluster == table.count_cluster
    assert replay.count_joint == table.count_joint
    assert replay.vocabulary == table.vocabulary


def test_fit_loss_improves_over_epochs(tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"]
    config = tiny_train_config(epochs=10, learning_rate=1e-3)
    _net, _table, log = fit(train, config)
    assert log.epochs[9].mean_loss < log.epochs[0].mean_loss


def test_fit_checkpoints(tmp_path, tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"]
    config = tiny_train_config(epochs=2, checkpoint_interval=1)
    fit(train, config, checkpoint_dir=tmp_path)
    for name in (
        "network_epoch000.xmck",
        "network_epoch001.xmck",
        "counts_epoch000.xmct",
        "counts_epoch001.xmct",
        "network.xmck",
        "counts.xmct",
    ):
        assert (tmp_path / name).is_file(), name


def test_fit_no_interval_checkpoints(tmp_path, tiny_samples):
    train = [s for s in tiny_samples if s.split == "train"][:20]
    config = tiny_train_config(epochs=1)
    fit(train, config, checkpoint_dir=tmp_path / "run")
    files = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert files == ["counts.xmct", "network.xmck"]


def test_trainlog_csv(tmp_path):
    log = TrainLog()
    from xmcat.trainer import StepRecord

    log.steps.append(StepRecord(1, 0, 0.6931471805599453))
    log.steps.append(StepRecord(2, 0, 0.25))
    path = tmp_path / "log.csv"
    log.write_csv(path)
    assert path.read_text() == "step,epoch,loss\n1,0,0.693147181\n2,0,0.25\n"


def test_parse_config_roundtrip():
    config = tiny_train_config(epochs=7, learning_rate=3e-4)
    text = config_text(config)
    parsed = parse_config_text(text)
    assert parsed == config


def test_parse_config_overrides_base():
    base = tiny_train_config()
    parsed = parse_config_text("epochs=9\nn_clusters=12\n", base)
    assert parsed.epochs == 9
    assert parsed.encoder.n_clusters == 12
    # untouched fields keep the base values
    assert parsed.encoder.image_size == base.encoder.image_size
    assert parsed.batch_size == base.batch_size


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="unknown config key: 'nope'"):
        parse_config_text("nope=1\n")
    with pytest.raises(ConfigError, match="line 2.*bad value for 'epochs'"):
        parse_config_text("seed=1\nepochs=three\n")
    with pytest.raises(ConfigError, match="line 1.*key=value"):
        parse_config_text("just some words\n")


def test_parse_config_comments_and_blanks():
    parsed = parse_config_text("# a comment\n\nseed=4\n# another\nbatch_size=2\n")
    assert parsed.seed == 4
    assert parsed.batch_size == 2


def test_parse_config_conv_channels():
    parsed = parse_config_text("conv_channels=4,8,16\nimage_size=32\n")
    assert parsed.encoder.conv_channels == (4, 8, 16)
    with pytest.raises(ConfigError, match="bad value for 'conv_channels'"):
        parse_config_text("conv_channels=4,x\n")


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs=3\nseed=11\n")
    config = load_config_file(path, tiny_train_config())
    assert config.epochs == 3
    assert config.seed == 11
    with pytest.raises(ConfigError, match="cannot read config file"):
        load_config_file(tmp_path / "absent.cfg")


def test_train_config_validation():
    with pytest.raises(ConfigError, match="learning_rate"):
        tiny_train_config(learning_rate=0.0).validate()
    with pytest.raises(ConfigError, match="checkpoint_interval"):
        tiny_train_config(checkpoint_interval=-1).validate()
    tiny_train_config().validate()
