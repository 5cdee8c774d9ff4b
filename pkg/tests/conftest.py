import pytest

from xmcat.data import WorldSpec, generate_dataset, load_gold, load_manifest
from xmcat.trainer import TrainConfig, fit
from xmcat.vision import EncoderConfig

# 16px canvas keeps rendering and forward passes cheap in unit tests
TINY_WORLD = WorldSpec(canvas=16, min_object=4, max_object=8)


def tiny_train_config(**overrides):
    encoder = overrides.pop(
        "encoder", EncoderConfig(n_clusters=8, image_size=16, conv_channels=(4, 8))
    )
    defaults = dict(encoder=encoder, batch_size=10, epochs=2, seed=5)
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyworld")
    generate_dataset(TINY_WORLD, 60, 12, 11, out)
    return out


@pytest.fixture(scope="session")
def tiny_samples(tiny_data_dir):
    return load_manifest(tiny_data_dir / "manifest.tsv")


@pytest.fixture(scope="session")
def tiny_gold(tiny_data_dir):
    return load_gold(tiny_data_dir)


@pytest.fixture(scope="session")
def tiny_run(tiny_samples):
    """A short training run shared by read-only tests; do not mutate."""
    config = tiny_train_config()
    train = [s for s in tiny_samples if s.split == "train"]
    net, table, log = fit(train, config)
    return net, table, log, config
