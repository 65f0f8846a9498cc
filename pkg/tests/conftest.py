import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from toydata import write_burst_tree  # noqa: E402


@pytest.fixture(scope="session")
def toy_source(tmp_path_factory):
    """A small burst-scene tree shared across tests that build datasets."""
    root = tmp_path_factory.mktemp("bursts")
    write_burst_tree(root, n_scenes=4, seed=20, h=64, w=64)
    return root


@pytest.fixture(scope="session")
def eight_triple_dataset(tmp_path_factory):
    """Exactly 8 train / 2 eval triples: 10 scenes of 13 frames each."""
    from deblurpair import datagen

    src = tmp_path_factory.mktemp("bursts8")
    write_burst_tree(src, n_scenes=10, seed=77, h=48, w=48, frames_range=(13, 13))
    out = tmp_path_factory.mktemp("dataset8")
    records = datagen.build_dataset(src, out, seed=5, train_fraction=0.8)
    n_train = sum(1 for r in records if "error" not in r and r["split"] == "train")
    assert n_train == 8
    return out


@pytest.fixture(scope="session")
def toy_checkpoint(tmp_path_factory, eight_triple_dataset):
    """A one-epoch merger checkpoint for inference and eval tests."""
    from deblurpair import train
    from deblurpair.nets import NetConfig

    ck = tmp_path_factory.mktemp("ck")
    cfg = train.TrainConfig(
        model="merger", crop=32, batch_size=2, seed=3, epochs=1,
        data_root=str(eight_triple_dataset), checkpoint_dir=str(ck),
        net=NetConfig(encoder_depth=2, base_channels=4), dc_patch=3,
    )
    return train.train(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
