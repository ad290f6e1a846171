import numpy as np
import pytest

from spoofcl.config import load_config
from spoofcl.synthetic import make_synthetic

# small enough for unit tests to train in seconds
TINY = [
    "frontend.n_mels=16", "frontend.n_frames=32",
    "backbone.n_mels=16", "backbone.n_frames=32",
    "augment.time_mask_max=8", "augment.freq_mask_max=4",
    "backbone.embed_dim=16", "backbone.num_blocks=1", "backbone.num_heads=2",
    "backbone.mlp_hidden=32", "backbone.projection_dim=16",
    "stage1.epochs=1", "stage1.batch_size=8", "stage1.micro_batch=4",
    "stage2.epochs=2", "stage2.batch_size=8", "stage2.hidden=8", "stage2.micro_batch=4",
]


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    return make_synthetic(root, seed=0, sizes={"train": 16, "val": 8, "test": 8}, seconds=0.5)


@pytest.fixture
def tiny_config(tiny_data, tmp_path):
    overrides = TINY + [
        f"data.train_manifest={tiny_data['train']}",
        f"data.val_manifest={tiny_data['val']}",
        f"data.test_manifest={tiny_data['test']}",
        f"data.output_dir={tmp_path / 'runs'}",
    ]
    return load_config(None, overrides)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
