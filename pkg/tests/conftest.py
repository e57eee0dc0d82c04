import numpy as np
import pytest
import torch

from freecsl.data import MaskSpec, MultiViewDataset, make_blobs, normalize
from freecsl.train import TrainConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> TrainConfig:
    """2-view toy network: latent width 4, small hidden layers, float64."""
    base = dict(warmup_epochs=2, finetune_epochs=2, batch_size=8, latent_dim=4,
                hidden=(5, 5, 6), gcn_dims=(5, 4), dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def tiny_dataset(n=12, k=2, dims=(4, 4), rate=0.25, seed=0) -> MultiViewDataset:
    return normalize(make_blobs(n=n, n_clusters=k, dims=dims, separation=4.0, seed=seed,
                                mask_spec=MaskSpec(rate, seed)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return tiny_dataset()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
