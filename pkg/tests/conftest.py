import numpy as np
import pytest

from qviton import data as D


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Small synthetic dataset shared across tests (8 regions x 6 tiles)."""
    root = tmp_path_factory.mktemp("synth")
    D.synth_generate(root, n_regions=8, tiles_per_region=6, seed=42)
    return root


@pytest.fixture()
def manifest(synth_root):
    return D.scan_dataset(synth_root)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
