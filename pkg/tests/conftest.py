import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from strokeprog.inference3d import NetworkSpec, load_network, random_network_weights
from strokeprog.volume_io import write_container


def build_network(spec: NetworkSpec, seed: int, zero_shift: bool = False, fold: bool = True):
    payload = write_container(random_network_weights(spec, seed=seed, zero_shift=zero_shift))
    return load_network(payload, spec, fold=fold), payload


@pytest.fixture(scope="session")
def tiny_net():
    from strokeprog.inference3d import tiny_spec

    net, _ = build_network(tiny_spec(), seed=11)
    return net


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
