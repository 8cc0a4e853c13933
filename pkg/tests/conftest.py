import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bitflip.bitrep import QuantLayer, quantize_layer
from bitflip.datagen import BlobSpec, ImageClassSpec, generate_blobs, generate_patch_classes, split_dataset
from bitflip.netcore import Dataset, DenseLayer, Network, train_model

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_network(rng, d=3, widths=(5, 4), K=3, Q=6, bias=True) -> Network:
    hidden = []
    prev = d
    for w in widths:
        hidden.append(DenseLayer(rng.standard_normal((w, prev)), rng.standard_normal(w) * 0.1, "relu"))
        prev = w
    out = quantize_layer(rng.standard_normal((K, prev)), Q)
    return Network(tuple(hidden), out, rng.standard_normal(K) * 0.1 if bias else None)


def random_dataset(rng, n, d, K, role="aux", lo=None, hi=None) -> Dataset:
    if lo is None:
        X = rng.standard_normal((n, d))
        return Dataset(X, rng.integers(0, K, n), K, role)
    return Dataset(rng.uniform(lo, hi, (n, d)), rng.integers(0, K, n), K, role, (lo, hi))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_splits():
    return split_dataset(generate_blobs(BlobSpec()))


@pytest.fixture(scope="session")
def blob_model(blob_splits):
    train, _, _ = blob_splits
    return train_model(train, (32, 32, 32), epochs=30, lr=0.01, seed=0, Q=8)


@pytest.fixture(scope="session")
def patch_splits():
    return split_dataset(generate_patch_classes(ImageClassSpec()))


@pytest.fixture(scope="session")
def patch_model(patch_splits):
    train, _, _ = patch_splits
    return train_model(train, (32, 32, 32), epochs=30, lr=0.01, seed=0, Q=8)


def tiny_layer(ints, Q=2, delta=1.0) -> QuantLayer:
    return QuantLayer(np.asarray(ints), Q, delta)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
