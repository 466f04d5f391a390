"""Shared fixtures. Heavy training fixtures live in test_acceptance; here we
keep only cheap artifacts reused across module test files."""

import numpy as np
import pytest
import torch

from clasp import blockworld as bw
from clasp import datastore


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # Determinism checks compare float sums; keep reductions single-threaded.
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_records():
    """48 generated pairs, enough for split/batch/eval plumbing."""
    return datastore.generate_dataset(48, seed=5)


@pytest.fixture(scope="session")
def attrs_table():
    return bw.sample_attr_table(np.random.default_rng(3))


@pytest.fixture(scope="session")
def one_board(attrs_table):
    return bw.sample_board(attrs_table, np.random.default_rng(4))
