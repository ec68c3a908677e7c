"""Shared fixtures: single-threaded BLAS and smooth synthetic token grids."""

import os

# Pin BLAS threading before numpy loads so timings and results are stable on
# one core regardless of the host's thread defaults.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from toy_grids import make_toy_grid


@pytest.fixture
def toy_grid():
    return make_toy_grid


@pytest.fixture
def rng():
    return np.random.default_rng(0)
