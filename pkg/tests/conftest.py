"""
Pytest configuration and fixtures for the protofed tests.

Every fixture builds its data from fixed seeds on the two-block toy model, so
the whole suite runs on a laptop in double precision.
"""

import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import protofed
from protofed.RunSettings import DataConfig, InterpretSettings
from protofed.SiteData import build_sites

_TRAIN_SIZES = (24, 20, 18, 16)
_HEALTHY_FRACTIONS = (0.5, 0.6, 0.5, 0.5)


def small_run_config(num_clients: int = 2, **federation) -> protofed.RunConfig:
    """Toy model, a handful of images per site and two short rounds."""
    config = protofed.tiny_config(seed=0)
    fed = replace(config.federation, num_clients=num_clients, rounds=2,
                  batch_size=8, learning_rate=1e-2)
    fed = replace(fed, **federation)
    data = DataConfig(train_sizes=_TRAIN_SIZES[:num_clients],
                      healthy_fractions=_HEALTHY_FRACTIONS[:num_clients],
                      test_size=12, glyph_size=6, seed=3)
    return replace(config, federation=fed, data=data,
                   interpret=InterpretSettings(max_images=4)).validate()


@pytest.fixture(autouse=True)
def double_precision():
    """Restores the default element type after every test."""
    protofed.set_precision("double")
    yield
    protofed.set_precision("double")


@pytest.fixture
def make_config():
    """Factory for small run configs: ``make_config(num_clients, **federation)``."""
    return small_run_config


@pytest.fixture
def tiny_backbone():
    return protofed.tiny_config(seed=0).backbone


@pytest.fixture
def tiny_params(tiny_backbone):
    return protofed.init_params(tiny_backbone, seed=0)


@pytest.fixture(scope="session")
def small_sites():
    """Generated sites of the two-client config, shared by the session."""
    return build_sites(small_run_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def temp_output_dir():
    """
    Temporary directory for run outputs.

    Automatically cleaned up after test completes.
    """
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir, ignore_errors=True)
