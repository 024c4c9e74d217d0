"""
Shared fixtures: seeded generators and per-test data directories.
"""
import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dirs(settings, tmp_path):
    """Point every data directory setting at a fresh temporary tree."""
    settings.DATA_DIR = tmp_path / 'data'
    settings.DATASETS_DIR = settings.DATA_DIR / 'datasets'
    settings.RUNS_DIR = settings.DATA_DIR / 'runs'
    settings.TRACES_DIR = settings.DATA_DIR / 'traces'
    settings.REPORTS_DIR = settings.DATA_DIR / 'reports'
    return settings.DATA_DIR


@pytest.fixture
def lif_defaults(settings):
    settings.LIF_CURRENT_DECAY = 0.25
    settings.LIF_VOLTAGE_DECAY = 0.1
    settings.LIF_THRESHOLD = 1.0
    settings.SURROGATE_WIDTH = 0.5
    settings.SPIKE_POOL_MODE = 'or'
    return settings
