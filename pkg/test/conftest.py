"""
Pytest configuration and shared fixtures for all tests.

This module provides small graphs, datasets and sampler settings shared by the
unit, integration and performance suites, and keeps the run index of every
test inside its own temporary directory.
"""
import os

import numpy as np
import pytest

from depfa.models.schemas import SamplerConfig
from depfa.services.datasets import Dataset, LongitudinalDataset
from depfa.services.graph import build_knn_graph


@pytest.fixture(autouse=True)
def setup_test_environment(tmp_path, monkeypatch):
    """Set up test environment before each test."""
    os.environ["APP_ENV"] = "test"
    os.environ["LANGSMITH_TRACING"] = "0"  # Disable tracing in tests
    monkeypatch.setattr("storage.local_store.RUNS_FILE", str(tmp_path / "runs_index.json"))
    yield


@pytest.fixture
def boundary_hyper(monkeypatch):
    """Allow tau_s = 0 / tau_u = 0 for the duration of a test."""
    from shared.config import settings

    monkeypatch.setattr(settings, "allow_boundary_hyper", True)
    yield settings


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def path3_laplacian():
    return np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])


@pytest.fixture
def small_points():
    """Twelve items on the unit square."""
    return np.random.default_rng(7).random((12, 2))


@pytest.fixture
def small_graph(small_points):
    return build_knn_graph(small_points, 3)


@pytest.fixture
def direct_dataset():
    """10 x 3 direct-mode dataset with a few missing cells."""
    r = np.random.default_rng(3)
    A = (r.random((10, 3)) < 0.5).astype(float)
    A[0, 1] = np.nan
    A[4, 2] = np.nan
    return Dataset(A_obs=A, covariates=r.random((10, 2)))


@pytest.fixture
def drug_dataset():
    """
    8 items, 3 conditions, 4 drugs.

    Drug 0 treats condition 0 only, drug 1 condition 1 only, drugs 2 and 3 both
    treat condition 2, drug 3 also treats condition 1.
    """
    B = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1]])
    drugs = [{0}, {1, 2}, set(), {3}, None, {0, 3}, {2}, set()]
    r = np.random.default_rng(5)
    return Dataset(
        A_obs=np.full((8, 3), np.nan), covariates=r.random((8, 2)), mode="drug", B=B, drug_sets=drugs
    )


@pytest.fixture
def longitudinal_dataset():
    """8 items, 2 conditions, visits at t = 0, 1, 2.5."""
    r = np.random.default_rng(11)
    A = (r.random((3, 8, 2)) < 0.5).astype(float)
    visits = np.ones((3, 8), dtype=bool)
    visits[1, 2] = False
    return LongitudinalDataset(times=[0.0, 1.0, 2.5], A_obs=A, covariates=r.random((8, 2)), visits=visits)


@pytest.fixture
def fast_sampler():
    return SamplerConfig(warmup=150, draws=150, chains=2, seed=1, max_tree_depth=6)


# Performance test markers
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "unit: Unit tests")
    config.addinivalue_line("markers", "integration: Integration tests")
    config.addinivalue_line("markers", "performance: Performance tests")
    config.addinivalue_line("markers", "slow: Slow running tests")
    config.addinivalue_line("markers", "benchmark: Benchmark tests")


def pytest_collection_modifyitems(config, items):
    """Mark tests by directory; skip performance and slow tests unless requested."""
    skip_performance = pytest.mark.skip(reason="Performance tests require --run-performance flag")
    skip_slow = pytest.mark.skip(reason="Slow tests require --run-slow flag")
    for item in items:
        path = str(item.fspath)
        if f"{os.sep}unit{os.sep}" in path:
            item.add_marker(pytest.mark.unit)
        elif f"{os.sep}integration{os.sep}" in path:
            item.add_marker(pytest.mark.integration)
        if "performance" in item.keywords and not config.getoption("--run-performance"):
            item.add_marker(skip_performance)
        if "slow" in item.keywords and not config.getoption("--run-slow"):
            item.add_marker(skip_slow)


def pytest_addoption(parser):
    """Add custom command line options."""
    parser.addoption("--run-performance", action="store_true", default=False, help="Run performance tests")
    parser.addoption("--run-slow", action="store_true", default=False, help="Run slow acceptance tests")
