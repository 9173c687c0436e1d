"""
Pytest configuration and shared fixtures
"""
import os
from pathlib import Path

import numpy as np
import pytest

from src.fiberseg.phantom import PhantomSpec, generate_phantom
from src.fiberseg.volgrid import LabelVolume, Volume


def pytest_configure(config):
    """Configure pytest"""
    # Add custom markers
    config.addinivalue_line(
        "markers", "unit: Unit tests (pure functions, small arrays)"
    )
    config.addinivalue_line(
        "markers", "integration: Integration tests (several modules on generated phantoms)"
    )
    config.addinivalue_line(
        "markers", "e2e: End-to-end tests (CLI subcommands on files)"
    )
    config.addinivalue_line(
        "markers", "slow: Desk-scale acceptance runs (minutes; set FIBERSEG_RUN_SLOW=1)"
    )


def pytest_collection_modifyitems(config, items):
    """Modify test collection"""
    # Skip slow runs unless explicitly requested
    run_slow = os.getenv("FIBERSEG_RUN_SLOW") == "1"

    for item in items:
        if "slow" in item.keywords and not run_slow:
            item.add_marker(
                pytest.mark.skip(reason="FIBERSEG_RUN_SLOW not set")
            )


@pytest.fixture(scope="session")
def test_data_dir():
    """Get test data directory"""
    return Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def small_spec_path(test_data_dir):
    """Small LR-like phantom spec file"""
    return test_data_dir / "phantom_small.spec"


@pytest.fixture(scope="session")
def small_spec(small_spec_path):
    """Parsed small phantom spec"""
    return PhantomSpec.from_file(small_spec_path)


@pytest.fixture(scope="session")
def small_phantom(small_spec):
    """(gray, label) rendered from the small spec"""
    return generate_phantom(small_spec)


@pytest.fixture(scope="session")
def small_phantom_eval(small_spec):
    """Second phantom of the same spec with another seed"""
    return generate_phantom(small_spec.model_copy(update={"seed": small_spec.seed + 1}))


@pytest.fixture
def rng():
    """Seeded generator"""
    return np.random.default_rng(1234)


@pytest.fixture
def random_gray(rng):
    """Random 12x10x8 gray volume"""
    return Volume(data=rng.normal(size=(12, 10, 8)), voxel_size_um=3.9)


@pytest.fixture
def random_label(rng):
    """Random 12x10x8 label volume, ~30% fiber"""
    return LabelVolume(data=rng.random((12, 10, 8)) < 0.3, voxel_size_um=3.9)
