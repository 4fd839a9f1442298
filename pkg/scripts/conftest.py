"""Shared fixtures: small phantoms so the default run stays fast.

Experiments that train for minutes are marked `slow` and only run with
THALSEG_RUN_SLOW=1.
"""
import os
import sys

sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import pytest

from thalseg.phantom import PhantomSpec, generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running phantom experiment (THALSEG_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("THALSEG_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set THALSEG_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(grid=(24, 24, 24), n_nuclei=4, noise_sigma=0.02, deform_amplitude=1.0, seed=3)


@pytest.fixture(scope="session")
def small_cases(small_spec):
    return generate_dataset(small_spec, 6, base_seed=11)


@pytest.fixture(scope="session")
def schema(small_spec):
    return small_spec.schema
