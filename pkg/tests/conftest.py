import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("default")

from parceldrone.core import PLATFORMS  # noqa: E402
from parceldrone.morphogen import generate_morphology  # noqa: E402


@pytest.fixture(scope="session")
def platforms():
    return {name: generate_morphology(p) for name, p in PLATFORMS.items()}


@pytest.fixture(scope="session")
def fixture_db():
    from parceldrone.autotune import fixture_database
    return fixture_database()


@pytest.fixture(scope="session")
def bundles(fixture_db):
    from parceldrone.flightlab import platform_bundle
    return {name: platform_bundle(name, fixture_db) for name in PLATFORMS}
